//! Reverse-mode differentiation over a recorded tape.
//!
//! Objectives are functions of parameters `θ` and a perturbation `δ`. Each
//! entry point records the objective on a fresh tape, so calls are
//! independent and nothing is cached between them.

mod params;
mod tape;

pub use params::{ParamVector, Segment};
pub use tape::{Tape, Var};

use crate::error::{Result, ShapeError};
use crate::tensor::Tensor;

/// A scalar function of `(θ, δ)` built from tape primitives.
pub trait Objective {
    /// Records the objective and returns its scalar node.
    fn record<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], delta: Var<'t>) -> Var<'t>;
}

impl<F> Objective for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Var<'t>,
{
    fn record<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], delta: Var<'t>) -> Var<'t> {
        self(tape, theta, delta)
    }
}

/// An objective that is the mean of `batch_size` independent per-example
/// terms, each depending only on its own row of `δ`.
///
/// The per-example `δ`-gradient is then `batch_size * ∇_δ f`.
pub trait BatchObjective: Objective {
    fn batch_size(&self) -> usize;
}

/// Treats an objective as a single term, so per-example and batch gradients coincide.
#[derive(Clone, Copy, Debug)]
pub struct Whole<F>(pub F);

impl<F: Objective> Objective for Whole<F> {
    fn record<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], delta: Var<'t>) -> Var<'t> {
        self.0.record(tape, theta, delta)
    }
}

impl<F: Objective> BatchObjective for Whole<F> {
    fn batch_size(&self) -> usize {
        1
    }
}

/// Per-example `δ`-gradient rows: `B * ∇_δ f` for a batch-mean objective.
pub fn per_example_delta_grad(
    f: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
) -> Result<(f64, Tensor)> {
    let (value, g) = delta_grad(f, theta, delta)?;
    let b = f.batch_size();
    Ok((value, if b == 1 { g } else { g.scale(b as f64) }))
}

/// Pins a closure to the higher-ranked signature [`Objective`] expects.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Var<'t>,
{
    f
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub value: f64,
    pub theta: Vec<f64>,
    pub delta: Tensor,
}

fn check_like(what: &'static str, expected: &Tensor, got: &Tensor) -> Result<()> {
    if expected.shape() != got.shape() {
        return Err(ShapeError::Mismatch {
            what,
            expected: expected.shape().to_vec(),
            got: got.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

pub fn evaluate(f: &(impl Objective + ?Sized), theta: &ParamVector, delta: &Tensor) -> f64 {
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    f.record(&tape, &th, d).value().item()
}

/// Value and exact gradients with respect to both `θ` and `δ`.
pub fn value_and_grad(
    f: &(impl Objective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
) -> Result<Gradients> {
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let out = f.record(&tape, &th, d);
    let mut wrt = th.clone();
    wrt.push(d);
    let g = tape.grad(out, &wrt)?;
    Ok(Gradients {
        value: out.value().item(),
        theta: theta.flatten(&g[..th.len()]),
        delta: (*g[th.len()].value()).clone(),
    })
}

/// Value and gradient with respect to `δ` only.
pub fn delta_grad(
    f: &(impl Objective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let out = f.record(&tape, &th, d);
    let g = tape.grad(out, &[d])?;
    Ok((out.value().item(), (*g[0].value()).clone()))
}

/// Value and gradient with respect to `θ` only.
pub fn theta_grad(
    f: &(impl Objective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let out = f.record(&tape, &th, d);
    let g = tape.grad(out, &th)?;
    Ok((out.value().item(), theta.flatten(&g)))
}

/// `∇_δδ f · v`, as the `δ`-gradient of `<∇_δ f, v>`.
pub fn hvp_delta(
    f: &(impl Objective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    check_like("hvp direction", delta, v)?;
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let out = f.record(&tape, &th, d);
    let gd = tape.grad(out, &[d])?[0];
    let inner = gd.inner(tape.leaf(v.clone()));
    let h = tape.grad(inner, &[d])?[0];
    let result = (*h.value()).clone();
    Ok(result)
}

/// `∇_θδ f · v`, as the `θ`-gradient of `<∇_δ f, v>`. Flat in the layout of `theta`.
pub fn mixed_partial_apply(
    f: &(impl Objective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
    v: &Tensor,
) -> Result<Vec<f64>> {
    check_like("mixed partial direction", delta, v)?;
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let out = f.record(&tape, &th, d);
    let gd = tape.grad(out, &[d])?[0];
    let inner = gd.inner(tape.leaf(v.clone()));
    let g = tape.grad(inner, &th)?;
    Ok(theta.flatten(&g))
}

/// `∇_δθ f · w` for a flat `θ`-direction `w`, as the `δ`-gradient of `<∇_θ f, w>`.
pub fn mixed_partial_apply_theta(
    f: &(impl Objective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
    w: &[f64],
) -> Result<Tensor> {
    if w.len() != theta.len() {
        return Err(ShapeError::Mismatch {
            what: "mixed partial parameter direction",
            expected: vec![theta.len()],
            got: vec![w.len()],
        }
        .into());
    }
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let out = f.record(&tape, &th, d);
    let gth = tape.grad(out, &th)?;
    let dirs = theta.with_values(w.to_vec())?.record(&tape);
    let mut inner = gth[0].inner(dirs[0]);
    for (g, dir) in gth.iter().zip(&dirs).skip(1) {
        inner = inner + g.inner(*dir);
    }
    let h = tape.grad(inner, &[d])?[0];
    let result = (*h.value()).clone();
    Ok(result)
}
