//! Brute-force and finite-difference oracles.
//!
//! Nothing here calls [`crate::implicit_grad`]; model losses used for finite
//! differences come from [`reference`], a plain-loop forward pass that shares
//! no code with the tape.

pub mod reference;
pub mod suite;

use rand::Rng as _;

use crate::attacks::{lower_level_solve, LowerLevel};
use crate::autodiff::{hvp_delta, per_example_delta_grad, BatchObjective, ParamVector};
use crate::constraints::{active_mask, default_tolerance, project, ConstraintBox};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Default central-difference step `1e-5 * max(1, ‖at‖∞)`.
pub fn default_step(at: &[f64]) -> f64 {
    1e-5 * at.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Central differences of `f` at `at`, one coordinate at a time.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            x[i] = at[i] + h;
            let up = f(&x);
            x[i] = at[i] - h;
            let down = f(&x);
            x[i] = at[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖₂ / max(‖b‖₂, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `P(z - sign(∇_δ ℓ_atk(θ, x + z)) / λ)`: the sign-linearized lower level in closed form.
pub fn sign_linearized_solve(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositive {
            name: "lambda",
            value: lambda,
        });
    }
    let (_, g) = per_example_delta_grad(attack_loss, theta, z)?;
    let inv = 1.0 / lambda;
    project(&z.zip_map(&g, |zi, gi| zi - inv * sign(gi)), bx)
}

/// Lower level with the attack gradient replaced by its sign.
#[derive(Clone, Copy, Debug, Default)]
pub struct SignLinearized;

impl LowerLevel for SignLinearized {
    fn solve(
        &self,
        attack_loss: &dyn BatchObjective,
        theta: &ParamVector,
        z: &Tensor,
        lambda: f64,
        bx: &ConstraintBox,
    ) -> Result<Tensor> {
        sign_linearized_solve(attack_loss, theta, z, lambda, bx)
    }
}

/// Projected gradient descent on `<c, δ - z> + λ/2 ‖δ - z‖²` from `δ = z`,
/// with step `1/(2λ)`.
pub fn projected_gd_linear_model(
    c: &Tensor,
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
    iters: usize,
) -> Tensor {
    let step = 0.5 / lambda;
    let mut delta = z.clone();
    for _ in 0..iters {
        let mut next = delta.clone();
        for (k, d) in next.data_mut().iter_mut().enumerate() {
            let grad = c.data()[k] + lambda * (delta.data()[k] - z.data()[k]);
            let v = *d - step * grad;
            *d = v.max(bx.p.data()[k]).min(bx.q.data()[k]);
        }
        delta = next;
    }
    delta
}

/// Per-example `∇_δ ℓ_atk` at `z`, the linear coefficient of the linearized lower level.
pub fn linear_coefficient(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    z: &Tensor,
) -> Result<Tensor> {
    Ok(per_example_delta_grad(attack_loss, theta, z)?.1)
}

/// Spectral-norm estimate of the per-example `∇_δδ ℓ_atk` by power iteration.
///
/// Rows of a batch-mean objective are independent, so the per-example
/// Hessian is block diagonal and the estimate is the largest block norm.
pub fn hessian_norm_probe(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    delta: &Tensor,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    assert!(probes >= 1, "at least one probe");
    let mut r = rng::stream(seed, "hessian-probe");
    let mut v = delta.map(|_| r.gen_range(-1.0..1.0));
    let scale = attack_loss.batch_size() as f64;
    let mut estimate = 0.0;
    for _ in 0..probes {
        let n = v.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / n);
        let hv = hvp_delta(attack_loss, theta, delta, &v)?.scale(scale);
        estimate = hv.norm();
        v = hv;
    }
    Ok(estimate)
}

/// Options for the iterative proximal solver.
#[derive(Clone, Copy, Debug)]
pub struct ProximalOptions {
    pub max_iters: usize,
    /// Stop when an iteration moves no coordinate by more than this.
    pub tol: f64,
}

impl Default for ProximalOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-15,
        }
    }
}

/// Per-example `argmin_{δ ∈ C} ℓ_atk(θ, δ) + λ/2 ‖δ - z‖²` by projected gradient descent.
///
/// The step is `1 / (λ + L)` with `L` a generous bound on the attack Hessian
/// norm from [`hessian_norm_probe`].
pub fn proximal_solve(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
    opts: &ProximalOptions,
) -> Result<Tensor> {
    let curvature = hessian_norm_probe(attack_loss, theta, z, 50, 0)?;
    let step = 1.0 / (lambda + 2.0 * curvature + 1e-12);
    let mut delta = project(z, bx)?;
    for _ in 0..opts.max_iters {
        let (_, g) = per_example_delta_grad(attack_loss, theta, &delta)?;
        let mut moved = 0.0f64;
        let mut next = delta.clone();
        for (k, d) in next.data_mut().iter_mut().enumerate() {
            let grad = g.data()[k] + lambda * (delta.data()[k] - z.data()[k]);
            let v = (*d - step * grad).max(bx.p.data()[k]).min(bx.q.data()[k]);
            moved = moved.max((v - *d).abs());
            *d = v;
        }
        delta = next;
        if moved <= opts.tol {
            break;
        }
    }
    Ok(delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowerLevelKind {
    /// The closed-form linearized solution at `z`.
    Linearized,
    /// The exact proximal minimizer, solved iteratively.
    Proximal,
}

#[derive(Clone, Debug)]
pub struct Sensitivity {
    /// `(δ*(θ + hw) - δ*(θ - hw)) / 2h`.
    pub derivative: Tensor,
    /// Whether the active set at `θ ± hw` matched the one at `θ`.
    pub active_set_stable: bool,
}

/// Central-difference directional derivative of the lower-level solution in `θ`.
#[allow(clippy::too_many_arguments)]
pub fn fd_lower_level_sensitivity(
    kind: LowerLevelKind,
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    w: &[f64],
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
    h: f64,
) -> Result<Sensitivity> {
    let solve = |th: &ParamVector| -> Result<Tensor> {
        match kind {
            LowerLevelKind::Linearized => lower_level_solve(attack_loss, th, z, lambda, bx),
            LowerLevelKind::Proximal => {
                proximal_solve(attack_loss, th, z, lambda, bx, &ProximalOptions::default())
            }
        }
    };
    let shifted = |s: f64| -> Result<ParamVector> {
        theta.with_values(
            theta
                .values()
                .iter()
                .zip(w)
                .map(|(t, wi)| t + s * wi)
                .collect(),
        )
    };
    let tau = default_tolerance(bx.epsilon);
    let center = active_mask(&solve(theta)?, bx, tau)?;
    let up = solve(&shifted(h)?)?;
    let down = solve(&shifted(-h)?)?;
    let stable = active_mask(&up, bx, tau)? == center && active_mask(&down, bx, tau)? == center;
    Ok(Sensitivity {
        derivative: up.zip_map(&down, |a, b| (a - b) / (2.0 * h)),
        active_set_stable: stable,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceSummary {
    /// Running minimum of the history.
    pub running_min: Vec<f64>,
    /// `(1/T) Σ_{t<T} g_t` over the full history.
    pub average_full: f64,
    /// The same average over the first `T/2` entries.
    pub average_half: f64,
    /// `average_full / average_half`.
    pub ratio: f64,
}

/// Summarizes a history of squared gradient norms.
pub fn convergence_monitor(history: &[f64]) -> ConvergenceSummary {
    assert!(!history.is_empty(), "convergence history is empty");
    let mut running_min = Vec::with_capacity(history.len());
    let mut m = f64::INFINITY;
    for &g in history {
        m = m.min(g);
        running_min.push(m);
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let half = (history.len() / 2).max(1);
    let average_full = avg(history);
    let average_half = avg(&history[..half]);
    ConvergenceSummary {
        running_min,
        average_full,
        average_half,
        ratio: average_full / average_half,
    }
}
