//! Perturbation generators: one-step sign attacks, the closed-form
//! linearized lower-level solution, multi-restart PGD and linearization points.

use std::str::FromStr;

use rand::Rng as _;

use crate::autodiff::{delta_grad, per_example_delta_grad, BatchObjective, ParamVector, Tape};
use crate::constraints::{project, ConstraintBox};
use crate::error::{Error, Result};
use crate::models::BatchLoss;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `δ ~ U[p, q]` per coordinate.
pub fn uniform_in_box(bx: &ConstraintBox, rng: &mut Rng) -> Tensor {
    let data =
        bx.p.data()
            .iter()
            .zip(bx.q.data())
            .map(|(&lo, &hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect();
    Tensor::new(bx.p.shape().to_vec(), data).expect("box shape")
}

/// `δ = P(δ₀ + α sign(∇_δ ℓ_tr(θ, x + δ₀)))`: one signed ascent step on the training loss.
pub fn sign_step(
    train_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    delta0: &Tensor,
    alpha: f64,
    bx: &ConstraintBox,
) -> Result<Tensor> {
    let (_, g) = delta_grad(train_loss, theta, delta0)?;
    let stepped = delta0.zip_map(&g, |d, gi| d + alpha * sign(gi));
    project(&stepped, bx)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive {
            name: "lambda",
            value: lambda,
        })
    }
}

/// `δ* = P(z - ∇_δ ℓ_atk(θ, x + z) / λ)`, with per-example gradients.
///
/// This is the exact minimizer over the box of
/// `<∇_δ ℓ_atk(z), δ - z> + λ/2 ‖δ - z‖²`.
pub fn lower_level_solve(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let (_, g) = per_example_delta_grad(attack_loss, theta, z)?;
    let inv = 1.0 / lambda;
    project(&z.zip_map(&g, |zi, gi| zi - inv * gi), bx)
}

/// A lower-level solver, so alternative closed forms can stand in for
/// [`lower_level_solve`] inside the trainers.
pub trait LowerLevel {
    fn solve(
        &self,
        attack_loss: &dyn BatchObjective,
        theta: &ParamVector,
        z: &Tensor,
        lambda: f64,
        bx: &ConstraintBox,
    ) -> Result<Tensor>;
}

/// The first-order linearized lower level, solved in closed form.
#[derive(Clone, Copy, Debug, Default)]
pub struct Linearized;

impl LowerLevel for Linearized {
    fn solve(
        &self,
        attack_loss: &dyn BatchObjective,
        theta: &ParamVector,
        z: &Tensor,
        lambda: f64,
        bx: &ConstraintBox,
    ) -> Result<Tensor> {
        lower_level_solve(attack_loss, theta, z, lambda, bx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    pub steps: usize,
    pub restarts: usize,
    pub step_size: f64,
    pub rng_seed: u64,
}

impl PgdConfig {
    /// `steps` steps of size `ε/4` with `restarts` random starts.
    pub fn for_epsilon(epsilon: f64, steps: usize, restarts: usize, rng_seed: u64) -> Self {
        Self {
            steps,
            restarts,
            step_size: epsilon / 4.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config(format!(
                "PGD needs at least one step and one restart, got steps={} restarts={}",
                self.steps, self.restarts
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::NonPositive {
                name: "pgd step_size",
                value: self.step_size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    /// Highest-loss perturbation found for each example.
    pub delta: Tensor,
    /// Per-example cross-entropy at `delta`.
    pub loss: Vec<f64>,
    /// Whether any visited iterate was misclassified, per example.
    pub fooled: Vec<bool>,
}

struct Probe {
    loss: Vec<f64>,
    predicted: Vec<usize>,
    grad: Tensor,
}

fn probe(loss: &BatchLoss<'_>, theta: &ParamVector, delta: &Tensor) -> Result<Probe> {
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(delta.clone());
    let input = tape.leaf(loss.x().clone()) + d;
    let logits = loss.spec().logits(&th, input);
    let ce = logits.softmax_cross_entropy(loss.y());
    let g = tape.grad(ce.sum(), &[d])?[0];
    let grad = (*g.value()).clone();
    let loss_values = ce.value().data().to_vec();
    let predicted = logits.value().argmax_rows();
    Ok(Probe {
        loss: loss_values,
        predicted,
        grad,
    })
}

/// Multi-restart sign PGD maximizing per-example cross-entropy.
///
/// Restart `r` draws its start from its own stream, so a run with more
/// restarts visits a superset of the iterates of a run with fewer.
pub fn pgd_attack_detailed(
    loss: &BatchLoss<'_>,
    theta: &ParamVector,
    bx: &ConstraintBox,
    cfg: &PgdConfig,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let b = loss.batch_size();
    let cols = loss.x().cols();
    let mut best = Tensor::zeros(loss.x().shape());
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    let mut fooled = vec![false; b];
    for r in 0..cfg.restarts {
        let mut r_rng = rng::indexed(cfg.rng_seed, "pgd", r as u64);
        let mut delta = uniform_in_box(bx, &mut r_rng);
        for step in 0..=cfg.steps {
            let p = probe(loss, theta, &delta)?;
            for i in 0..b {
                if p.predicted[i] != loss.y()[i] {
                    fooled[i] = true;
                }
                if p.loss[i] > best_loss[i] {
                    best_loss[i] = p.loss[i];
                    best.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(delta.row(i));
                }
            }
            if step == cfg.steps {
                break;
            }
            let stepped = delta.zip_map(&p.grad, |d, g| d + cfg.step_size * sign(g));
            delta = project(&stepped, bx)?;
        }
    }
    Ok(PgdOutcome {
        delta: best,
        loss: best_loss,
        fooled,
    })
}

/// Worst-case perturbation per example; see [`pgd_attack_detailed`].
pub fn pgd_attack(
    loss: &BatchLoss<'_>,
    theta: &ParamVector,
    bx: &ConstraintBox,
    cfg: &PgdConfig,
) -> Result<Tensor> {
    Ok(pgd_attack_detailed(loss, theta, bx, cfg)?.delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SchemeKind {
    UniformRandom,
    RandomCorner,
    OneStepSignPgd,
    #[default]
    OneStepPgdNoSign,
}

impl FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random" => Ok(SchemeKind::UniformRandom),
            "random_corner" => Ok(SchemeKind::RandomCorner),
            "one_step_sign_pgd" => Ok(SchemeKind::OneStepSignPgd),
            "one_step_pgd_no_sign" => Ok(SchemeKind::OneStepPgdNoSign),
            _ => Err(Error::Config(format!(
                "unknown linearization scheme {s:?} (expected uniform_random, random_corner, \
                 one_step_sign_pgd or one_step_pgd_no_sign)"
            ))),
        }
    }
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::UniformRandom => "uniform_random",
            SchemeKind::RandomCorner => "random_corner",
            SchemeKind::OneStepSignPgd => "one_step_sign_pgd",
            SchemeKind::OneStepPgdNoSign => "one_step_pgd_no_sign",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LinearizationScheme {
    pub kind: SchemeKind,
    /// Warm-up step. `None` means `1.25ε` for the sign kind and `1/λ` without sign.
    pub step: Option<f64>,
}

impl LinearizationScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self { kind, step: None }
    }

    pub fn resolved_step(&self, epsilon: f64, lambda: f64) -> f64 {
        self.step.unwrap_or(match self.kind {
            SchemeKind::OneStepSignPgd => 1.25 * epsilon,
            _ => 1.0 / lambda,
        })
    }
}

/// Linearization point `z` for the lower-level problem.
///
/// The warm-up kinds take one descent step on `ℓ_atk` from `δ = 0`; with
/// `ℓ_atk = -ℓ_tr` the sign kind coincides with [`sign_step`] from zero.
pub fn make_linearization_point(
    scheme: &LinearizationScheme,
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    bx: &ConstraintBox,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let step = scheme.resolved_step(bx.epsilon, lambda);
    match scheme.kind {
        SchemeKind::UniformRandom => Ok(uniform_in_box(bx, rng)),
        SchemeKind::RandomCorner => {
            let data =
                bx.p.data()
                    .iter()
                    .zip(bx.q.data())
                    .map(|(&lo, &hi)| if rng.gen_bool(0.5) { hi } else { lo })
                    .collect();
            Ok(Tensor::new(bx.p.shape().to_vec(), data)?)
        }
        SchemeKind::OneStepSignPgd => {
            let zero = Tensor::zeros(bx.p.shape());
            let (_, g) = delta_grad(attack_loss, theta, &zero)?;
            project(&g.map(|gi| -step * sign(gi)), bx)
        }
        SchemeKind::OneStepPgdNoSign => {
            let zero = Tensor::zeros(bx.p.shape());
            let (_, g) = per_example_delta_grad(attack_loss, theta, &zero)?;
            project(&g.map(|gi| -step * gi), bx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{objective, Whole};
    use crate::constraints::build_box;
    use crate::models::{AttackLoss, ModelSpec};

    fn linear_case() -> (ModelSpec, ParamVector, Tensor, Vec<usize>) {
        // Two-class linear model; class-1 logit minus class-0 logit is w·x.
        let spec = ModelSpec::linear(3, 2);
        let w = [0.7, -1.2, 0.4];
        let mut weight = Vec::new();
        for wi in w {
            weight.extend([0.0, wi]);
        }
        let theta = ParamVector::pack(vec![
            ("layer0.weight".into(), Tensor::matrix(3, 2, weight)),
            ("layer0.bias".into(), Tensor::vector(vec![0.0, 0.0])),
        ]);
        let x = Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]);
        (spec, theta, x, vec![0])
    }

    #[test]
    fn sign_step_saturates_on_linear_model() {
        let (spec, theta, x, y) = linear_case();
        let loss = BatchLoss::train(&spec, &x, &y).unwrap();
        let bx = build_box(&x, 0.1).unwrap();
        let d = sign_step(&loss, &theta, &Tensor::zeros(&[1, 3]), 0.2, &bx).unwrap();
        // Label 0: loss increases with w·(x+δ), so δ = ε sign(w).
        assert_eq!(d.data(), &[0.1, -0.1, 0.1]);
    }

    #[test]
    fn sign_step_with_zero_gradient_projects() {
        let f = Whole(objective(|_, th, _| th[0].sum()));
        let theta = ParamVector::pack(vec![("t".into(), Tensor::vector(vec![1.0]))]);
        let x = Tensor::vector(vec![0.5, 0.5]);
        let bx = build_box(&x, 0.1).unwrap();
        let d0 = Tensor::vector(vec![0.05, -0.1]);
        assert_eq!(sign_step(&f, &theta, &d0, 1.0, &bx).unwrap(), d0);
    }

    #[test]
    fn lower_level_constant_gradient_case() {
        let f = Whole(objective(|t, _, d| {
            d.inner(t.leaf(Tensor::vector(vec![2.0, -0.5, 0.0])))
        }));
        let theta = ParamVector::pack(vec![("t".into(), Tensor::vector(vec![0.0]))]);
        let bx = build_box(&Tensor::vector(vec![0.5; 3]), 0.3).unwrap();
        let z = Tensor::zeros(&[3]);
        let d = lower_level_solve(&f, &theta, &z, 4.0, &bx).unwrap();
        assert_eq!(d.data(), &[-0.3, 0.125, 0.0]);
        let far =
            lower_level_solve(&f, &theta, &Tensor::vector(vec![0.1, 0.2, 0.5]), 1e12, &bx).unwrap();
        let pz = project(&Tensor::vector(vec![0.1, 0.2, 0.5]), &bx).unwrap();
        assert!(far.sub(&pz).max_abs() <= 1e-10);
        assert!(lower_level_solve(&f, &theta, &z, 0.0, &bx).is_err());
    }

    #[test]
    fn pgd_finds_linear_worst_case() {
        let (spec, theta, x, y) = linear_case();
        let loss = BatchLoss::train(&spec, &x, &y).unwrap();
        let eps = 0.2;
        let bx = build_box(&x, eps).unwrap();
        let cfg = PgdConfig::for_epsilon(eps, 20, 1, 3);
        let d = pgd_attack(&loss, &theta, &bx, &cfg).unwrap();
        assert_eq!(d.data(), &[0.2, -0.2, 0.2]);
    }

    #[test]
    fn pgd_zero_gradient_keeps_best_start() {
        let spec = ModelSpec::linear(2, 2);
        let theta = spec.zeros();
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        let y = [1];
        let loss = BatchLoss::train(&spec, &x, &y).unwrap();
        let bx = build_box(&x, 0.1).unwrap();
        let cfg = PgdConfig::for_epsilon(0.1, 5, 2, 9);
        let d = pgd_attack(&loss, &theta, &bx, &cfg).unwrap();
        let start = uniform_in_box(&bx, &mut rng::indexed(9, "pgd", 0));
        assert_eq!(d, start);
    }

    #[test]
    fn more_restarts_never_lower_loss() {
        let spec = ModelSpec::mlp(4, vec![6], 3).with_seed(2);
        let theta = spec.init();
        let x = Tensor::matrix(2, 4, vec![0.2, 0.4, 0.6, 0.8, 0.9, 0.1, 0.3, 0.5]);
        let y = [2, 0];
        let loss = BatchLoss::train(&spec, &x, &y).unwrap();
        let bx = build_box(&x, 0.2).unwrap();
        let mut prev = vec![f64::NEG_INFINITY; 2];
        for r in 1..=3 {
            let out =
                pgd_attack_detailed(&loss, &theta, &bx, &PgdConfig::for_epsilon(0.2, 4, r, 5))
                    .unwrap();
            for i in 0..2 {
                assert!(out.loss[i] >= prev[i]);
            }
            assert!(bx.contains(&out.delta));
            prev = out.loss;
        }
    }

    #[test]
    fn linearization_points_lie_in_box() {
        let spec = ModelSpec::mlp(4, vec![5], 3).with_seed(4);
        let theta = spec.init();
        let x = Tensor::matrix(2, 4, vec![0.0, 0.4, 1.0, 0.8, 0.9, 0.1, 0.3, 0.5]);
        let y = [1, 2];
        let atk = BatchLoss::attack(&spec, &x, &y, AttackLoss::default()).unwrap();
        let bx = build_box(&x, 0.3).unwrap();
        let mut r = rng::stream(1, "lin");
        for kind in [
            SchemeKind::UniformRandom,
            SchemeKind::RandomCorner,
            SchemeKind::OneStepSignPgd,
            SchemeKind::OneStepPgdNoSign,
        ] {
            let z = make_linearization_point(
                &LinearizationScheme::new(kind),
                &atk,
                &theta,
                &bx,
                4.0,
                &mut r,
            )
            .unwrap();
            assert!(bx.contains(&z), "{kind:?}");
            if kind == SchemeKind::RandomCorner {
                for i in 0..z.len() {
                    let v = z.data()[i];
                    assert!(v == bx.p.data()[i] || v == bx.q.data()[i]);
                }
            }
        }
    }

    #[test]
    fn degenerate_box_gives_zero_points() {
        let bx = build_box(&Tensor::vector(vec![0.3, 0.7]), 0.0).unwrap();
        let z = uniform_in_box(&bx, &mut rng::stream(0, "x"));
        assert_eq!(z.data(), &[0.0, 0.0]);
        let f = Whole(objective(|_, th, _| th[0].sum()));
        let theta = ParamVector::pack(vec![("t".into(), Tensor::vector(vec![1.0]))]);
        let bx = build_box(&Tensor::vector(vec![0.3, 0.7]), 0.2).unwrap();
        let z = make_linearization_point(
            &LinearizationScheme::default(),
            &f,
            &theta,
            &bx,
            2.0,
            &mut rng::stream(0, "x"),
        )
        .unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }
}
