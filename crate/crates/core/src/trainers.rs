//! Training loops: Fast-AT, PGD-2-AT, GA-regularized Fast-AT and Fast-BAT,
//! plus momentum SGD, the cyclic schedule and robust early stopping.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attacks::{
    make_linearization_point, sign_step, uniform_in_box, LinearizationScheme, Linearized,
    LowerLevel, PgdConfig,
};
use crate::autodiff::{per_example_delta_grad, theta_grad, BatchObjective, ParamVector, Tape};
use crate::cg::CgConfig;
use crate::constraints::{active_mask, build_box, default_tolerance, ConstraintBox};
use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::eval::{ga_score, robust_accuracy, standard_accuracy};
use crate::implicit_grad::{ig_vp, IgMode};
use crate::models::{AttackLoss, BatchLoss, ModelSpec};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    FastAt,
    Pgd2At,
    FastAtGa,
    FastBat,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FastAt => "fast_at",
            Method::Pgd2At => "pgd2_at",
            Method::FastAtGa => "fast_at_ga",
            Method::FastBat => "fast_bat",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast_at" => Ok(Method::FastAt),
            "pgd2_at" => Ok(Method::Pgd2At),
            "fast_at_ga" => Ok(Method::FastAtGa),
            "fast_bat" => Ok(Method::FastBat),
            _ => Err(Error::Config(format!(
                "unknown method '{s}' (expected fast_at, pgd2_at, fast_at_ga or fast_bat)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Cyclic,
    Constant,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(Schedule::Cyclic),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Config(format!(
                "unknown schedule '{s}' (expected cyclic or constant)"
            ))),
        }
    }
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Cyclic => "cyclic",
            Schedule::Constant => "constant",
        }
    }
}

/// Default lower-level strength: `ε·255²/40000` for images (`255/5000` at
/// `ε = 8/255`), `1/(1.25ε)` for the 2-D toys.
pub fn default_lambda(epsilon: f64, provenance: Provenance) -> f64 {
    match provenance {
        Provenance::MnistSubset => epsilon * 255.0 * 255.0 / 40000.0,
        Provenance::TwoMoons | Provenance::GaussianBlobs => 1.0 / (1.25 * epsilon),
    }
}

pub const DEFAULT_GA_COEFF: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    /// Fast-BAT only; `None` resolves through [`default_lambda`].
    pub lambda: Option<f64>,
    /// `α₂ = α₂_ratio·α₁·λ`.
    pub alpha2_ratio: f64,
    pub lr_peak: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fast-AT-GA only; `None` means [`DEFAULT_GA_COEFF`].
    pub ga_coeff: Option<f64>,
    pub linearization: LinearizationScheme,
    pub attack_loss: AttackLoss,
    pub ig_mode: IgMode,
    pub seed: u64,
    pub early_stop: bool,
    pub eval_pgd_steps: usize,
    pub eval_pgd_restarts: usize,
    pub eval_ga_samples: usize,
    /// Evaluate on at most this many test rows.
    pub eval_limit: Option<usize>,
}

impl TrainRunConfig {
    pub fn new(method: Method, epsilon: f64) -> Self {
        Self {
            method,
            epochs: 10,
            batch_size: 128,
            epsilon,
            lambda: None,
            alpha2_ratio: 0.1,
            lr_peak: 0.2,
            schedule: Schedule::Cyclic,
            momentum: 0.9,
            weight_decay: 5e-4,
            ga_coeff: None,
            linearization: LinearizationScheme::default(),
            attack_loss: AttackLoss::default(),
            ig_mode: IgMode::default(),
            seed: 0,
            early_stop: true,
            eval_pgd_steps: 20,
            eval_pgd_restarts: 3,
            eval_ga_samples: 1,
            eval_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(Error::NonPositive { name, value })
            }
        };
        let non_negative = |name: &'static str, value: f64| {
            if value >= 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {value}"
                )))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidEpsilon(self.epsilon));
        }
        positive("lr_peak", self.lr_peak)?;
        non_negative("alpha2_ratio", self.alpha2_ratio)?;
        non_negative("momentum", self.momentum)?;
        non_negative("weight_decay", self.weight_decay)?;
        if self.eval_pgd_steps == 0 || self.eval_pgd_restarts == 0 || self.eval_ga_samples == 0 {
            return Err(Error::Config(
                "eval_pgd_steps, eval_pgd_restarts and eval_ga_samples must be at least 1".into(),
            ));
        }
        match (self.method, self.lambda) {
            (Method::FastBat, Some(l)) => positive("lambda", l)?,
            (Method::FastBat, None) => {}
            (m, Some(_)) => {
                return Err(Error::Config(format!(
                    "lambda only applies to fast_bat, not {}",
                    m.name()
                )))
            }
            _ => {}
        }
        match (self.method, self.ga_coeff) {
            (Method::FastAtGa, Some(c)) => non_negative("ga_coeff", c)?,
            (Method::FastAtGa, None) => {}
            (m, Some(_)) => {
                return Err(Error::Config(format!(
                    "ga_coeff only applies to fast_at_ga, not {}",
                    m.name()
                )))
            }
            _ => {}
        }
        if let IgMode::HessianAware(cg) = &self.ig_mode {
            cg.validate()?;
        }
        Ok(())
    }

    pub fn resolved_lambda(&self, provenance: Provenance) -> f64 {
        self.lambda
            .unwrap_or_else(|| default_lambda(self.epsilon, provenance))
    }

    pub fn resolved_ga_coeff(&self) -> f64 {
        self.ga_coeff.unwrap_or(DEFAULT_GA_COEFF)
    }

    pub fn hessian_aware(mut self) -> Self {
        self.ig_mode = IgMode::HessianAware(CgConfig::default());
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub step_count: usize,
}

impl OptimizerState {
    pub fn new(params: usize) -> Self {
        Self {
            velocity: vec![0.0; params],
            step_count: 0,
        }
    }
}

/// Triangular schedule: 0 at `t = 0`, `lr_peak` at `t = T/2`, 0 at `t = T`.
pub fn cyclic_lr(t: usize, total: usize, lr_peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (t, total) = (t.min(total) as f64, total as f64);
    let half = total / 2.0;
    if t <= half {
        lr_peak * t / half
    } else {
        lr_peak * (total - t) / half
    }
}

pub fn learning_rate(schedule: Schedule, t: usize, total: usize, lr_peak: f64) -> f64 {
    match schedule {
        Schedule::Cyclic => cyclic_lr(t, total, lr_peak),
        Schedule::Constant => lr_peak,
    }
}

/// `v ← μ v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(theta.len(), grad.len(), "gradient length");
    assert_eq!(theta.len(), state.velocity.len(), "velocity length");
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(state.velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *t);
        *t -= lr * *v;
    }
    state.step_count += 1;
}

#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
}

/// The optimizer-facing result of one step's forward/backward work.
#[derive(Clone, Debug)]
pub struct Direction {
    /// Training loss at the perturbation used.
    pub loss: f64,
    /// Effective gradient handed to [`sgd_step`].
    pub grad: Vec<f64>,
    pub delta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct StepParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl StepParams {
    pub fn from_config(cfg: &TrainRunConfig, lr: f64) -> Self {
        Self {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub theta: ParamVector,
    pub loss: f64,
}

fn apply(
    theta: &ParamVector,
    dir: Direction,
    state: &mut OptimizerState,
    p: StepParams,
) -> StepOutcome {
    let mut next = theta.clone();
    sgd_step(
        next.values_mut(),
        &dir.grad,
        state,
        p.lr,
        p.momentum,
        p.weight_decay,
    );
    StepOutcome {
        theta: next,
        loss: dir.loss,
    }
}

/// One signed step of `1.25ε` from `δ₀`, then `∇_θ ℓ_tr` at the result.
pub fn fast_at_direction(
    train_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    delta0: &Tensor,
    bx: &ConstraintBox,
) -> Result<Direction> {
    let delta = sign_step(train_loss, theta, delta0, 1.25 * bx.epsilon, bx)?;
    let (loss, grad) = theta_grad(train_loss, theta, &delta)?;
    Ok(Direction { loss, grad, delta })
}

/// Two signed steps of `0.5ε` from `δ₀`.
pub fn pgd2_direction(
    train_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    delta0: &Tensor,
    bx: &ConstraintBox,
) -> Result<Direction> {
    let alpha = 0.5 * bx.epsilon;
    let d1 = sign_step(train_loss, theta, delta0, alpha, bx)?;
    let delta = sign_step(train_loss, theta, &d1, alpha, bx)?;
    let (loss, grad) = theta_grad(train_loss, theta, &delta)?;
    Ok(Direction { loss, grad, delta })
}

/// Per-row `1 − cos(∇_x ℓ(x), ∇_x ℓ(x + η))` as a tape node, with rows where
/// either gradient vanishes masked to 0.
fn ga_penalty_rows<'t>(
    tape: &'t Tape,
    th: &[crate::autodiff::Var<'t>],
    loss: &BatchLoss<'_>,
    eta: &Tensor,
) -> Result<crate::autodiff::Var<'t>> {
    let d0 = tape.leaf(Tensor::zeros(loss.x().shape()));
    let d1 = tape.leaf(eta.clone());
    let g0 = tape.grad(loss.per_example_ce(tape, th, d0).sum(), &[d0])?[0];
    let g1 = tape.grad(loss.per_example_ce(tape, th, d1).sum(), &[d1])?[0];
    let s0 = (g0 * g0).sum_cols();
    let s1 = (g1 * g1).sum_cols();
    let valid: Vec<f64> = s0
        .value()
        .data()
        .iter()
        .zip(s1.value().data())
        .map(|(&a, &b)| if a > 0.0 && b > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let fill = tape.leaf(Tensor::vector(valid.iter().map(|v| 1.0 - v).collect()));
    let mask = tape.leaf(Tensor::vector(valid));
    let n0 = (s0 + fill).sqrt();
    let n1 = (s1 + fill).sqrt();
    let cos = (g0 * g1).sum_cols() / (n0 * n1);
    let one = tape.leaf(Tensor::full(&[loss.batch_size()], 1.0));
    Ok((one - cos) * mask)
}

/// Mean GA penalty `1 − cos(∇_x ℓ(x), ∇_x ℓ(x + η))` over the batch.
pub fn ga_penalty(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: Batch<'_>,
    eta: &Tensor,
) -> Result<f64> {
    let loss = BatchLoss::train(spec, batch.x, batch.y)?;
    let tape = Tape::new();
    let th = theta.record(&tape);
    Ok(ga_penalty_rows(&tape, &th, &loss, eta)?
        .mean()
        .value()
        .item())
}

/// Fast-AT direction plus the θ-gradient of `coeff·mean(1 − cos)`, taken through
/// both input gradients.
pub fn fast_at_ga_direction(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: Batch<'_>,
    delta0: &Tensor,
    eta: &Tensor,
    bx: &ConstraintBox,
    coeff: f64,
) -> Result<Direction> {
    let loss = BatchLoss::train(spec, batch.x, batch.y)?;
    let mut dir = fast_at_direction(&loss, theta, delta0, bx)?;
    if coeff == 0.0 {
        return Ok(dir);
    }
    let tape = Tape::new();
    let th = theta.record(&tape);
    let penalty = ga_penalty_rows(&tape, &th, &loss, eta)?.mean().scale(coeff);
    let g = theta.flatten(&tape.grad(penalty, &th)?);
    for (a, b) in dir.grad.iter_mut().zip(g) {
        *a += b;
    }
    Ok(dir)
}

/// `g_eff = ∇_θ ℓ_tr(θ, δ*) + α₂_ratio·λ·IG(∇_δ ℓ_tr(θ, δ*))`, which in the
/// Hessian-free mode is `∇_θ ℓ_tr − α₂_ratio·∇_θδ ℓ_atk·H_C·∇_δ ℓ_tr`.
#[allow(clippy::too_many_arguments)]
pub fn fast_bat_direction(
    train_loss: &(impl BatchObjective + ?Sized),
    attack_loss: &dyn BatchObjective,
    theta: &ParamVector,
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
    alpha2_ratio: f64,
    ig_mode: &IgMode,
    lower: &dyn LowerLevel,
) -> Result<Direction> {
    let delta = lower.solve(attack_loss, theta, z, lambda, bx)?;
    let (loss, mut grad) = theta_grad(train_loss, theta, &delta)?;
    if alpha2_ratio != 0.0 {
        let mask = active_mask(&delta, bx, default_tolerance(bx.epsilon))?;
        let (_, v) = per_example_delta_grad(train_loss, theta, &delta)?;
        let ig = ig_vp(attack_loss, theta, &delta, &v, &mask, lambda, ig_mode)?;
        let c = alpha2_ratio * lambda;
        for (g, i) in grad.iter_mut().zip(ig) {
            *g += c * i;
        }
    }
    Ok(Direction { loss, grad, delta })
}

pub fn fast_at_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: Batch<'_>,
    cfg: &TrainRunConfig,
    state: &mut OptimizerState,
    params: StepParams,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let loss = BatchLoss::train(spec, batch.x, batch.y)?;
    let bx = build_box(batch.x, cfg.epsilon)?;
    let delta0 = uniform_in_box(&bx, rng);
    let dir = fast_at_direction(&loss, theta, &delta0, &bx)?;
    Ok(apply(theta, dir, state, params))
}

pub fn pgd2_at_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: Batch<'_>,
    cfg: &TrainRunConfig,
    state: &mut OptimizerState,
    params: StepParams,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let loss = BatchLoss::train(spec, batch.x, batch.y)?;
    let bx = build_box(batch.x, cfg.epsilon)?;
    let delta0 = uniform_in_box(&bx, rng);
    let dir = pgd2_direction(&loss, theta, &delta0, &bx)?;
    Ok(apply(theta, dir, state, params))
}

/// With `ga_coeff = 0` this is [`fast_at_step`] exactly; otherwise `η` is a
/// second draw from the same stream.
pub fn fast_at_ga_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: Batch<'_>,
    cfg: &TrainRunConfig,
    state: &mut OptimizerState,
    params: StepParams,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let coeff = cfg.resolved_ga_coeff();
    if coeff == 0.0 {
        return fast_at_step(spec, theta, batch, cfg, state, params, rng);
    }
    let bx = build_box(batch.x, cfg.epsilon)?;
    let delta0 = uniform_in_box(&bx, rng);
    let eta = uniform_in_box(&bx, rng);
    let dir = fast_at_ga_direction(spec, theta, batch, &delta0, &eta, &bx, coeff)?;
    Ok(apply(theta, dir, state, params))
}

#[allow(clippy::too_many_arguments)]
pub fn fast_bat_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: Batch<'_>,
    cfg: &TrainRunConfig,
    lambda: f64,
    state: &mut OptimizerState,
    params: StepParams,
    rng: &mut Rng,
    lower: &dyn LowerLevel,
) -> Result<StepOutcome> {
    let train = BatchLoss::train(spec, batch.x, batch.y)?;
    let atk = BatchLoss::attack(spec, batch.x, batch.y, cfg.attack_loss)?;
    let bx = build_box(batch.x, cfg.epsilon)?;
    let z = make_linearization_point(&cfg.linearization, &atk, theta, &bx, lambda, rng)?;
    let dir = fast_bat_direction(
        &train,
        &atk,
        theta,
        &z,
        lambda,
        &bx,
        cfg.alpha2_ratio,
        &cfg.ig_mode,
        lower,
    )?;
    Ok(apply(theta, dir, state, params))
}

/// Per-epoch record written to the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub sa_percent: f64,
    pub ra_pgd_percent: f64,
    pub ga_score: f64,
    pub epoch_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,sa,ra_pgd,ga_score,epoch_seconds";

impl MetricsRow {
    /// One CSV line; Rust float formatting is locale-independent and round-trips.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.sa_percent,
            self.ra_pgd_percent,
            self.ga_score,
            self.epoch_seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-RA checkpoint under early stopping, else the final parameters.
    pub theta: ParamVector,
    /// 1-based epoch of `theta`; 0 when no epoch ran.
    pub epoch: usize,
    pub history: Vec<MetricsRow>,
}

/// Index of the first maximum; `None` for an empty slice.
pub fn best_epoch(ra: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in ra.iter().enumerate() {
        if best.is_none_or(|b| v > ra[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_finite(step: usize, loss: f64, theta: &ParamVector) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    if !theta.values().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteParameters { step });
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs with the default closed-form lower level.
pub fn train(cfg: &TrainRunConfig, spec: &ModelSpec, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, spec, dataset, &Linearized, |_| {})
}

/// As [`train`], with an explicit Fast-BAT lower level and a callback per finished epoch.
pub fn train_with(
    cfg: &TrainRunConfig,
    spec: &ModelSpec,
    dataset: &Dataset,
    lower: &dyn LowerLevel,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Config(
            "dataset needs nonempty train and test splits".into(),
        ));
    }
    if dataset.dim() != spec.input_dim || dataset.num_classes > spec.num_classes {
        return Err(Error::Config(format!(
            "model expects {} inputs and {} classes, dataset has {} and {}",
            spec.input_dim,
            spec.num_classes,
            dataset.dim(),
            dataset.num_classes
        )));
    }
    let lambda = cfg.resolved_lambda(dataset.provenance);
    let mut theta = spec.init();
    let mut state = OptimizerState::new(theta.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamVector)> = None;

    let test_idx = &dataset.test[..cfg
        .eval_limit
        .map_or(dataset.test.len(), |l| l.min(dataset.test.len()))];
    let (x_test, y_test) = dataset.subset(test_idx);
    let per_epoch = dataset.train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let pgd = PgdConfig::for_epsilon(
        cfg.epsilon,
        cfg.eval_pgd_steps,
        cfg.eval_pgd_restarts,
        cfg.seed,
    );

    let mut t = 0usize;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = dataset.train.clone();
        order.shuffle(&mut rng::indexed(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = dataset.subset(idx);
            let batch = Batch { x: &x, y: &y };
            lr = learning_rate(cfg.schedule, t, total, cfg.lr_peak);
            let params = StepParams::from_config(cfg, lr);
            let mut r = rng::indexed(cfg.seed, "perturb", t as u64);
            let out = match cfg.method {
                Method::FastAt => {
                    fast_at_step(spec, &theta, batch, cfg, &mut state, params, &mut r)?
                }
                Method::Pgd2At => {
                    pgd2_at_step(spec, &theta, batch, cfg, &mut state, params, &mut r)?
                }
                Method::FastAtGa => {
                    fast_at_ga_step(spec, &theta, batch, cfg, &mut state, params, &mut r)?
                }
                Method::FastBat => fast_bat_step(
                    spec, &theta, batch, cfg, lambda, &mut state, params, &mut r, lower,
                )?,
            };
            check_finite(t, out.loss, &out.theta)?;
            loss_sum += out.loss * idx.len() as f64;
            theta = out.theta;
            t += 1;
        }
        let sa = standard_accuracy(spec, &theta, &x_test, &y_test)?;
        let ra = robust_accuracy(spec, &theta, &x_test, &y_test, cfg.epsilon, &pgd)?;
        let ga = ga_score(
            spec,
            &theta,
            &x_test,
            &y_test,
            cfg.epsilon,
            cfg.eval_ga_samples,
            cfg.seed,
        )?
        .mean;
        let row = MetricsRow {
            epoch,
            lr,
            train_loss: loss_sum / dataset.train.len() as f64,
            sa_percent: sa,
            ra_pgd_percent: ra,
            ga_score: ga,
            epoch_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        history.push(row);
        if best.as_ref().is_none_or(|(b, _, _)| ra > *b) {
            best = Some((ra, epoch, theta.clone()));
        }
    }
    let (theta, epoch) = match best {
        Some((_, e, th)) if cfg.early_stop => (th, e),
        _ => (theta, cfg.epochs),
    };
    Ok(TrainOutcome {
        theta,
        epoch,
        history,
    })
}
