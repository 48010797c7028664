//! The verification suite behind the `check` command: each check compares a
//! production path against an oracle from this module and reports its
//! measurements against fixed thresholds.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::reference;
use super::{
    fd_gradient, fd_lower_level_sensitivity, hessian_norm_probe, linear_coefficient,
    projected_gd_linear_model, proximal_solve, rel_err, sign_linearized_solve, LowerLevelKind,
    ProximalOptions, SignLinearized,
};
use crate::attacks::{lower_level_solve, LinearizationScheme, Linearized, SchemeKind};
use crate::autodiff::{
    delta_grad, hvp_delta, mixed_partial_apply, objective, theta_grad, value_and_grad, ParamVector,
    Whole,
};
use crate::cg::CgConfig;
use crate::constraints::{active_mask, build_box, default_tolerance, ConstraintBox};
use crate::data::{gen_blobs, gen_two_moons};
use crate::error::Result;
use crate::implicit_grad::{
    ig_forward_aware, ig_vp_aware, ig_vp_free, total_upper_gradient, IgMode,
};
use crate::models::{Activation, AttackLoss, BatchLoss, LossKind, ModelSpec};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::trainers::{
    fast_at_step, fast_bat_direction, fast_bat_step, Batch, Method, OptimizerState, StepParams,
    TrainRunConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
}

impl Measurement {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Bound::AtMost,
            threshold,
        }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Bound::AtLeast,
            threshold,
        }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.value <= self.threshold,
            Bound::AtLeast => self.value >= self.threshold,
        }
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        let mark = if self.passed() { "" } else { "!" };
        write!(
            f,
            "{mark}{}={:.3e} ({op} {:.0e})",
            self.name, self.value, self.threshold
        )
    }
}

/// Outcome of one check; it passes when every measurement is within its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub id: u32,
    pub name: String,
    pub measurements: Vec<Measurement>,
    pub notes: Vec<String>,
}

impl CheckOutcome {
    pub fn new(id: u32, name: &str) -> Self {
        Self {
            id,
            name: name.into(),
            measurements: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn with(mut self, m: Measurement) -> Self {
        self.measurements.push(m);
        self
    }

    pub fn passed(&self) -> bool {
        self.measurements.iter().all(Measurement::passed)
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} {}:",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name
        )?;
        for m in &self.measurements {
            write!(f, " {m}")?;
        }
        for n in &self.notes {
            write!(f, " | {n}")?;
        }
        Ok(())
    }
}

fn random_tensor(r: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect(),
    )
}

fn random_in_box(r: &mut Rng, bx: &ConstraintBox) -> Tensor {
    bx.p.zip_map(
        &bx.q,
        |lo, hi| if hi > lo { r.gen_range(lo..=hi) } else { lo },
    )
}

struct Instance {
    spec: ModelSpec,
    theta: ParamVector,
    x: Tensor,
    y: Vec<usize>,
}

fn random_instance(
    r: &mut Rng,
    activation: Activation,
    batch: usize,
    weight_scale: f64,
) -> Instance {
    let d = r.gen_range(2..=4);
    let h = r.gen_range(3..=6);
    let c = 3;
    let spec = ModelSpec::mlp(d, vec![h], c)
        .with_activation(activation)
        .with_seed(r.gen());
    let init = spec.init();
    let theta = init
        .with_values(init.values().iter().map(|v| v * weight_scale).collect())
        .expect("same length");
    let x = random_tensor(r, batch, d, 0.1, 0.9);
    let y = (0..batch).map(|_| r.gen_range(0..c)).collect();
    Instance { spec, theta, x, y }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// Gradients, `δ`-HVPs and mixed partials of softplus MLPs against central differences.
pub fn derivative_oracles(seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let (mut e_grad, mut e_hvp, mut e_mixed) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..10u64 {
        let mut r = rng::indexed(seed, "check-derivatives", i);
        let inst = random_instance(&mut r, Activation::Softplus, 3, 2.0);
        let kind = LossKind::Train;
        let f = BatchLoss::new(&inst.spec, &inst.x, &inst.y, kind)?;
        let delta = random_tensor(&mut r, 3, inst.spec.input_dim, -0.05, 0.05);
        let v = random_tensor(&mut r, 3, inst.spec.input_dim, -1.0, 1.0);

        let g = value_and_grad(&f, &inst.theta, &delta)?;
        let h = super::default_step(inst.theta.values());
        let fd_theta = fd_gradient(
            |th| reference::loss(&inst.spec, kind, th, &inst.x, delta.data(), &inst.y),
            inst.theta.values(),
            h,
        );
        let fd_delta = fd_gradient(
            |d| reference::loss(&inst.spec, kind, inst.theta.values(), &inst.x, d, &inst.y),
            delta.data(),
            super::default_step(delta.data()),
        );
        e_grad.push(rel_err(&g.theta, &fd_theta).max(rel_err(g.delta.data(), &fd_delta)));

        let h = super::default_step(delta.data());
        let plus = delta.zip_map(&v, |d, vi| d + h * vi);
        let minus = delta.zip_map(&v, |d, vi| d - h * vi);
        let hv = hvp_delta(&f, &inst.theta, &delta, &v)?;
        let (_, gp) = delta_grad(&f, &inst.theta, &plus)?;
        let (_, gm) = delta_grad(&f, &inst.theta, &minus)?;
        let fd_hv = gp.zip_map(&gm, |a, b| (a - b) / (2.0 * h));
        e_hvp.push(rel_err(hv.data(), fd_hv.data()));

        let mixed = mixed_partial_apply(&f, &inst.theta, &delta, &v)?;
        let (_, tp) = theta_grad(&f, &inst.theta, &plus)?;
        let (_, tm) = theta_grad(&f, &inst.theta, &minus)?;
        let fd_mixed: Vec<f64> = tp
            .iter()
            .zip(&tm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        e_mixed.push(rel_err(&mixed, &fd_mixed));
    }
    Ok(CheckOutcome::new(1, "derivative oracles")
        .with(Measurement::at_most("grad_rel", max_of(&e_grad), 1e-5))
        .with(Measurement::at_most("hvp_rel", max_of(&e_hvp), 1e-4))
        .with(Measurement::at_most("mixed_rel", max_of(&e_mixed), 1e-4))
        .with(Measurement::at_most(
            "seconds",
            started.elapsed().as_secs_f64(),
            60.0,
        )))
}

/// Closed-form lower levels against 500-step projected gradient descent.
pub fn lower_level_exactness(seed: u64) -> Result<CheckOutcome> {
    let (mut e_lin, mut e_sign) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let mut r = rng::indexed(seed, "check-lower-level", i);
        let act = [Activation::Relu, Activation::Softplus, Activation::Swish][i as usize % 3];
        let inst = random_instance(&mut r, act, 4, 1.0);
        let atk = BatchLoss::attack(&inst.spec, &inst.x, &inst.y, AttackLoss::NegCrossEntropy)?;
        let bx = build_box(&inst.x, r.gen_range(0.02..0.3))?;
        let z = random_in_box(&mut r, &bx);
        let lambda = r.gen_range(0.5..20.0);
        let c = linear_coefficient(&atk, &inst.theta, &z)?;

        let closed = lower_level_solve(&atk, &inst.theta, &z, lambda, &bx)?;
        let iterative = projected_gd_linear_model(&c, &z, lambda, &bx, 500);
        e_lin = e_lin.max(closed.sub(&iterative).max_abs());

        let closed = sign_linearized_solve(&atk, &inst.theta, &z, lambda, &bx)?;
        let c_sign = c.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let iterative = projected_gd_linear_model(&c_sign, &z, lambda, &bx, 500);
        e_sign = e_sign.max(closed.sub(&iterative).max_abs());
    }
    Ok(CheckOutcome::new(2, "lower-level exactness")
        .with(Measurement::at_most("linearized_inf", e_lin, 1e-8))
        .with(Measurement::at_most("sign_inf", e_sign, 1e-8)))
}

/// Hessian-aware forward IG against finite differences of the exact proximal minimizer.
pub fn implicit_gradient_correctness(seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let cg = CgConfig::default();
    let (mut worst_rel, mut worst_active, mut valid) = (0.0f64, 0.0f64, 0usize);
    let attempts = 80u64;
    for i in 0..attempts {
        let mut r = rng::indexed(seed, "check-ig", i);
        let act = if i % 2 == 0 {
            Activation::Softplus
        } else {
            Activation::Swish
        };
        let inst = random_instance(&mut r, act, 2, 3.0);
        let atk = BatchLoss::attack(&inst.spec, &inst.x, &inst.y, AttackLoss::NegCrossEntropy)?;
        let bx = build_box(&inst.x, r.gen_range(0.03..0.15))?;
        let z = random_in_box(&mut r, &bx);
        let curvature = hessian_norm_probe(&atk, &inst.theta, &z, 50, i)?;
        let lambda = 4.0 * curvature + r.gen_range(1.0..10.0);
        let w: Vec<f64> = (0..inst.theta.len())
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();

        let opts = ProximalOptions::default();
        let star = proximal_solve(&atk, &inst.theta, &z, lambda, &bx, &opts)?;
        let mask = active_mask(&star, &bx, default_tolerance(bx.epsilon))?;
        let fd = fd_lower_level_sensitivity(
            LowerLevelKind::Proximal,
            &atk,
            &inst.theta,
            &w,
            &z,
            lambda,
            &bx,
            1e-5,
        )?;
        if !fd.active_set_stable {
            continue;
        }
        valid += 1;
        let ig = ig_forward_aware(&atk, &inst.theta, &star, &w, &mask, lambda, &cg)?;
        worst_rel = worst_rel.max(rel_err(ig.data(), fd.derivative.data()));
        for (k, v) in ig.data().iter().enumerate() {
            if !mask.is_interior(k) {
                worst_active = worst_active.max(v.abs());
            }
        }
    }
    let mut out = CheckOutcome::new(3, "implicit gradient correctness")
        .with(Measurement::at_most("fd_rel", worst_rel, 1e-3))
        .with(Measurement::at_most("active_abs", worst_active, 1e-10))
        .with(Measurement::at_least("valid", valid as f64, 50.0))
        .with(Measurement::at_most(
            "seconds",
            started.elapsed().as_secs_f64(),
            300.0,
        ));
    out.notes
        .push(format!("{valid}/{attempts} instances active-set stable"));
    Ok(out)
}

fn bilinear(a: Vec<f64>, n: usize, d: usize) -> impl crate::autodiff::BatchObjective {
    Whole(objective(move |t, th, dl| {
        let am = t.leaf(Tensor::matrix(n, d, a.clone()));
        th[0]
            .broadcast_rows(1)
            .matmul(am)
            .matmul(dl.broadcast_cols(1))
            .sum()
    }))
}

/// Hessian-free against Hessian-aware IG: exact on bilinear losses, and the
/// attack-loss Hessian and IG gap of ReLU MLPs at generic points.
pub fn hessian_free_validity(seed: u64) -> Result<CheckOutcome> {
    let cg = CgConfig::default();
    let mut bilinear_err = 0.0f64;
    let (mut compared, mut i) = (0, 0u64);
    while compared < 20 {
        let mut r = rng::indexed(seed, "check-bilinear", i);
        i += 1;
        let (n, d) = (r.gen_range(2..6), r.gen_range(2..6));
        let a: Vec<f64> = (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let f = bilinear(a, n, d);
        let theta = ParamVector::pack(vec![(
            "t".into(),
            Tensor::vector((0..n).map(|_| r.gen_range(-1.0..1.0)).collect()),
        )]);
        let x = Tensor::vector((0..d).map(|_| r.gen_range(0.2..0.8)).collect());
        let bx = build_box(&x, 0.1)?;
        let z = random_in_box(&mut r, &bx);
        let star = lower_level_solve(&f, &theta, &z, r.gen_range(1.0..20.0), &bx)?;
        let mask = active_mask(&star, &bx, default_tolerance(bx.epsilon))?;
        // With every coordinate active both products vanish; compare only where a formula applies.
        if mask.active_count() == d {
            continue;
        }
        compared += 1;
        let v = Tensor::vector((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let free = ig_vp_free(&f, &theta, &star, &v, &mask, 3.0)?;
        let aware = ig_vp_aware(&f, &theta, &star, &v, &mask, 3.0, &cg)?;
        bilinear_err = bilinear_err.max(rel_err(&aware, &free));
    }

    let relu = |loss: AttackLoss| -> Result<(f64, f64)> {
        let (mut gap, mut probe) = (0.0f64, 0.0f64);
        for i in 0..10u64 {
            let mut r = rng::indexed(seed, "check-relu", i);
            let inst = random_instance(&mut r, Activation::Relu, 4, 1.0);
            let train = BatchLoss::train(&inst.spec, &inst.x, &inst.y)?;
            let atk = BatchLoss::attack(&inst.spec, &inst.x, &inst.y, loss)?;
            let eps = 0.3;
            let bx = build_box(&inst.x, eps)?;
            let lambda = 1.0 / (1.25 * eps);
            let z = random_in_box(&mut r, &bx);
            let star = lower_level_solve(&atk, &inst.theta, &z, lambda, &bx)?;
            let mask = active_mask(&star, &bx, default_tolerance(eps))?;
            let (_, v) = crate::autodiff::per_example_delta_grad(&train, &inst.theta, &star)?;
            let free = ig_vp_free(&atk, &inst.theta, &star, &v, &mask, lambda)?;
            let aware = ig_vp_aware(&atk, &inst.theta, &star, &v, &mask, lambda, &cg)?;
            gap = gap.max(rel_err(&aware, &free));
            probe = probe.max(hessian_norm_probe(&atk, &inst.theta, &star, 50, i)?);
        }
        Ok((gap, probe))
    };
    let (gap, probe) = relu(AttackLoss::NegCrossEntropy)?;
    let (gap_tl, probe_tl) = relu(AttackLoss::TrueLogit)?;
    let mut out = CheckOutcome::new(4, "hessian-free validity")
        .with(Measurement::at_most("bilinear_rel", bilinear_err, 1e-8))
        .with(Measurement::at_most("relu_ig_rel", gap, 1e-2))
        .with(Measurement::at_most("relu_hessian", probe, 1e-6));
    out.notes.push(format!(
        "true-logit attack loss: relu_ig_rel={gap_tl:.3e} relu_hessian={probe_tl:.3e}"
    ));
    Ok(out)
}

/// Fast-BAT reduced to Fast-AT: no IG term, uniform linearization point,
/// `λ = 1/(1.25ε)` and the sign-linearized lower level.
pub fn fast_at_equivalence(seed: u64) -> Result<CheckOutcome> {
    let ds = gen_two_moons(256, 0.1, seed)?;
    let spec = ModelSpec::mlp(2, vec![32], 2).with_seed(seed);
    let eps = 0.2;
    let mut bat = TrainRunConfig::new(Method::FastBat, eps);
    bat.alpha2_ratio = 0.0;
    bat.linearization = LinearizationScheme::new(SchemeKind::UniformRandom);
    bat.attack_loss = AttackLoss::NegCrossEntropy;
    bat.lambda = Some(1.0 / (1.25 * eps));
    let fast = TrainRunConfig::new(Method::FastAt, eps);
    let lambda = bat.lambda.unwrap_or_default();

    let (mut th_a, mut th_b) = (spec.init(), spec.init());
    let (mut st_a, mut st_b) = (
        OptimizerState::new(th_a.len()),
        OptimizerState::new(th_b.len()),
    );
    let mut order = ds.train.clone();
    let mut max_diff = 0.0f64;
    let steps = 100;
    for t in 0..steps {
        if t % 4 == 0 {
            order.shuffle(&mut rng::indexed(seed, "shuffle", t as u64));
        }
        let idx = &order[(t % 4) * 50..(t % 4) * 50 + 50];
        let (x, y) = ds.subset(idx);
        let batch = Batch { x: &x, y: &y };
        let p = StepParams::from_config(&fast, 0.1);
        let a = fast_at_step(
            &spec,
            &th_a,
            batch,
            &fast,
            &mut st_a,
            p,
            &mut rng::indexed(seed, "perturb", t as u64),
        )?;
        let b = fast_bat_step(
            &spec,
            &th_b,
            batch,
            &bat,
            lambda,
            &mut st_b,
            p,
            &mut rng::indexed(seed, "perturb", t as u64),
            &SignLinearized,
        )?;
        th_a = a.theta;
        th_b = b.theta;
        for (u, v) in th_a.values().iter().zip(th_b.values()) {
            if u.to_bits() != v.to_bits() {
                max_diff = max_diff.max((u - v).abs()).max(f64::MIN_POSITIVE);
            }
        }
    }
    let mut out = CheckOutcome::new(5, "fast-at equivalence").with(Measurement::at_most(
        "max_param_diff",
        max_diff,
        0.0,
    ));
    out.notes.push(format!("{steps} steps compared bitwise"));
    Ok(out)
}

/// A boundary-binding instance with `ℓ_atk = −ℓ_tr` where the implicit term is nonzero.
pub fn constrained_distinction(seed: u64) -> Result<CheckOutcome> {
    let spec = ModelSpec::mlp(4, vec![6], 3)
        .with_activation(Activation::Softplus)
        .with_seed(seed);
    let theta = spec.init();
    let x = Tensor::matrix(2, 4, vec![0.02, 0.5, 0.7, 0.98, 0.3, 0.01, 0.6, 0.5]);
    let y = vec![1, 2];
    let train = BatchLoss::train(&spec, &x, &y)?;
    let atk = BatchLoss::attack(&spec, &x, &y, AttackLoss::NegCrossEntropy)?;
    let bx = build_box(&x, 0.05)?;
    let z = Tensor::zeros(x.shape());
    let lambda = 2.0;
    let ug = total_upper_gradient(&train, &atk, &theta, &z, lambda, &bx, &IgMode::HessianFree)?;
    let (_, plain) = theta_grad(&train, &theta, &ug.delta_star)?;
    let diff: f64 = ug
        .total()
        .iter()
        .zip(&plain)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let active = ug.mask.active_count();
    let mut out = CheckOutcome::new(6, "constrained distinction")
        .with(Measurement::at_least("grad_diff_norm", diff, 1e-6))
        .with(Measurement::at_least("active_coords", active as f64, 1.0))
        .with(Measurement::at_least(
            "interior_coords",
            (ug.delta_star.len() - active) as f64,
            1.0,
        ));
    out.notes
        .push(format!("active {active}/{}", ug.delta_star.len()));
    Ok(out)
}

/// Squared norms of the Fast-BAT update direction over full-batch training of
/// a linear logistic model, `steps` steps at a constant rate.
pub fn convex_fast_bat_history(seed: u64, steps: usize) -> Result<Vec<f64>> {
    let ds = gen_blobs(200, 2, 1.5, seed)?;
    let (x, y) = ds.train_split();
    let spec = ModelSpec::linear(2, 2);
    let mut theta = spec.zeros();
    let train = BatchLoss::train(&spec, &x, &y)?;
    let bx = build_box(&x, 0.05)?;
    let cfg = TrainRunConfig::new(Method::FastBat, bx.epsilon);
    let lambda = cfg.resolved_lambda(ds.provenance);
    let mut state = OptimizerState::new(theta.len());
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let atk = BatchLoss::attack(&spec, &x, &y, cfg.attack_loss)?;
        let z = crate::attacks::make_linearization_point(
            &cfg.linearization,
            &atk,
            &theta,
            &bx,
            lambda,
            &mut rng::stream(seed, "unused"),
        )?;
        let dir = fast_bat_direction(
            &train,
            &atk,
            &theta,
            &z,
            lambda,
            &bx,
            cfg.alpha2_ratio,
            &cfg.ig_mode,
            &Linearized,
        )?;
        history.push(dir.grad.iter().map(|g| g * g).sum());
        crate::trainers::sgd_step(theta.values_mut(), &dir.grad, &mut state, 0.5, 0.0, 0.0);
    }
    Ok(history)
}

/// The `T`-averaged squared gradient norm shrinks from `T = 500` to `T = 2000`.
pub fn convergence_trend(seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let history = convex_fast_bat_history(seed, 2000)?;
    let avg = |n: usize| history[..n].iter().sum::<f64>() / n as f64;
    let ratio = avg(2000) / avg(500);
    Ok(CheckOutcome::new(7, "convergence trend")
        .with(Measurement::at_most("avg2000_over_avg500", ratio, 0.6))
        .with(Measurement::at_most(
            "seconds",
            started.elapsed().as_secs_f64(),
            120.0,
        )))
}

/// Checks 1 through 7.
pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        derivative_oracles(seed)?,
        lower_level_exactness(seed)?,
        implicit_gradient_correctness(seed)?,
        hessian_free_validity(seed)?,
        fast_at_equivalence(seed)?,
        constrained_distinction(seed)?,
        convergence_trend(seed)?,
    ])
}

/// Per-seed outcome of the desk-scale Fast-AT versus Fast-BAT comparison.
#[derive(Clone, Debug)]
pub struct TrendRun {
    pub method: Method,
    pub seed: u64,
    pub ra_history: Vec<f64>,
    /// RA of the early-stopped checkpoint.
    pub ra_best: f64,
    pub overfit_epoch: Option<usize>,
}

/// Fast-AT and Fast-BAT with default hyperparameters on an MNIST subset:
/// `limit` images, a 64-unit MLP, `ε = 0.3`, `epochs` epochs, one run per seed.
pub fn desk_scale_runs(
    images: &std::path::Path,
    labels: &std::path::Path,
    limit: usize,
    epochs: usize,
    seeds: &[u64],
) -> Result<Vec<TrendRun>> {
    let full = crate::data::load_mnist_idx(images, labels, Some(limit))?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let ds = full.clone().with_split(0.2, seed);
        let spec = ModelSpec::mlp(ds.dim(), vec![64], ds.num_classes).with_seed(seed);
        for method in [Method::FastAt, Method::FastBat] {
            let mut cfg = TrainRunConfig::new(method, 0.3);
            cfg.epochs = epochs;
            cfg.seed = seed;
            let out = crate::trainers::train(&cfg, &spec, &ds)?;
            let ra_history: Vec<f64> = out.history.iter().map(|r| r.ra_pgd_percent).collect();
            runs.push(TrendRun {
                method,
                seed,
                ra_best: ra_history
                    .get(out.epoch.wrapping_sub(1))
                    .copied()
                    .unwrap_or(0.0),
                overfit_epoch: crate::eval::detect_catastrophic_overfitting(&ra_history),
                ra_history,
            });
        }
    }
    Ok(runs)
}

/// Robust accuracy and overfitting frequency of Fast-BAT against Fast-AT.
pub fn desk_scale_trend(
    images: &std::path::Path,
    labels: &std::path::Path,
) -> Result<CheckOutcome> {
    let started = Instant::now();
    let seeds = [0, 1, 2, 3, 4];
    let runs = desk_scale_runs(images, labels, 2000, 10, &seeds)?;
    let of = |m: Method| runs.iter().filter(move |r| r.method == m);
    let mean_ra = |m: Method| of(m).map(|r| r.ra_best).sum::<f64>() / seeds.len() as f64;
    let flagged = |m: Method| of(m).filter(|r| r.overfit_epoch.is_some()).count() as f64;
    let (ra_at, ra_bat) = (mean_ra(Method::FastAt), mean_ra(Method::FastBat));
    let mut out = CheckOutcome::new(8, "desk-scale robustness trend")
        .with(Measurement::at_least(
            "ra_bat_minus_at",
            ra_bat - ra_at,
            -1.0,
        ))
        .with(Measurement::at_least(
            "overfit_fast_at",
            flagged(Method::FastAt),
            4.0,
        ))
        .with(Measurement::at_most(
            "overfit_fast_bat",
            flagged(Method::FastBat),
            1.0,
        ))
        .with(Measurement::at_most(
            "seconds",
            started.elapsed().as_secs_f64(),
            1800.0,
        ));
    out.notes
        .push(format!("mean RA fast_at={ra_at:.2} fast_bat={ra_bat:.2}"));
    for r in &runs {
        out.notes.push(format!(
            "{} seed {}: RA {:?} overfit {:?}",
            r.method.name(),
            r.seed,
            r.ra_history,
            r.overfit_epoch
        ));
    }
    Ok(out)
}
