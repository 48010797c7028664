//! Accuracy, robustness and training-trajectory diagnostics.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::attacks::{pgd_attack_detailed, PgdConfig};
use crate::autodiff::{ParamVector, Tape};
use crate::constraints::build_box;
use crate::error::{Error, Result};
use crate::models::{BatchLoss, ModelSpec};
use crate::rng;
use crate::tensor::Tensor;

/// Rows evaluated per forward pass.
const CHUNK: usize = 256;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(move |s| (s..(s + CHUNK).min(n)).collect())
}

fn nonempty(y: &[usize]) -> Result<()> {
    if y.is_empty() {
        Err(Error::Config("evaluation set is empty".into()))
    } else {
        Ok(())
    }
}

/// Percentage of clean inputs classified correctly; ties go to the lowest class.
pub fn standard_accuracy(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    nonempty(y)?;
    let mut correct = 0usize;
    for idx in chunks(y.len()) {
        let pred = spec.predict(theta, &x.gather_rows(&idx))?;
        correct += idx.iter().zip(&pred).filter(|(&i, &p)| y[i] == p).count();
    }
    Ok(100.0 * correct as f64 / y.len() as f64)
}

/// Percentage of inputs classified correctly both clean and at every PGD iterate.
pub fn robust_accuracy(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    pgd: &PgdConfig,
) -> Result<f64> {
    nonempty(y)?;
    let mut robust = 0usize;
    for (c, idx) in chunks(y.len()).enumerate() {
        let xc = x.gather_rows(&idx);
        let yc: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let clean = spec.predict(theta, &xc)?;
        let loss = BatchLoss::train(spec, &xc, &yc)?;
        let bx = build_box(&xc, epsilon)?;
        let cfg = PgdConfig {
            rng_seed: pgd.rng_seed.wrapping_add(c as u64),
            ..*pgd
        };
        let out = pgd_attack_detailed(&loss, theta, &bx, &cfg)?;
        robust += (0..yc.len())
            .filter(|&i| clean[i] == yc[i] && !out.fooled[i])
            .count();
    }
    Ok(100.0 * robust as f64 / y.len() as f64)
}

/// Per-example input gradients of the cross-entropy at `x + shift`.
fn input_gradients(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Tensor,
    y: &[usize],
    shift: &Tensor,
) -> Result<Tensor> {
    let loss = BatchLoss::train(spec, x, y)?;
    let tape = Tape::new();
    let th = theta.record(&tape);
    let d = tape.leaf(shift.clone());
    let ce = loss.per_example_ce(&tape, &th, d).sum();
    let g = tape.grad(ce, &[d])?[0];
    let out = (*g.value()).clone();
    Ok(out)
}

/// Row-wise cosine similarity; rows where either norm is zero give 0.
pub fn row_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| {
            let (u, v) = (a.row(i), b.row(i));
            let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
            let nu: f64 = u.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|q| q * q).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                (dot / (nu * nv)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaEstimate {
    pub mean: f64,
    /// Standard error of the mean over all (example, sample) cosines.
    pub std_error: f64,
}

/// Monte-Carlo gradient alignment `E[cos(∇_x ℓ(x), ∇_x ℓ(x + η))]`, `η ~ U[-ε, ε]^d`.
///
/// `η` ignores the pixel range.
pub fn ga_score(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GaEstimate> {
    nonempty(y)?;
    if samples == 0 {
        return Err(Error::Config("ga samples must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "ga-score");
    let mut cosines = Vec::with_capacity(y.len() * samples);
    for idx in chunks(y.len()) {
        let xc = x.gather_rows(&idx);
        let yc: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let g0 = input_gradients(spec, theta, &xc, &yc, &Tensor::zeros(xc.shape()))?;
        for _ in 0..samples {
            let eta = xc.map(|_| {
                if epsilon > 0.0 {
                    r.gen_range(-epsilon..=epsilon)
                } else {
                    0.0
                }
            });
            let g1 = input_gradients(spec, theta, &xc, &yc, &eta)?;
            cosines.extend(row_cosines(&g0, &g1));
        }
    }
    let n = cosines.len() as f64;
    let mean = cosines.iter().sum::<f64>() / n;
    let var = if cosines.len() > 1 {
        cosines.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(GaEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `z[i][j]` is the loss at `I + xs[i] r1 + ys[j] r2`.
    pub z: Vec<Vec<f64>>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub r2_seed: u64,
}

fn linspace(extent: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let c = (n / 2) as f64;
    (0..n).map(|i| extent * (i as f64 - c) / c).collect()
}

/// Loss surface over `I + x r1 + y r2`, `r1 = sign(∇_I ℓ)`, `r2` Rademacher.
pub fn loss_landscape(
    spec: &ModelSpec,
    theta: &ParamVector,
    image: &[f64],
    label: usize,
    extent: f64,
    grid_n: usize,
    r2_seed: u64,
) -> Result<LandscapeGrid> {
    if grid_n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "grid size must be odd, got {grid_n}"
        )));
    }
    let d = image.len();
    let x = Tensor::matrix(1, d, image.to_vec());
    let y = [label];
    let g = input_gradients(spec, theta, &x, &y, &Tensor::zeros(&[1, d]))?;
    let r1: Vec<f64> = g
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut r = rng::stream(r2_seed, "landscape-r2");
    let r2: Vec<f64> = (0..d)
        .map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let xs = linspace(extent, grid_n);
    let ys = xs.clone();

    // One batched forward pass per value of x.
    let mut z = Vec::with_capacity(grid_n);
    for &a in &xs {
        let mut rows = Vec::with_capacity(grid_n * d);
        for &b in &ys {
            rows.extend((0..d).map(|k| image[k] + a * r1[k] + b * r2[k]));
        }
        let batch = Tensor::matrix(grid_n, d, rows);
        let labels = vec![label; grid_n];
        let loss = BatchLoss::train(spec, &batch, &labels)?;
        let tape = Tape::new();
        let th = theta.record(&tape);
        let ce = loss.per_example_ce(&tape, &th, tape.leaf(Tensor::zeros(&[grid_n, d])));
        z.push(ce.value().data().to_vec());
    }
    Ok(LandscapeGrid {
        xs,
        ys,
        z,
        r1,
        r2,
        r2_seed,
    })
}

impl LandscapeGrid {
    /// CSV: a header of `xs` after an empty corner cell, then one row per `y`
    /// starting with the `y` value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for x in &self.xs {
            write!(out, ",{x}").expect("write to string");
        }
        out.push('\n');
        for (j, y) in self.ys.iter().enumerate() {
            write!(out, "{y}").expect("write to string");
            for zi in &self.z {
                write!(out, ",{}", zi[j]).expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// First epoch (1-based) whose RA falls below half the maximum seen so far.
pub fn detect_catastrophic_overfitting(ra_history: &[f64]) -> Option<usize> {
    let mut best = f64::NEG_INFINITY;
    for (t, &ra) in ra_history.iter().enumerate() {
        if t > 0 && ra < 0.5 * best {
            return Some(t + 1);
        }
        best = best.max(ra);
    }
    None
}
