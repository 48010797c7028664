//! Matrix-free conjugate gradients over independent row blocks.
//!
//! A batch of `rows` symmetric positive definite systems `A_i u_i = b_i`
//! shares one operator call per iteration; each row keeps its own step sizes
//! and stops once its relative residual reaches the tolerance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 500,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::NonPositive {
                name: "cg_tol",
                value: self.tol,
            });
        }
        if self.max_iters == 0 {
            return Err(Error::Config("cg_max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves every row system of `apply(u) = rhs`, where `apply` acts row-wise.
///
/// `rhs` is viewed as `rows` contiguous blocks of equal length.
pub fn solve_rows(
    mut apply: impl FnMut(&Tensor) -> Result<Tensor>,
    rhs: &Tensor,
    rows: usize,
    cfg: &CgConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    assert!(
        rows > 0 && rhs.len().is_multiple_of(rows),
        "rhs does not split into {rows} rows"
    );
    let d = rhs.len() / rows;
    let shape = rhs.shape().to_vec();
    let block = |t: &[f64], i: usize| t[i * d..(i + 1) * d].to_vec();

    let mut u = Tensor::zeros(&shape);
    let mut r = rhs.clone();
    let mut p = rhs.clone();
    let b_norm: Vec<f64> = (0..rows)
        .map(|i| dot(&block(rhs.data(), i), &block(rhs.data(), i)).sqrt())
        .collect();
    let mut rr: Vec<f64> = b_norm.iter().map(|n| n * n).collect();
    let mut done: Vec<bool> = b_norm.iter().map(|&n| n == 0.0).collect();

    for _ in 0..cfg.max_iters {
        if done.iter().all(|&x| x) {
            return Ok(u);
        }
        let ap = apply(&p)?;
        for i in 0..rows {
            if done[i] {
                continue;
            }
            let s = i * d..(i + 1) * d;
            let curvature = dot(&p.data()[s.clone()], &ap.data()[s.clone()]);
            if !(curvature > 0.0) {
                return Err(Error::IndefiniteSystem { curvature });
            }
            let alpha = rr[i] / curvature;
            for k in s.clone() {
                u.data_mut()[k] += alpha * p.data()[k];
                r.data_mut()[k] -= alpha * ap.data()[k];
            }
            let rr_new = dot(&r.data()[s.clone()], &r.data()[s.clone()]);
            if rr_new.sqrt() <= cfg.tol * b_norm[i] {
                done[i] = true;
                for k in s {
                    p.data_mut()[k] = 0.0;
                }
                continue;
            }
            let beta = rr_new / rr[i];
            rr[i] = rr_new;
            for k in s {
                p.data_mut()[k] = r.data()[k] + beta * p.data()[k];
            }
        }
    }
    if done.iter().all(|&x| x) {
        return Ok(u);
    }
    let residual = (0..rows)
        .filter(|&i| !done[i])
        .map(|i| rr[i].sqrt() / b_norm[i])
        .fold(0.0, f64::max);
    Err(Error::CgNotConverged {
        iters: cfg.max_iters,
        tol: cfg.tol,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply_dense(a: &[f64], d: usize) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
        move |x: &Tensor| {
            let mut out = vec![0.0; x.len()];
            for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                for i in 0..d {
                    o[i] = (0..d).map(|j| a[i * d + j] * row[j]).sum();
                }
            }
            Ok(Tensor::new(x.shape().to_vec(), out)?)
        }
    }

    #[test]
    fn solves_spd_rows_independently() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0];
        let rhs = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let u = solve_rows(apply_dense(&a, 3), &rhs, 2, &CgConfig::default()).unwrap();
        let back = apply_dense(&a, 3)(&u).unwrap();
        assert!(back.sub(&rhs).max_abs() < 1e-9);
        assert_eq!(&u.data()[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn indefinite_operator_is_reported() {
        let a = [1.0, 0.0, 0.0, -1.0];
        let rhs = Tensor::vector(vec![0.0, 1.0]);
        assert!(matches!(
            solve_rows(apply_dense(&a, 2), &rhs, 1, &CgConfig::default()),
            Err(Error::IndefiniteSystem { .. })
        ));
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let a = [10.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 1.0];
        let rhs = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let cfg = CgConfig {
            tol: 1e-14,
            max_iters: 1,
        };
        assert!(matches!(
            solve_rows(apply_dense(&a, 3), &rhs, 1, &cfg),
            Err(Error::CgNotConverged { iters: 1, .. })
        ));
    }
}
