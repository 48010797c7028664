//! Implicit gradients of the lower-level solution with respect to `θ`.
//!
//! Reverse-mode products (`ig_vp_*`) map a `δ`-shaped vector `v` to the
//! `θ`-shaped `(dδ*/dθ)ᵀ v`; forward-mode products (`ig_forward_*`) map a
//! `θ`-direction `w` to the `δ`-shaped `(dδ*/dθ) w`.
//!
//! All operators take the batch-mean attack objective and per-example rows
//! `v`, so the reverse products come out as batch means of per-example terms.
//!
//! The Hessian-aware operators solve the KKT system of the proximal problem
//! `min_{δ ∈ C} ℓ_atk(θ, δ) + λ/2 ‖δ - z‖²` at its active set: with
//! `G = ∇_δδ ℓ_atk + λI` and `B₀` the active constraint rows,
//!
//! ```text
//! K(r) = u - W S⁻¹ B₀ u,   u = G⁻¹ r,   W = G⁻¹ B₀ᵀ,   S = B₀ W
//! ```
//!
//! `G⁻¹` is applied by batched CG over Hessian-vector products and the small
//! `S` blocks are solved densely. Since `B₀` rows are `±e_i` and `K` is
//! invariant to their signs, only the active indices matter.

use nalgebra::{DMatrix, DVector};

use crate::attacks::lower_level_solve;
use crate::autodiff::{
    hvp_delta, mixed_partial_apply, mixed_partial_apply_theta, per_example_delta_grad, theta_grad,
    BatchObjective, ParamVector,
};
use crate::cg::{solve_rows, CgConfig};
use crate::constraints::{active_mask, default_tolerance, hc_apply, ActiveMask, ConstraintBox};
use crate::error::{Error, Result, ShapeError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum IgMode {
    #[default]
    HessianFree,
    HessianAware(CgConfig),
}

impl IgMode {
    pub fn name(&self) -> &'static str {
        match self {
            IgMode::HessianFree => "hessian_free",
            IgMode::HessianAware(_) => "hessian_aware",
        }
    }
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

fn check_same(what: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ShapeError::Mismatch {
            what,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `-(1/λ) ∇_θδ ℓ_atk · H_C v`.
pub fn ig_vp_free(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    v: &Tensor,
    mask: &ActiveMask,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_same("IG vector", at, v)?;
    let hv = hc_apply(v, mask)?;
    let m = mixed_partial_apply(attack_loss, theta, at, &hv)?;
    let c = -1.0 / lambda;
    Ok(m.into_iter().map(|x| c * x).collect())
}

/// `-∇_θδ ℓ_atk · K(v)`, the Hessian-aware reverse product.
pub fn ig_vp_aware(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    v: &Tensor,
    mask: &ActiveMask,
    lambda: f64,
    cg: &CgConfig,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_same("IG vector", at, v)?;
    let k = kkt_project(attack_loss, theta, at, v, mask, lambda, cg)?;
    let m = mixed_partial_apply(attack_loss, theta, at, &k)?;
    Ok(m.into_iter().map(|x| -x).collect())
}

pub fn ig_vp(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    v: &Tensor,
    mask: &ActiveMask,
    lambda: f64,
    mode: &IgMode,
) -> Result<Vec<f64>> {
    match mode {
        IgMode::HessianFree => ig_vp_free(attack_loss, theta, at, v, mask, lambda),
        IgMode::HessianAware(cg) => ig_vp_aware(attack_loss, theta, at, v, mask, lambda, cg),
    }
}

/// Per-example rows of `∇_δθ ℓ_atk · w`.
fn mixed_rows(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    w: &[f64],
) -> Result<Tensor> {
    let r = mixed_partial_apply_theta(attack_loss, theta, at, w)?;
    Ok(r.scale(attack_loss.batch_size() as f64))
}

/// `(dδ*/dθ) w = -(1/λ) H_C ∇_δθ ℓ_atk · w`.
pub fn ig_forward_free(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    w: &[f64],
    mask: &ActiveMask,
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let r = mixed_rows(attack_loss, theta, at, w)?;
    Ok(hc_apply(&r, mask)?.scale(-1.0 / lambda))
}

/// `(dδ*/dθ) w = -K(∇_δθ ℓ_atk · w)`, the Hessian-aware forward product.
pub fn ig_forward_aware(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    w: &[f64],
    mask: &ActiveMask,
    lambda: f64,
    cg: &CgConfig,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let r = mixed_rows(attack_loss, theta, at, w)?;
    Ok(kkt_project(attack_loss, theta, at, &r, mask, lambda, cg)?.scale(-1.0))
}

/// `K(r)` for per-example rows `r`; see the module docs.
pub fn kkt_project(
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    at: &Tensor,
    r: &Tensor,
    mask: &ActiveMask,
    lambda: f64,
    cg: &CgConfig,
) -> Result<Tensor> {
    check_same("KKT right-hand side", at, r)?;
    check_same("active mask", at, &mask.interior)?;
    let rows = attack_loss.batch_size();
    let d = at.len() / rows;
    let scale = rows as f64;
    let g_apply = |p: &Tensor| -> Result<Tensor> {
        let h = hvp_delta(attack_loss, theta, at, p)?;
        Ok(h.zip_map(p, |hv, pv| scale * hv + lambda * pv))
    };

    let mut u = solve_rows(g_apply, r, rows, cg)?;

    let active: Vec<Vec<usize>> = (0..rows)
        .map(|i| (0..d).filter(|&j| !mask.is_interior(i * d + j)).collect())
        .collect();
    let max_active = active.iter().map(Vec::len).max().unwrap_or(0);
    if max_active == 0 {
        return Ok(u);
    }

    // Columns of W = G⁻¹ B₀ᵀ, solved one active index per row at a time.
    let mut w_cols: Vec<Vec<Vec<f64>>> = vec![Vec::new(); rows];
    for k in 0..max_active {
        let mut e = Tensor::zeros(at.shape());
        for (i, idx) in active.iter().enumerate() {
            if let Some(&j) = idx.get(k) {
                e.data_mut()[i * d + j] = 1.0;
            }
        }
        let wk = solve_rows(g_apply, &e, rows, cg)?;
        for (i, idx) in active.iter().enumerate() {
            if k < idx.len() {
                w_cols[i].push(wk.data()[i * d..(i + 1) * d].to_vec());
            }
        }
    }

    for (i, idx) in active.iter().enumerate() {
        let a = idx.len();
        if a == 0 {
            continue;
        }
        let cols = &w_cols[i];
        let s = DMatrix::from_fn(a, a, |j, k| 0.5 * (cols[k][idx[j]] + cols[j][idx[k]]));
        let b0u = DVector::from_fn(a, |j, _| u.data()[i * d + idx[j]]);
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::IndefiniteSystem {
                curvature: s.diagonal().min(),
            })?;
        let c = chol.solve(&b0u);
        let row = &mut u.data_mut()[i * d..(i + 1) * d];
        for (k, col) in cols.iter().enumerate() {
            for (x, wv) in row.iter_mut().zip(col) {
                *x -= c[k] * wv;
            }
        }
    }
    Ok(u)
}

#[derive(Clone, Debug)]
pub struct UpperGradient {
    pub delta_star: Tensor,
    pub mask: ActiveMask,
    /// `∇_θ ℓ_tr(θ, δ*)`.
    pub direct: Vec<f64>,
    /// Implicit term `(dδ*/dθ)ᵀ ∇_δ ℓ_tr(θ, δ*)`.
    pub implicit: Vec<f64>,
    pub train_loss: f64,
}

impl UpperGradient {
    pub fn total(&self) -> Vec<f64> {
        self.direct
            .iter()
            .zip(&self.implicit)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Solves the lower level at `z` and assembles `dℓ_tr/dθ` with the selected IG.
#[allow(clippy::too_many_arguments)]
pub fn total_upper_gradient(
    train_loss: &(impl BatchObjective + ?Sized),
    attack_loss: &(impl BatchObjective + ?Sized),
    theta: &ParamVector,
    z: &Tensor,
    lambda: f64,
    bx: &ConstraintBox,
    mode: &IgMode,
) -> Result<UpperGradient> {
    let delta_star = lower_level_solve(attack_loss, theta, z, lambda, bx)?;
    let mask = active_mask(&delta_star, bx, default_tolerance(bx.epsilon))?;
    let (train_value, direct) = theta_grad(train_loss, theta, &delta_star)?;
    let (_, v) = per_example_delta_grad(train_loss, theta, &delta_star)?;
    let implicit = ig_vp(attack_loss, theta, &delta_star, &v, &mask, lambda, mode)?;
    Ok(UpperGradient {
        delta_star,
        mask,
        direct,
        implicit,
        train_loss: train_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{objective, Whole};
    use crate::constraints::build_box;

    fn bilinear(a: &[f64], n: usize, d: usize) -> impl BatchObjective + '_ {
        // ℓ = θᵀ A δ with A stored row-major [n, d].
        Whole(objective(move |t, th, dl| {
            let am = t.leaf(Tensor::matrix(n, d, a.to_vec()));
            let th_row = th[0].broadcast_rows(1);
            let d_col = dl.broadcast_cols(1);
            th_row.matmul(am).matmul(d_col).sum()
        }))
    }

    fn params(v: Vec<f64>) -> ParamVector {
        ParamVector::pack(vec![("t".into(), Tensor::vector(v))])
    }

    #[test]
    fn free_all_active_is_zero_and_scales_with_lambda() {
        let a = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let f = bilinear(&a, 2, 3);
        let th = params(vec![0.3, -0.7]);
        let at = Tensor::vector(vec![0.0, 0.1, -0.1]);
        let v = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let zero = ig_vp_free(&f, &th, &at, &v, &ActiveMask::all_active(&[3]), 2.0).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let one = ig_vp_free(&f, &th, &at, &v, &ActiveMask::all_interior(&[3]), 2.0).unwrap();
        let two = ig_vp_free(&f, &th, &at, &v, &ActiveMask::all_interior(&[3]), 4.0).unwrap();
        for (x, y) in one.iter().zip(&two) {
            assert_eq!(*x, 2.0 * y);
        }
        // -(1/λ) A v
        let want = [-(1.0 - 4.0 - 0.5) / 2.0, -(0.5 + 1.5) / 2.0];
        for (x, w) in one.iter().zip(want) {
            assert!((x - w).abs() < 1e-15);
        }
    }

    #[test]
    fn aware_reduces_to_free_for_bilinear_loss() {
        let a = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let f = bilinear(&a, 2, 3);
        let th = params(vec![0.3, -0.7]);
        let bx = build_box(&Tensor::vector(vec![0.5, 0.5, 0.5]), 0.2).unwrap();
        let at = Tensor::vector(vec![0.2, 0.05, -0.2]);
        let mask = active_mask(&at, &bx, 1e-8).unwrap();
        let v = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let free = ig_vp_free(&f, &th, &at, &v, &mask, 3.0).unwrap();
        let aware = ig_vp_aware(&f, &th, &at, &v, &mask, 3.0, &CgConfig::default()).unwrap();
        for (x, y) in free.iter().zip(&aware) {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn aware_all_active_is_zero() {
        let f = Whole(objective(|_, th, d| (th[0] * d * d).sum()));
        let th = params(vec![0.5, 1.0]);
        let at = Tensor::vector(vec![0.1, -0.1]);
        let v = Tensor::vector(vec![1.0, 1.0]);
        let out = ig_vp_aware(
            &f,
            &th,
            &at,
            &v,
            &ActiveMask::all_active(&[2]),
            1.0,
            &CgConfig::default(),
        )
        .unwrap();
        assert!(out.iter().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn lambda_must_be_positive() {
        let f = bilinear(&[1.0], 1, 1);
        let th = params(vec![1.0]);
        let t = Tensor::vector(vec![0.0]);
        assert!(ig_vp_free(&f, &th, &t, &t, &ActiveMask::all_interior(&[1]), 0.0).is_err());
    }
}
