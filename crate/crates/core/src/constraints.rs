//! Per-coordinate boxes for `‖δ‖∞ ≤ ε` intersected with the pixel range.

use crate::error::{Error, Result, ShapeError};
use crate::tensor::Tensor;

/// Feasible set `{δ : p ≤ δ ≤ q}` with `p = max(-ε, -x)`, `q = min(ε, 1 - x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintBox {
    pub p: Tensor,
    pub q: Tensor,
    pub epsilon: f64,
}

/// 1 where a coordinate is strictly inside its box, 0 where a bound is active.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveMask {
    pub interior: Tensor,
}

/// Default tolerance `1e-8 * max(1, ε)`.
pub fn default_tolerance(epsilon: f64) -> f64 {
    1e-8 * epsilon.max(1.0)
}

fn same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
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

pub fn build_box(x: &Tensor, epsilon: f64) -> Result<ConstraintBox> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    if let Some((index, &value)) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::InputOutOfRange { index, value });
    }
    Ok(ConstraintBox {
        p: x.map(|xi| (-epsilon).max(-xi)),
        q: x.map(|xi| epsilon.min(1.0 - xi)),
        epsilon,
    })
}

impl ConstraintBox {
    pub fn shape(&self) -> &[usize] {
        self.p.shape()
    }

    /// Rows of a batched box.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        Self {
            p: self.p.gather_rows(idx),
            q: self.q.gather_rows(idx),
            epsilon: self.epsilon,
        }
    }

    pub fn contains(&self, v: &Tensor) -> bool {
        v.shape() == self.shape()
            && v.data()
                .iter()
                .zip(self.p.data().iter().zip(self.q.data()))
                .all(|(x, (lo, hi))| lo <= x && x <= hi)
    }
}

/// Euclidean projection onto the box: an elementwise clamp.
pub fn project(v: &Tensor, bx: &ConstraintBox) -> Result<Tensor> {
    same_shape("projection input", &bx.p, v)?;
    let data = v
        .data()
        .iter()
        .zip(bx.p.data().iter().zip(bx.q.data()))
        .map(|(&x, (&lo, &hi))| x.max(lo).min(hi))
        .collect();
    Ok(Tensor::new(v.shape().to_vec(), data)?)
}

/// Interior indicator with tolerance `tau`: `p + τ < δ < q - τ`.
pub fn active_mask(delta: &Tensor, bx: &ConstraintBox, tau: f64) -> Result<ActiveMask> {
    same_shape("active mask input", &bx.p, delta)?;
    let mut interior = Vec::with_capacity(delta.len());
    for (index, (&d, (&lo, &hi))) in delta
        .data()
        .iter()
        .zip(bx.p.data().iter().zip(bx.q.data()))
        .enumerate()
    {
        if d < lo - tau || d > hi + tau {
            return Err(Error::OutsideBox {
                index,
                value: d,
                lower: lo,
                upper: hi,
            });
        }
        interior.push(if lo + tau < d && d < hi - tau {
            1.0
        } else {
            0.0
        });
    }
    Ok(ActiveMask {
        interior: Tensor::new(delta.shape().to_vec(), interior)?,
    })
}

/// `H_C v`: zeroes the active coordinates of `v`.
pub fn hc_apply(v: &Tensor, mask: &ActiveMask) -> Result<Tensor> {
    same_shape("H_C input", &mask.interior, v)?;
    Ok(v.zip_map(&mask.interior, |a, m| a * m))
}

impl ActiveMask {
    pub fn all_interior(shape: &[usize]) -> Self {
        Self {
            interior: Tensor::full(shape, 1.0),
        }
    }

    pub fn all_active(shape: &[usize]) -> Self {
        Self {
            interior: Tensor::zeros(shape),
        }
    }

    pub fn is_interior(&self, i: usize) -> bool {
        self.interior.data()[i] != 0.0
    }

    pub fn active_count(&self) -> usize {
        self.interior.data().iter().filter(|&&m| m == 0.0).count()
    }
}

/// One active constraint row of `B = [I; -I]`: `sign * e_index`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveRow {
    pub index: usize,
    pub sign: f64,
}

/// Active rows of `B` at `δ`: `+e_i` for an upper bound, `-e_i` for a lower bound.
///
/// A degenerate coordinate (`p_i == q_i`) contributes a single row, since
/// both bounds pin the same direction.
pub fn active_rows(delta: &Tensor, bx: &ConstraintBox, mask: &ActiveMask) -> Vec<ActiveRow> {
    let mut rows = Vec::new();
    for i in 0..delta.len() {
        if mask.is_interior(i) {
            continue;
        }
        let (d, lo, hi) = (delta.data()[i], bx.p.data()[i], bx.q.data()[i]);
        let sign = if (hi - d).abs() <= (d - lo).abs() {
            1.0
        } else {
            -1.0
        };
        rows.push(ActiveRow { index: i, sign });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_box(x: Vec<f64>, eps: f64) -> ConstraintBox {
        build_box(&Tensor::vector(x), eps).unwrap()
    }

    #[test]
    fn box_formula_cases() {
        let b = row_box(vec![0.5, 0.1, 1.0], 0.25);
        assert_eq!(b.p.data()[0], -0.25);
        assert_eq!(b.q.data()[0], 0.25);
        let b = row_box(vec![0.1], 0.3);
        assert_eq!(b.p.data()[0], -0.1);
        assert_eq!(b.q.data()[0], 0.3);
        let e = 8.0 / 255.0;
        let b = row_box(vec![1.0], e);
        assert_eq!(b.p.data()[0], -e);
        assert_eq!(b.q.data()[0], 0.0);
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let r = build_box(&Tensor::vector(vec![0.5, 1.5]), 0.1);
        assert!(matches!(r, Err(Error::InputOutOfRange { index: 1, .. })));
        assert!(matches!(
            build_box(&Tensor::vector(vec![0.5]), -0.1),
            Err(Error::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn projection_clamps() {
        let b = row_box(vec![0.5, 0.5], 0.25);
        let v = Tensor::vector(vec![0.5, 0.1]);
        assert_eq!(project(&v, &b).unwrap().data(), &[0.25, 0.1]);
    }

    #[test]
    fn mask_boundary_rules() {
        let b = row_box(vec![0.5, 0.5, 0.5], 0.25);
        let tau = default_tolerance(0.25);
        let d = Tensor::vector(vec![0.25, 0.0, 0.25 - tau / 2.0]);
        let m = active_mask(&d, &b, tau).unwrap();
        assert_eq!(m.interior.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_rejects_infeasible_delta() {
        let b = row_box(vec![0.5], 0.25);
        assert!(matches!(
            active_mask(&Tensor::vector(vec![0.3]), &b, 1e-8),
            Err(Error::OutsideBox { index: 0, .. })
        ));
    }

    #[test]
    fn degenerate_coordinate_is_active() {
        let b = row_box(vec![1.0], 0.0);
        let m = active_mask(&Tensor::vector(vec![0.0]), &b, 1e-8).unwrap();
        assert_eq!(m.interior.data(), &[0.0]);
        assert_eq!(active_rows(&Tensor::vector(vec![0.0]), &b, &m).len(), 1);
    }

    #[test]
    fn hc_extremes() {
        let v = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(hc_apply(&v, &ActiveMask::all_interior(&[2])).unwrap(), v);
        assert_eq!(
            hc_apply(&v, &ActiveMask::all_active(&[2])).unwrap().data(),
            &[0.0, 0.0]
        );
    }

    fn arb_case(d: usize) -> impl Strategy<Value = (Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(0.0f64..=1.0, d),
            0.0f64..0.5,
            proptest::collection::vec(-1.0f64..1.0, d),
            proptest::collection::vec(-1.0f64..1.0, d),
        )
    }

    proptest! {
        #[test]
        fn box_contains_zero_and_respects_budget((x, eps, _, _) in arb_case(8)) {
            let b = row_box(x, eps);
            for (&lo, &hi) in b.p.data().iter().zip(b.q.data()) {
                prop_assert!(lo <= 0.0 && 0.0 <= hi);
                prop_assert!(lo >= -eps && hi <= eps);
            }
            let zero = Tensor::zeros(&[8]);
            prop_assert_eq!(project(&zero, &b).unwrap(), zero);
        }

        #[test]
        fn projection_idempotent_and_nonexpansive((x, eps, u, v) in arb_case(8)) {
            let b = row_box(x, eps);
            let (u, v) = (Tensor::vector(u), Tensor::vector(v));
            let pu = project(&u, &b).unwrap();
            let pv = project(&v, &b).unwrap();
            prop_assert_eq!(project(&pu, &b).unwrap(), pu.clone());
            prop_assert!(pu.sub(&pv).norm() <= u.sub(&v).norm() + 1e-15);
            prop_assert!(b.contains(&pu));
        }

        #[test]
        fn projection_matches_grid_search((x, eps, u, _) in arb_case(4)) {
            let b = row_box(x, eps);
            let pu = project(&Tensor::vector(u.clone()), &b).unwrap();
            for i in 0..4 {
                let (lo, hi) = (b.p.data()[i], b.q.data()[i]);
                let n = 10_000;
                let best = (0..=n)
                    .map(|k| lo + (hi - lo) * k as f64 / n as f64)
                    .min_by(|a, c| (a - u[i]).abs().total_cmp(&(c - u[i]).abs()))
                    .unwrap();
                prop_assert!((pu.data()[i] - best).abs() <= (hi - lo) / n as f64 + 1e-15);
            }
        }

        #[test]
        fn hc_matches_dense_construction(
            (x, eps, v, r) in arb_case(16),
        ) {
            let b = row_box(x, eps);
            // Snap some coordinates onto bounds to make them active.
            let delta: Vec<f64> = r.iter().enumerate().map(|(i, &t)| {
                let (lo, hi) = (b.p.data()[i], b.q.data()[i]);
                if t < -0.5 { lo } else if t > 0.5 { hi } else { lo + (hi - lo) * (t + 0.5) }
            }).collect();
            let delta = Tensor::vector(delta);
            let m = active_mask(&delta, &b, default_tolerance(eps)).unwrap();
            let rows = active_rows(&delta, &b, &m);
            let d = 16;
            let mut dense = vec![0.0; d * d];
            for i in 0..d { dense[i * d + i] = 1.0; }
            for row in &rows {
                // (B0^T B0)_{ii} = sign^2 = 1
                dense[row.index * d + row.index] -= row.sign * row.sign;
            }
            let want: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| dense[i * d + j] * v[j]).sum())
                .collect();
            let got = hc_apply(&Tensor::vector(v), &m).unwrap();
            prop_assert_eq!(got.data(), &want[..]);
        }
    }
}
