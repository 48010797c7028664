//! Plain-loop MLP forward pass and losses, independent of the tape.

use crate::models::{Activation, AttackLoss, LossKind, ModelSpec};
use crate::tensor::Tensor;

fn act(a: Activation, t: f64) -> f64 {
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    match a {
        Activation::Relu => t.max(0.0),
        Activation::Softplus => {
            if t > 30.0 {
                t + (-t).exp()
            } else {
                t.exp().ln_1p()
            }
        }
        Activation::Swish => t * sig(t),
    }
}

/// Logits of one input row given flat parameters in the `ModelSpec::init` layout.
pub fn logits(spec: &ModelSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut sizes = vec![spec.input_dim];
    sizes.extend(&spec.hidden_dims);
    sizes.push(spec.num_classes);
    let layers = sizes.len() - 1;
    let mut h = input.to_vec();
    let mut off = 0;
    for l in 0..layers {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let w = &params[off..off + fi * fo];
        let b = &params[off + fi * fo..off + fi * fo + fo];
        off += fi * fo + fo;
        let mut out = b.to_vec();
        for (i, hi) in h.iter().enumerate() {
            for j in 0..fo {
                out[j] += hi * w[i * fo + j];
            }
        }
        if l + 1 < layers {
            for v in &mut out {
                *v = act(spec.activation, *v);
            }
        }
        h = out;
    }
    h
}

/// Batch-mean loss at `x + δ`.
pub fn loss(
    spec: &ModelSpec,
    kind: LossKind,
    params: &[f64],
    x: &Tensor,
    delta: &[f64],
    y: &[usize],
) -> f64 {
    let d = spec.input_dim;
    let mut total = 0.0;
    for (r, &label) in y.iter().enumerate() {
        let input: Vec<f64> = (0..d)
            .map(|k| x.data()[r * d + k] + delta[r * d + k])
            .collect();
        let z = logits(spec, params, &input);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let ce = lse - z[label];
        total += match kind {
            LossKind::Train => ce,
            LossKind::Attack(AttackLoss::NegCrossEntropy) => -ce,
            LossKind::Attack(AttackLoss::TrueLogit) => z[label],
        };
    }
    total / y.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::evaluate;
    use crate::models::BatchLoss;

    #[test]
    fn agrees_with_tape_forward() {
        for act in [Activation::Relu, Activation::Softplus, Activation::Swish] {
            let spec = ModelSpec::mlp(3, vec![4, 5], 3)
                .with_activation(act)
                .with_seed(3);
            let theta = spec.init();
            let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]);
            let delta = Tensor::matrix(2, 3, vec![0.01, -0.02, 0.0, 0.05, 0.0, -0.1]);
            let y = [2, 0];
            for kind in [
                LossKind::Train,
                LossKind::Attack(AttackLoss::NegCrossEntropy),
                LossKind::Attack(AttackLoss::TrueLogit),
            ] {
                let tape = evaluate(
                    &BatchLoss::new(&spec, &x, &y, kind).unwrap(),
                    &theta,
                    &delta,
                );
                let plain = loss(&spec, kind, theta.values(), &x, delta.data(), &y);
                assert!(
                    (tape - plain).abs() < 1e-13,
                    "{act:?} {kind:?}: {tape} vs {plain}"
                );
            }
        }
    }
}
