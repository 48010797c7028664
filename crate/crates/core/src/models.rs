//! Fully connected classifiers and their training/attack losses.
//!
//! An MLP with no hidden layers is the linear model used by the analytic
//! tests. Parameters live in a [`ParamVector`] with segments
//! `layer{i}.weight` (`[fan_in, fan_out]`) and `layer{i}.bias` (`[fan_out]`).

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::autodiff::{BatchObjective, Objective, ParamVector, Tape, Var};
use crate::error::{Error, Result, ShapeError};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Swish,
}

impl Activation {
    pub fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Softplus => v.softplus(),
            Activation::Swish => v.swish(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Swish => "swish",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            "swish" => Ok(Activation::Swish),
            _ => Err(Error::Config(format!(
                "unknown activation {s:?} (expected relu, softplus or swish)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(input_dim, Vec::new(), num_classes)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive: input {}, hidden {:?}, classes {}",
                self.input_dim, self.hidden_dims, self.num_classes
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_dims);
        sizes.push(self.num_classes);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`, drawn from the `init` stream.
    pub fn init(&self) -> ParamVector {
        let mut r = rng::stream(self.seed, "init");
        let mut named = Vec::new();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| r.gen_range(-bound..=bound))
                .collect();
            let b = (0..fan_out).map(|_| r.gen_range(-bound..=bound)).collect();
            named.push((
                format!("layer{l}.weight"),
                Tensor::matrix(fan_in, fan_out, w),
            ));
            named.push((format!("layer{l}.bias"), Tensor::vector(b)));
        }
        ParamVector::pack(named)
    }

    /// All-zero parameters with the layout of [`ModelSpec::init`].
    pub fn zeros(&self) -> ParamVector {
        let init = self.init();
        init.with_values(vec![0.0; init.len()])
            .expect("same length")
    }

    /// Checks that `theta` has this model's layout.
    pub fn check_params(&self, theta: &ParamVector) -> Result<()> {
        let dims = self.layer_dims();
        let ok = theta.segments().len() == 2 * dims.len()
            && dims.iter().enumerate().all(|(l, &(i, o))| {
                theta.segments()[2 * l].shape == [i, o] && theta.segments()[2 * l + 1].shape == [o]
            });
        if ok {
            Ok(())
        } else {
            Err(ShapeError::Mismatch {
                what: "model parameters",
                expected: vec![self.param_count()],
                got: vec![theta.len()],
            }
            .into())
        }
    }

    /// Logits `[B, num_classes]` for an input node `[B, input_dim]`.
    pub fn logits<'t>(&self, theta: &[Var<'t>], input: Var<'t>) -> Var<'t> {
        let layers = theta.len() / 2;
        let mut h = input;
        for l in 0..layers {
            h = h.matmul(theta[2 * l]).add_row_vector(theta[2 * l + 1]);
            if l + 1 < layers {
                h = self.activation.apply(h);
            }
        }
        h
    }

    /// Logits for a plain input batch.
    pub fn forward(&self, theta: &ParamVector, x: &Tensor) -> Result<Tensor> {
        self.check_params(theta)?;
        check_input(self, x)?;
        let tape = Tape::new();
        let th = theta.record(&tape);
        let out = self.logits(&th, tape.leaf(x.clone()));
        let logits = (*out.value()).clone();
        Ok(logits)
    }

    pub fn predict(&self, theta: &ParamVector, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(theta, x)?.argmax_rows())
    }
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.cols() != spec.input_dim {
        return Err(ShapeError::Mismatch {
            what: "model input",
            expected: vec![x.shape().first().copied().unwrap_or(0), spec.input_dim],
            got: x.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Attack objective `ℓ_atk`, minimized by the lower-level problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttackLoss {
    /// `-ℓ_tr`: minimizing it maximizes the training loss.
    #[default]
    NegCrossEntropy,
    /// Batch-mean logit of the true class. Piecewise linear in `δ` under ReLU.
    TrueLogit,
}

impl FromStr for AttackLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_ce" => Ok(AttackLoss::NegCrossEntropy),
            "true_logit" => Ok(AttackLoss::TrueLogit),
            _ => Err(Error::Config(format!(
                "unknown attack loss {s:?} (expected neg_ce or true_logit)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Train,
    Attack(AttackLoss),
}

/// Batch-mean loss of a model on `x + δ` with labels `y`, as an [`Objective`].
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss<'a> {
    spec: &'a ModelSpec,
    x: &'a Tensor,
    y: &'a [usize],
    kind: LossKind,
}

impl<'a> BatchLoss<'a> {
    pub fn new(spec: &'a ModelSpec, x: &'a Tensor, y: &'a [usize], kind: LossKind) -> Result<Self> {
        check_input(spec, x)?;
        if y.len() != x.rows() {
            return Err(ShapeError::Mismatch {
                what: "labels",
                expected: vec![x.rows()],
                got: vec![y.len()],
            }
            .into());
        }
        if let Some((row, &label)) = y.iter().enumerate().find(|(_, &l)| l >= spec.num_classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: spec.num_classes,
            });
        }
        Ok(Self { spec, x, y, kind })
    }

    pub fn train(spec: &'a ModelSpec, x: &'a Tensor, y: &'a [usize]) -> Result<Self> {
        Self::new(spec, x, y, LossKind::Train)
    }

    pub fn attack(
        spec: &'a ModelSpec,
        x: &'a Tensor,
        y: &'a [usize],
        loss: AttackLoss,
    ) -> Result<Self> {
        Self::new(spec, x, y, LossKind::Attack(loss))
    }

    pub fn with_kind(self, kind: LossKind) -> Self {
        Self { kind, ..self }
    }

    pub fn spec(&self) -> &'a ModelSpec {
        self.spec
    }

    pub fn x(&self) -> &'a Tensor {
        self.x
    }

    pub fn y(&self) -> &'a [usize] {
        self.y
    }

    pub fn batch_size(&self) -> usize {
        self.y.len()
    }

    /// Per-example cross-entropy `[B]` at `x + δ`.
    pub fn per_example_ce<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], delta: Var<'t>) -> Var<'t> {
        let input = tape.leaf(self.x.clone()) + delta;
        self.spec.logits(theta, input).softmax_cross_entropy(self.y)
    }
}

impl Objective for BatchLoss<'_> {
    fn record<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], delta: Var<'t>) -> Var<'t> {
        match self.kind {
            LossKind::Train => self.per_example_ce(tape, theta, delta).mean(),
            LossKind::Attack(AttackLoss::NegCrossEntropy) => {
                -self.per_example_ce(tape, theta, delta).mean()
            }
            LossKind::Attack(AttackLoss::TrueLogit) => {
                let input = tape.leaf(self.x.clone()) + delta;
                let logits = self.spec.logits(theta, input);
                let c = self.spec.num_classes;
                let mut onehot = Tensor::zeros(&[self.y.len(), c]);
                for (r, &y) in self.y.iter().enumerate() {
                    onehot.data_mut()[r * c + y] = 1.0;
                }
                (logits * tape.leaf(onehot))
                    .sum()
                    .scale(1.0 / self.y.len() as f64)
            }
        }
    }
}

impl BatchObjective for BatchLoss<'_> {
    fn batch_size(&self) -> usize {
        self.y.len()
    }
}

const MAGIC: &[u8; 4] = b"FBAT";
const VERSION: u8 = 0x01;

/// Serializes parameters in the `FBAT` v1 checkpoint format (32-bit float payload).
pub fn encode_checkpoint(theta: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * theta.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(theta.segments().len() as u32).to_le_bytes());
    for s in theta.segments() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &theta.values()[s.offset..s.offset + s.len()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamVector> {
    struct Reader<'b> {
        bytes: &'b [u8],
        pos: usize,
    }
    impl<'b> Reader<'b> {
        fn take(&mut self, n: usize) -> Result<&'b [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte offset {}: needed {n} bytes",
                    self.pos
                )));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(
                self.take(4)?.try_into().expect("4 bytes"),
            ))
        }
    }

    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing FBAT magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut named = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(ParamVector::pack(named))
}

pub fn save_checkpoint(path: &Path, theta: &ParamVector) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(theta))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate, value_and_grad};
    use proptest::prelude::*;

    fn toy() -> (ModelSpec, Tensor, Vec<usize>) {
        let spec = ModelSpec::mlp(3, vec![5], 4).with_seed(11);
        let x = Tensor::matrix(3, 3, vec![0.1, 0.9, 0.4, 0.5, 0.5, 0.0, 1.0, 0.2, 0.7]);
        (spec, x, vec![0, 3, 1])
    }

    #[test]
    fn param_count_matches_layout() {
        let spec = ModelSpec::mlp(784, vec![64, 64], 10);
        assert_eq!(
            spec.param_count(),
            784 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10
        );
        assert_eq!(spec.init().len(), spec.param_count());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::mlp(16, vec![8], 3).with_seed(5);
        let a = spec.init();
        assert_eq!(a, spec.init());
        assert_ne!(a, spec.clone().with_seed(6).init());
        let w0 = &a.values()[..16 * 8];
        assert!(w0.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let (spec, x, _) = toy();
        let logits = spec.forward(&spec.zeros(), &x).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (spec, x, y) = toy();
        let loss = BatchLoss::train(&spec, &x, &y).unwrap();
        let v = evaluate(&loss, &spec.zeros(), &Tensor::zeros(&[3, 3]));
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn default_attack_loss_is_negated_train_loss() {
        let (spec, x, y) = toy();
        let theta = spec.init();
        let d = Tensor::full(&[3, 3], 0.01);
        let tr = evaluate(&BatchLoss::train(&spec, &x, &y).unwrap(), &theta, &d);
        let atk = evaluate(
            &BatchLoss::attack(&spec, &x, &y, AttackLoss::default()).unwrap(),
            &theta,
            &d,
        );
        assert_eq!(atk, -tr);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let (spec, x, _) = toy();
        let y = [0, 4, 1];
        assert!(matches!(
            BatchLoss::train(&spec, &x, &y),
            Err(Error::LabelOutOfRange {
                row: 1,
                label: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn input_shape_is_checked() {
        let (spec, _, _) = toy();
        assert!(spec.forward(&spec.init(), &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn one_gradient_step_lowers_clean_loss() {
        let (spec, x, y) = toy();
        let theta = spec.init();
        let loss = BatchLoss::train(&spec, &x, &y).unwrap();
        let zero = Tensor::zeros(&[3, 3]);
        let g = value_and_grad(&loss, &theta, &zero).unwrap();
        let stepped: Vec<f64> = theta
            .values()
            .iter()
            .zip(&g.theta)
            .map(|(t, d)| t - 1e-2 * d)
            .collect();
        let after = evaluate(&loss, &theta.with_values(stepped).unwrap(), &zero);
        assert!(after < g.value);
    }

    #[test]
    fn checkpoint_layout_is_bit_exact() {
        let pv = ParamVector::pack(vec![("b".into(), Tensor::vector(vec![1.0, -2.0]))]);
        let bytes = encode_checkpoint(&pv);
        let mut want = b"FBAT\x01".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'b');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), pv);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn batch_order_does_not_change_mean_loss(seed in 0u64..1000, rot in 0usize..3) {
            let (spec, x, y) = toy();
            let spec = spec.with_seed(seed);
            let theta = spec.init();
            let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
            let xp = x.gather_rows(&perm);
            let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
            let zero = Tensor::zeros(&[3, 3]);
            let a = evaluate(&BatchLoss::train(&spec, &x, &y).unwrap(), &theta, &zero);
            let b = evaluate(&BatchLoss::train(&spec, &xp, &yp).unwrap(), &theta, &zero);
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn checkpoint_roundtrips_f32_values(vals in proptest::collection::vec(-1e3f32..1e3, 1..20)) {
            let pv = ParamVector::pack(vec![(
                "w".into(),
                Tensor::vector(vals.iter().map(|&v| f64::from(v)).collect()),
            )]);
            prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&pv)).unwrap(), pv);
        }
    }
}
