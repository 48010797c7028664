use crate::autodiff::{Tape, Var};
use crate::error::{Result, ShapeError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All model parameters as one flat buffer with named, shaped segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParamVector {
    /// Packs named tensors in order.
    pub fn pack(named: Vec<(String, Tensor)>) -> Self {
        let mut segments = Vec::with_capacity(named.len());
        let mut values = Vec::new();
        for (name, t) in named {
            segments.push(Segment {
                name,
                shape: t.shape().to_vec(),
                offset: values.len(),
            });
            values.extend_from_slice(t.data());
        }
        Self { segments, values }
    }

    pub fn unpack(&self) -> Vec<(String, Tensor)> {
        self.segments
            .iter()
            .map(|s| (s.name.clone(), self.tensor(s)))
            .collect()
    }

    fn tensor(&self, s: &Segment) -> Tensor {
        Tensor::new(
            s.shape.clone(),
            self.values[s.offset..s.offset + s.len()].to_vec(),
        )
        .expect("segment length matches its shape")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(ShapeError::Mismatch {
                what: "parameter values",
                expected: vec![self.values.len()],
                got: vec![values.len()],
            }
            .into());
        }
        Ok(Self {
            segments: self.segments.clone(),
            values,
        })
    }

    /// Records each segment as a leaf on `tape`.
    pub fn record<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.segments
            .iter()
            .map(|s| tape.leaf(self.tensor(s)))
            .collect()
    }

    /// Flattens per-segment tensors (e.g. gradients from [`ParamVector::record`]) back
    /// into this layout.
    pub fn flatten(&self, parts: &[Var<'_>]) -> Vec<f64> {
        debug_assert_eq!(parts.len(), self.segments.len());
        let mut out = Vec::with_capacity(self.values.len());
        for p in parts {
            out.extend_from_slice(p.value().data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(
            a in proptest::collection::vec(-1e3f64..1e3, 6),
            b in proptest::collection::vec(-1e3f64..1e3, 3),
        ) {
            let pv = ParamVector::pack(vec![
                ("w".into(), Tensor::matrix(2, 3, a)),
                ("b".into(), Tensor::vector(b)),
            ]);
            prop_assert_eq!(pv.segments()[1].offset, 6);
            prop_assert_eq!(pv.len(), 9);
            let again = ParamVector::pack(pv.unpack());
            prop_assert_eq!(again, pv);
        }
    }

    #[test]
    fn with_values_checks_length() {
        let pv = ParamVector::pack(vec![("b".into(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(pv.with_values(vec![0.0]).is_err());
        assert_eq!(
            pv.with_values(vec![3.0, 4.0]).unwrap().values(),
            &[3.0, 4.0]
        );
    }
}
