//! A small recurrent network producing per-frame class posteriors.
//!
//! Stacked tanh-RNN or LSTM layers (optionally bidirectional, with the two
//! directions concatenated) feed a per-frame affine layer and softmax. The
//! output width is `num_labels + 1`, with the blank class last.

mod optim;
mod recurrent;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optim::{clip_global_norm, OptimizerKind, OptimizerState};
pub use recurrent::{backward, forward, ForwardCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    /// Number of stacked gate blocks in the cell's weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: CellKind,
    /// Hidden units per direction.
    pub units: usize,
    pub bidirectional: bool,
}

impl LayerSpec {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_dim(&self) -> usize {
        self.units * self.directions()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub num_labels: usize,
}

impl NetworkSpec {
    /// `depth` identical recurrent layers.
    pub fn stacked(
        feature_dim: usize,
        num_labels: usize,
        kind: CellKind,
        units: usize,
        depth: usize,
        bidirectional: bool,
    ) -> Self {
        NetworkSpec {
            feature_dim,
            layers: vec![
                LayerSpec {
                    kind,
                    units,
                    bidirectional
                };
                depth
            ],
            num_labels,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_labels + 1
    }

    pub fn blank(&self) -> usize {
        self.num_labels
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::domain("feature_dim must be at least 1"));
        }
        if self.num_labels == 0 {
            return Err(Error::domain("num_labels must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::domain("the network needs at least one recurrent layer"));
        }
        if let Some(i) = self.layers.iter().position(|l| l.units == 0) {
            return Err(Error::domain(format!("layer {i} has zero units")));
        }
        Ok(())
    }

    pub(crate) fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.feature_dim
        } else {
            self.layers[layer - 1].output_dim()
        }
    }

    fn output_input_dim(&self) -> usize {
        self.layers.last().map_or(self.feature_dim, LayerSpec::output_dim)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = layer.kind.gates() * layer.units;
            let input_dim = self.layer_input_dim(l);
            for dir in DIRECTION_NAMES.iter().take(layer.directions()) {
                out.push((format!("layer{l}.{dir}.input_weights"), vec![rows, input_dim]));
                out.push((format!("layer{l}.{dir}.recurrent_weights"), vec![rows, layer.units]));
                out.push((format!("layer{l}.{dir}.bias"), vec![rows]));
            }
        }
        out.push(("output.weights".into(), vec![self.num_classes(), self.output_input_dim()]));
        out.push(("output.bias".into(), vec![self.num_classes()]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub(crate) const DIRECTION_NAMES: [&str; 2] = ["fwd", "bwd"];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }
}

/// Trainable tensors of a network, in the order given by
/// [`NetworkSpec::tensor_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParameterSet {
            tensors: spec
                .tensor_shapes()
                .into_iter()
                .map(|(name, shape)| Tensor::zeros(name, shape))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Checks names and shapes against `spec`.
    pub fn audit(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.tensor_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::Shape(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {name} holds {} values", t.data.len())));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParameterSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }
}

/// Glorot-uniform weights, zero biases and LSTM forget-gate bias 1.
/// Deterministic in `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::zeros(spec);
    for t in &mut params.tensors {
        if t.shape.len() == 2 {
            let (fan_out, fan_in) = (t.shape[0], t.shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut t.data {
                *x = rng.gen_range(-bound..=bound);
            }
        }
    }
    for (l, layer) in spec.layers.iter().enumerate() {
        if layer.kind != CellKind::Lstm {
            continue;
        }
        for dir in DIRECTION_NAMES.iter().take(layer.directions()) {
            let bias = params
                .get_mut(&format!("layer{l}.{dir}.bias"))
                .expect("tensor listed by the spec");
            // Gate blocks are stacked input, forget, cell, output.
            bias.data[layer.units..2 * layer.units].fill(1.0);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            feature_dim: 3,
            layers: vec![
                LayerSpec {
                    kind: CellKind::Lstm,
                    units: 4,
                    bidirectional: true,
                },
                LayerSpec {
                    kind: CellKind::Rnn,
                    units: 2,
                    bidirectional: false,
                },
            ],
            num_labels: 2,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = toy_spec();
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let c = init_params(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors.iter().zip(&b.tensors).all(|(x, y)| x
            .data
            .iter()
            .zip(&y.data)
            .all(|(p, q)| p.to_bits() == q.to_bits())));
        assert_ne!(a, c);
    }

    #[test]
    fn dense_output_respects_glorot_bound() {
        // Last recurrent layer emits 2 features; output layer is dense 2 -> 3.
        let spec = NetworkSpec::stacked(5, 2, CellKind::Rnn, 2, 1, false);
        let params = init_params(&spec, 3).unwrap();
        let w = params.get("output.weights").unwrap();
        assert_eq!(w.shape, vec![3, 2]);
        let bound = (6.0f64 / 5.0).sqrt();
        assert!((bound - 1.0954).abs() < 1e-4);
        assert!(w.data.iter().all(|x| x.abs() <= bound));
        assert!(w.data.iter().any(|x| *x != 0.0));
        assert!(params.get("output.bias").unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lstm_forget_bias_is_one() {
        let spec = toy_spec();
        let params = init_params(&spec, 0).unwrap();
        let bias = params.get("layer0.bwd.bias").unwrap();
        assert_eq!(&bias.data[..4], &[0.0; 4]);
        assert_eq!(&bias.data[4..8], &[1.0; 4]);
        assert_eq!(&bias.data[8..], &[0.0; 8]);
    }

    #[test]
    fn shape_audit() {
        let spec = toy_spec();
        let mut params = init_params(&spec, 0).unwrap();
        params.audit(&spec).unwrap();
        params.tensors[1].shape = vec![16, 5];
        assert!(params.audit(&spec).is_err());

        let mut other = spec.clone();
        other.num_labels = 3;
        assert!(init_params(&spec, 0).unwrap().audit(&other).is_err());
    }

    #[test]
    fn large_bidirectional_stack_shapes() {
        let spec = NetworkSpec::stacked(20, 10, CellKind::Lstm, 128, 3, true);
        let params = init_params(&spec, 0).unwrap();
        params.audit(&spec).unwrap();
        assert_eq!(params.get("output.weights").unwrap().shape, vec![11, 256]);
        assert_eq!(params.get("layer1.fwd.input_weights").unwrap().shape, vec![512, 256]);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = toy_spec();
        spec.layers.clear();
        assert!(spec.validate().is_err());
        let mut spec = toy_spec();
        spec.num_labels = 0;
        assert!(spec.validate().is_err());
        let mut spec = toy_spec();
        spec.layers[1].units = 0;
        assert!(init_params(&spec, 0).is_err());
    }
}
