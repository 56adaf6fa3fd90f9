use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::domain(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Fresh state with Adam defaults `(0.9, 0.999, 1e-8)`.
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParameterSet) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::domain(format!("invalid learning rate {learning_rate}")));
        }
        let moments = || match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        };
        Ok(OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: moments(),
            second_moment: moments(),
        })
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update. Nothing is modified when an error is returned.
    pub fn apply(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        if params.tensors.len() != grads.tensors.len()
            || params
                .tensors
                .iter()
                .zip(&grads.tensors)
                .any(|(p, g)| p.data.len() != g.data.len())
        {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        if self.kind == OptimizerKind::Adam
            && (self.first_moment.len() != params.tensors.len()
                || self
                    .first_moment
                    .iter()
                    .zip(&params.tensors)
                    .any(|(m, p)| m.len() != p.data.len()))
        {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        if let Some(t) = grads.tensors.iter().find(|t| t.data.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient {
                tensor: t.name.clone(),
            });
        }

        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
                    for (x, d) in p.data.iter_mut().zip(&g.data) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let bias1 = 1.0 - b1.powf(self.step as f64);
                let bias2 = 1.0 - b2.powf(self.step as f64);
                for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for j in 0..p.data.len() {
                        let d = g.data[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * d;
                        v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tensor;

    fn single(value: f64) -> ParameterSet {
        ParameterSet {
            tensors: vec![Tensor {
                name: "w".into(),
                shape: vec![1],
                data: vec![value],
            }],
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &p).unwrap();
        opt.apply(&mut p, &single(0.5)).unwrap();
        assert!((p.tensors[0].data[0] - 0.95).abs() < 1e-15);
        assert_eq!(opt.step, 1);

        opt.apply(&mut p, &single(0.0)).unwrap();
        assert!((p.tensors[0].data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut p = single(0.0);
            let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-3, &p).unwrap();
            opt.apply(&mut p, &single(g)).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p.tensors[0].data[0] - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let mut p = single(2.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &p).unwrap();
        opt.apply(&mut p, &single(1.0)).unwrap();
        let after_first = p.tensors[0].data[0];
        let m = opt.first_moment()[0][0];
        let mut q = single(after_first);
        let mut opt2 = opt.clone();
        opt2.apply(&mut q, &single(0.0)).unwrap();
        assert!((opt2.first_moment()[0][0] - 0.9 * m).abs() < 1e-15);
        // A zero gradient still moves parameters through the first moment.
        assert_ne!(q.tensors[0].data[0], after_first);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &p).unwrap();
        let before = opt.clone();
        let err = opt.apply(&mut p, &single(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(p.tensors[0].data[0], 1.0);
        assert_eq!(opt, before);
    }

    #[test]
    fn parse_kind() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert_eq!("SGD".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn clipping() {
        let mut g = ParameterSet {
            tensors: vec![Tensor {
                name: "w".into(),
                shape: vec![2],
                data: vec![3.0, 4.0],
            }],
        };
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.tensors[0].data, vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.squared_norm() - 1.0).abs() < 1e-15);
    }
}
