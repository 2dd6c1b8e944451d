use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::tensor::Scalar;
use crate::error::{ColonyError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum UpdateRule {
    /// `v ← μ·v + g; w ← w − lr·v`
    SgdMomentum { momentum: f64 },
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::SgdMomentum { momentum: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    first: BTreeMap<String, Vec<F>>,
    second: BTreeMap<String, Vec<F>>,
    steps: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(rule: UpdateRule, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(ColonyError::Config(format!("learning rate {learning_rate} is invalid")));
        }
        Ok(OptimizerState {
            rule,
            learning_rate,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(UpdateRule::SgdMomentum { momentum }, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the gradients currently stored in `net`.
    /// Gradients are left in place.
    pub fn step(&mut self, net: &mut Network<F>) -> Result<()> {
        if !net.gradients_ready() {
            return Err(ColonyError::State(
                "optimizer step before any gradient computation".into(),
            ));
        }
        self.steps += 1;
        let lr = F::from_f64(self.learning_rate);
        match self.rule {
            UpdateRule::SgdMomentum { momentum } => {
                let mu = F::from_f64(momentum);
                for block in net.parameters_mut() {
                    let v = self
                        .first
                        .entry(block.id.clone())
                        .or_insert_with(|| vec![F::ZERO; block.values.len()]);
                    let grad = block.gradient.data();
                    let w = block.values.data_mut();
                    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            UpdateRule::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.steps as i32;
                let c1 = F::from_f64(1.0 - beta1.powi(t));
                let c2 = F::from_f64(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (F::from_f64(beta1), F::from_f64(beta2), F::from_f64(epsilon));
                for block in net.parameters_mut() {
                    let m = self
                        .first
                        .entry(block.id.clone())
                        .or_insert_with(|| vec![F::ZERO; block.values.len()]);
                    let s = self
                        .second
                        .entry(block.id.clone())
                        .or_insert_with(|| vec![F::ZERO; block.values.len()]);
                    let grad = block.gradient.data();
                    let w = block.values.data_mut();
                    for i in 0..w.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (F::ONE - b1) * g;
                        s[i] = b2 * s[i] + (F::ONE - b2) * g * g;
                        let mhat = m[i] / c1;
                        let shat = s[i] / c2;
                        w[i] -= lr * mhat / (shat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{LayerSpec, Linear};
    use crate::nn::network::ParameterBlock;
    use crate::nn::tensor::Tensor;

    /// Network with a single scalar-weight FC layer feeding the softmax.
    fn scalar_net(w: f64) -> Network<f64> {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::FullyConnected(Linear {
                inputs: 1,
                outputs: 10,
                weight: "w".into(),
                bias: "b".into(),
            }),
            LayerSpec::Softmax,
        ];
        let mut wv = vec![0.0; 10];
        wv[0] = w;
        Network::new(
            layers,
            vec![
                ParameterBlock::new("w", Tensor::from_vec(&[10, 1], wv).unwrap()),
                ParameterBlock::new("b", Tensor::zeros(&[10])),
            ],
            vec![],
            [1, 1, 1],
            10,
        )
        .unwrap()
    }

    fn set_grad(net: &mut Network<f64>, g: f64) {
        // Populate gradients through the normal path, then overwrite with a known value.
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        net.loss_and_grad(&x, &[0]).unwrap();
        for b in net.parameters_mut() {
            b.gradient.data_mut().fill(0.0);
        }
        net.block_mut("w").unwrap().gradient.data_mut()[0] = g;
    }

    #[test]
    fn step_before_gradients_is_a_state_error() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::sgd(0.1, 0.0).unwrap();
        assert!(matches!(opt.step(&mut net), Err(ColonyError::State(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut net = scalar_net(1.0);
        set_grad(&mut net, 0.5);
        let before: Vec<_> = net.parameters().map(|b| b.values.clone()).collect();
        let mut opt = OptimizerState::sgd(0.0, 0.9).unwrap();
        opt.step(&mut net).unwrap();
        let after: Vec<_> = net.parameters().map(|b| b.values.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn plain_sgd_single_step() {
        let mut net = scalar_net(1.0);
        set_grad(&mut net, 0.5);
        let mut opt = OptimizerState::sgd(0.1, 0.0).unwrap();
        opt.step(&mut net).unwrap();
        assert!((net.block("w").unwrap().values.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps_unrolled() {
        let mut net = scalar_net(0.0);
        set_grad(&mut net, 1.0);
        let mut opt = OptimizerState::sgd(0.1, 0.9).unwrap();
        opt.step(&mut net).unwrap();
        assert!((net.block("w").unwrap().values.data()[0] + 0.1).abs() < 1e-15);
        opt.step(&mut net).unwrap();
        assert!((net.block("w").unwrap().values.data()[0] + 0.29).abs() < 1e-15);
        // gradients untouched
        assert_eq!(net.block("w").unwrap().gradient.data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = scalar_net(0.0);
        set_grad(&mut net, 3.0);
        let mut opt = OptimizerState::new(
            UpdateRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-12,
            },
            0.01,
        )
        .unwrap();
        opt.step(&mut net).unwrap();
        assert!((net.block("w").unwrap().values.data()[0] + 0.01).abs() < 1e-9);
    }
}
