use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{NeuralModel, CHUNK_ROWS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// RMSProp moving-average decay ρ.
    pub decay: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Softmax temperature used for the training loss.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 128,
            decay: 0.9,
            epsilon: 1e-7,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return fail("rmsprop decay must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return fail("rmsprop epsilon must be positive");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        Ok(())
    }

    fn rmsprop(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            decay: self.decay,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

/// `s ← ρ·s + (1−ρ)·g²; p ← p − lr·g / (√s + eps)`, elementwise.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    mean_square: &mut [f64],
    cfg: &RmsProp,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != mean_square.len() {
        return Err(Error::ShapeMismatch {
            context: "rmsprop_step",
            expected: vec![params.len()],
            found: vec![grads.len(), mean_square.len()],
        });
    }
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(mean_square.iter_mut()) {
        *s = cfg.decay * *s + (1.0 - cfg.decay) * g * g;
        *p -= cfg.learning_rate * g / (s.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralModel,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch RMSProp on cross-entropy against `targets`, which may be
/// one-hot or soft probability rows.
pub fn train(
    model: &NeuralModel,
    inputs: &Tensor,
    targets: &Tensor,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = inputs.rows();
    if n == 0 || inputs.len() == 0 {
        return Err(Error::EmptyDataset("training inputs"));
    }
    let classes = model.classes();
    if targets.rows() != n || targets.row_len() != classes {
        return Err(Error::ShapeMismatch {
            context: "train targets",
            expected: vec![n, classes],
            found: targets.shape().to_vec(),
        });
    }
    if inputs.row_len() != model.input_len() {
        return Err(Error::ShapeMismatch {
            context: "train inputs",
            expected: model.input_shape().to_vec(),
            found: inputs.shape().to_vec(),
        });
    }

    let mut model = model.clone();
    let mut state: Vec<Vec<f64>> = model.parameters_mut().map(|p| vec![0.0; p.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rms = config.rmsprop();
    let width = model.input_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = inputs.select_rows(batch);
            let y = targets.select_rows(batch);
            let seeds: Vec<u64> = (0..batch.len().div_ceil(CHUNK_ROWS))
                .map(|_| rng.next_u64())
                .collect();
            let parts: Vec<(f64, Vec<f64>)> = x
                .data()
                .par_chunks(CHUNK_ROWS * width)
                .zip(y.data().par_chunks(CHUNK_ROWS * classes))
                .zip(seeds.par_iter())
                .map(|((xc, yc), &seed)| {
                    let mut chunk_rng = ChaCha8Rng::seed_from_u64(seed);
                    model.chunk_loss_and_grads(xc, yc, config.temperature, &mut chunk_rng)
                })
                .collect();
            let mut parts = parts.into_iter();
            let (mut loss, mut grad) = parts.next().expect("non-empty batch");
            for (l, g) in parts {
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            epoch_loss += loss;

            let mut offset = 0;
            for (param, s) in model.parameters_mut().zip(state.iter_mut()) {
                let len = param.len();
                rmsprop_step(param.data_mut(), &grad[offset..offset + len], s, &rms)?;
                offset += len;
            }
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || model.parameters_mut().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_reference_step() {
        let cfg = RmsProp {
            learning_rate: 0.01,
            decay: 0.9,
            epsilon: 1e-7,
        };
        let mut p = [0.0];
        let mut s = [0.0];
        rmsprop_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-15);
        assert!((p[0] + 0.0316227).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_only_decays_state() {
        let cfg = RmsProp {
            learning_rate: 0.01,
            decay: 0.9,
            epsilon: 1e-7,
        };
        let mut p = [1.5, -2.0];
        let mut s = [0.4, 0.2];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, [1.5, -2.0]);
        assert!((s[0] - 0.36).abs() < 1e-15 && (s[1] - 0.18).abs() < 1e-15);
    }

    #[test]
    fn identical_parameters_get_identical_updates() {
        let cfg = RmsProp {
            learning_rate: 0.05,
            decay: 0.9,
            epsilon: 1e-7,
        };
        let mut p = [0.3, 0.3];
        let mut s = [0.0, 0.0];
        for g in [0.7, -0.2, 1.3] {
            rmsprop_step(&mut p, &[g, g], &mut s, &cfg).unwrap();
        }
        assert_eq!(p[0], p[1]);
        assert!(rmsprop_step(&mut p, &[1.0], &mut s, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
