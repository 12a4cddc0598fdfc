use std::sync::atomic::{AtomicU64, Ordering};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{Cache, Layer, LayerSpec};
use super::loss::{cross_entropy_logit_grad, prob_logit_grad, softmax_rows};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Rows processed together by one worker.
pub(crate) const CHUNK_ROWS: usize = 32;

pub enum Mode<'a> {
    /// Dropout disabled; deterministic.
    Infer,
    /// Dropout enabled, masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

/// Ordered layer stack ending in a softmax classifier.
///
/// Parameters only change through [`crate::nn::train`]. Every call to
/// [`NeuralModel::input_gradient`] or [`NeuralModel::prob_input_gradient`] is
/// counted so harnesses can prove a model was never queried for gradients.
#[derive(Debug)]
pub struct NeuralModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    gradient_calls: AtomicU64,
}

/// A fresh clone starts with a zero gradient-call count.
impl Clone for NeuralModel {
    fn clone(&self) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            gradient_calls: AtomicU64::new(0),
        }
    }
}

impl PartialEq for NeuralModel {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl NeuralModel {
    /// Builds a model with seeded Glorot-uniform weights and zero biases.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::check_stack(&input_shape, &specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for spec in specs {
            let layer = Layer::new(spec, &shape, &mut rng)?;
            shape = layer.out_shape.clone();
            layers.push(layer);
        }
        Ok(Self {
            input_shape,
            layers,
            gradient_calls: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from explicit parameter tensors (one list per layer).
    pub fn from_parts(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        params: Vec<Vec<Tensor>>,
    ) -> Result<Self> {
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "{} layer specs but {} parameter groups",
                specs.len(),
                params.len()
            )));
        }
        let mut model = Self::new(input_shape, specs, 0)?;
        for (layer, given) in model.layers.iter_mut().zip(params) {
            if layer.params.len() != given.len()
                || layer.params.iter().zip(&given).any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::Format(format!(
                    "parameter shapes do not match layer {}",
                    layer.spec.name()
                )));
            }
            layer.params = given;
        }
        Ok(model)
    }

    fn check_stack(input_shape: &[usize], specs: &[LayerSpec]) -> Result<()> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        match specs.last() {
            Some(LayerSpec::SoftmaxOutput { .. }) => Ok(()),
            _ => Err(Error::InvalidConfig(
                "classifier stack must end with a softmax output layer".into(),
            )),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_len())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn parameters(&self) -> Vec<&[Tensor]> {
        self.layers.iter().map(|l| l.params.as_slice()).collect()
    }

    pub(crate) fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter())
            .map(Tensor::len)
            .sum()
    }

    /// Number of input-gradient queries served since construction or clone.
    pub fn gradient_calls(&self) -> u64 {
        self.gradient_calls.load(Ordering::Relaxed)
    }

    /// Accepts `[n, ..input_shape]` or a single `input_shape` sample.
    fn batch_rows(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape == self.input_shape.as_slice() {
            return Ok(1);
        }
        if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] {
            return Ok(shape[0]);
        }
        let mut expected = vec![0];
        expected.extend_from_slice(&self.input_shape);
        Err(Error::ShapeMismatch {
            context: "model input",
            expected,
            found: shape.to_vec(),
        })
    }

    fn forward_pass(
        &self,
        x: &[f64],
        n: usize,
        mut rng: Option<&mut dyn RngCore>,
        keep_cache: bool,
    ) -> (Vec<f64>, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for layer in &self.layers {
            let layer_rng: Option<&mut dyn RngCore> = match rng {
                Some(ref mut r) => Some(&mut **r),
                None => None,
            };
            let (y, cache) = layer.forward(act, n, layer_rng, keep_cache);
            act = y;
            caches.push(cache);
        }
        (act, caches)
    }

    fn backward_pass(
        &self,
        caches: &[Cache],
        dlogits: Vec<f64>,
        n: usize,
        param_grads: bool,
    ) -> (Vec<f64>, Vec<Option<Vec<Vec<f64>>>>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dy = dlogits;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (dx, g) = layer.backward(cache, dy, n, param_grads);
            dy = dx;
            grads.push(g);
        }
        grads.reverse();
        (dy, grads)
    }

    /// Raw pre-softmax outputs, shape `[n, classes]`.
    pub fn logits(&self, batch: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let n = self.batch_rows(batch)?;
        let classes = self.classes();
        let data = match mode {
            Mode::Train(rng) => self.forward_pass(batch.data(), n, Some(rng), false).0,
            Mode::Infer => {
                let width = self.input_len();
                batch
                    .data()
                    .par_chunks(CHUNK_ROWS * width)
                    .map(|c| self.forward_pass(c, c.len() / width, None, false).0)
                    .collect::<Vec<_>>()
                    .concat()
            }
        };
        let out = Tensor::new(vec![n, classes], data)?;
        out.ensure_finite("forward")?;
        Ok(out)
    }

    /// Class probabilities at temperature 1, shape `[n, classes]`.
    pub fn forward(&self, batch: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        self.forward_at_temperature(batch, mode, 1.0)
    }

    pub fn forward_at_temperature(
        &self,
        batch: &Tensor,
        mode: Mode<'_>,
        temperature: f64,
    ) -> Result<Tensor> {
        let logits = self.logits(batch, mode)?;
        let classes = self.classes();
        let probs = Tensor::new(
            logits.shape().to_vec(),
            softmax_rows(logits.data(), classes, temperature),
        )?;
        probs.ensure_finite("softmax")?;
        Ok(probs)
    }

    /// Gradient of each sample's own cross-entropy loss (temperature 1,
    /// inference mode) with respect to that sample's input entries.
    pub fn input_gradient(&self, inputs: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let n = self.batch_rows(inputs)?;
        let classes = self.classes();
        if labels.len() != n * classes {
            return Err(Error::ShapeMismatch {
                context: "input_gradient labels",
                expected: vec![n, classes],
                found: labels.shape().to_vec(),
            });
        }
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        let width = self.input_len();
        let grad: Vec<f64> = inputs
            .data()
            .par_chunks(CHUNK_ROWS * width)
            .zip(labels.data().par_chunks(CHUNK_ROWS * classes))
            .map(|(x, y)| {
                let rows = x.len() / width;
                let (logits, caches) = self.forward_pass(x, rows, None, true);
                let probs = softmax_rows(&logits, classes, 1.0);
                let dlogits = cross_entropy_logit_grad(&probs, y, classes, 1.0);
                self.backward_pass(&caches, dlogits, rows, false).0
            })
            .collect::<Vec<_>>()
            .concat();
        let out = Tensor::new(inputs.shape().to_vec(), grad)?;
        out.ensure_finite("input_gradient")?;
        Ok(out)
    }

    /// Gradient of the softmax output for `class` with respect to each input.
    pub fn prob_input_gradient(&self, inputs: &Tensor, class: usize) -> Result<Tensor> {
        let classes = self.classes();
        if class >= classes {
            return Err(Error::InvalidClass {
                index: class,
                classes,
            });
        }
        self.batch_rows(inputs)?;
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        let width = self.input_len();
        let grad: Vec<f64> = inputs
            .data()
            .par_chunks(CHUNK_ROWS * width)
            .map(|x| {
                let rows = x.len() / width;
                let (logits, caches) = self.forward_pass(x, rows, None, true);
                let probs = softmax_rows(&logits, classes, 1.0);
                let dlogits = prob_logit_grad(&probs, classes, class);
                self.backward_pass(&caches, dlogits, rows, false).0
            })
            .collect::<Vec<_>>()
            .concat();
        let out = Tensor::new(inputs.shape().to_vec(), grad)?;
        out.ensure_finite("prob_input_gradient")?;
        Ok(out)
    }

    /// Gradient of `Σ_k coefficients[k]·z_k` over the raw logits `z`.
    pub fn logit_input_gradient(&self, inputs: &Tensor, coefficients: &[f64]) -> Result<Tensor> {
        let classes = self.classes();
        if coefficients.len() != classes {
            return Err(Error::ShapeMismatch {
                context: "logit coefficients",
                expected: vec![classes],
                found: vec![coefficients.len()],
            });
        }
        self.batch_rows(inputs)?;
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        let width = self.input_len();
        let grad: Vec<f64> = inputs
            .data()
            .par_chunks(CHUNK_ROWS * width)
            .map(|x| {
                let rows = x.len() / width;
                let (_, caches) = self.forward_pass(x, rows, None, true);
                let dlogits = coefficients.repeat(rows);
                self.backward_pass(&caches, dlogits, rows, false).0
            })
            .collect::<Vec<_>>()
            .concat();
        let out = Tensor::new(inputs.shape().to_vec(), grad)?;
        out.ensure_finite("logit_input_gradient")?;
        Ok(out)
    }

    /// Training-mode loss sum and summed parameter gradients for one chunk.
    pub(crate) fn chunk_loss_and_grads(
        &self,
        x: &[f64],
        targets: &[f64],
        temperature: f64,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>) {
        let classes = self.classes();
        let rows = x.len() / self.input_len();
        let (logits, caches) = self.forward_pass(x, rows, Some(rng), true);
        let probs = softmax_rows(&logits, classes, temperature);
        let loss: f64 = probs
            .iter()
            .zip(targets)
            .map(|(&p, &y)| if y == 0.0 { 0.0 } else { -y * p.max(super::loss::PROB_FLOOR).ln() })
            .sum();
        let dlogits = cross_entropy_logit_grad(&probs, targets, classes, temperature);
        let (_, grads) = self.backward_pass(&caches, dlogits, rows, true);
        let flat = grads.into_iter().flatten().flatten().flatten().collect();
        (loss, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Activation;

    fn zero_model() -> NeuralModel {
        let mut m = NeuralModel::new(
            vec![3],
            vec![LayerSpec::SoftmaxOutput { classes: 2 }],
            1,
        )
        .unwrap();
        for p in m.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let m = zero_model();
        let x = Tensor::new(vec![2, 3], vec![1.0, 5.0, -2.0, 0.0, 0.3, 9.0]).unwrap();
        let p = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
        let g = m.input_gradient(&x, &Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = m.prob_input_gradient(&x, 1).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_two_layer_model() {
        // Dense(2, relu) with W = [[1, -1], [0.5, 1]] (input-major), b = [0, 0.5];
        // output W2 = [[1, 0], [0, 2]], b2 = [0.1, -0.1].
        // x = [1, 2]: h = relu([1 + 1, -1 + 2 + 0.5]) = [2, 1.5]
        // z = [2.1, 2.9]; p_theft = 1 / (1 + e^{-0.8}) = 0.6899744811276125
        let model = NeuralModel::from_parts(
            vec![2],
            vec![
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Relu,
                },
                LayerSpec::SoftmaxOutput { classes: 2 },
            ],
            vec![
                vec![
                    Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 1.0]).unwrap(),
                    Tensor::new(vec![2], vec![0.0, 0.5]).unwrap(),
                ],
                vec![
                    Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
                    Tensor::new(vec![2], vec![0.1, -0.1]).unwrap(),
                ],
            ],
        )
        .unwrap();
        let p = model
            .forward(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), Mode::Infer)
            .unwrap();
        assert!((p.data()[1] - 0.6899744811276125).abs() < 1e-12);
        assert!((p.data()[0] - 0.3100255188723875).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_shape_and_class() {
        let m = zero_model();
        assert!(m.forward(&Tensor::zeros(vec![2, 4]), Mode::Infer).is_err());
        assert!(matches!(
            m.prob_input_gradient(&Tensor::zeros(vec![1, 3]), 2),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn stack_must_end_in_softmax() {
        assert!(NeuralModel::new(vec![4], vec![LayerSpec::dense(2)], 0).is_err());
    }

    fn parameter_loss(model: &NeuralModel, x: &[f64], y: &[f64]) -> f64 {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        model.chunk_loss_and_grads(x, y, 1.0, &mut rng).0
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let stacks: Vec<(Vec<usize>, Vec<LayerSpec>)> = vec![
            (vec![12], vec![LayerSpec::dense(5), LayerSpec::dense(3), LayerSpec::SoftmaxOutput { classes: 2 }]),
            (
                vec![12],
                vec![
                    LayerSpec::Reshape { rows: 3, cols: 4 },
                    LayerSpec::conv(2),
                    LayerSpec::MaxPool2D,
                    LayerSpec::Flatten,
                    LayerSpec::SoftmaxOutput { classes: 2 },
                ],
            ),
            (
                vec![12],
                vec![
                    LayerSpec::Reshape { rows: 6, cols: 2 },
                    LayerSpec::lstm(3, true),
                    LayerSpec::lstm(2, false),
                    LayerSpec::SoftmaxOutput { classes: 2 },
                ],
            ),
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for (shape, specs) in stacks {
            let model = NeuralModel::new(shape, specs.clone(), 3).unwrap();
            let x: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..2.0)).collect();
            let y = vec![1.0, 0.0, 0.0, 1.0];
            let mut step = rand::rngs::mock::StepRng::new(0, 1);
            let (_, analytic) = model.chunk_loss_and_grads(&x, &y, 1.0, &mut step);
            let groups: Vec<Vec<Tensor>> = model.layers.iter().map(|l| l.params.clone()).collect();
            let mut k = 0;
            for (li, group) in groups.iter().enumerate() {
                for (pi, tensor) in group.iter().enumerate() {
                    for j in 0..tensor.len() {
                        let shifted = |delta: f64| {
                            let mut g = groups.clone();
                            g[li][pi].data_mut()[j] += delta;
                            let m = NeuralModel::from_parts(model.input_shape.clone(), specs.clone(), g).unwrap();
                            parameter_loss(&m, &x, &y)
                        };
                        let numeric = (shifted(1e-5) - shifted(-1e-5)) / 2e-5;
                        let a = analytic[k];
                        assert!(
                            (a - numeric).abs() <= 1e-6 + 1e-4 * a.abs(),
                            "{}: param {k} analytic {a} numeric {numeric}",
                            specs[li].name()
                        );
                        k += 1;
                    }
                }
            }
            assert_eq!(k, analytic.len());
        }
    }
}
