use super::loss::cross_entropy;
use super::model::{Mode, NeuralModel};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of the cross-entropy input gradient of a
/// single sample, in inference mode.
pub fn finite_diff_gradient(
    model: &NeuralModel,
    input: &Tensor,
    label: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let classes = model.classes();
    let label = label.clone().reshape(vec![1, classes])?;
    let mut shape = vec![1];
    shape.extend_from_slice(model.input_shape());
    let base = input.clone().reshape(shape.clone())?;
    let loss_at = |x: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(shape.clone(), x)?;
        let probs = model.forward(&t, Mode::Infer)?;
        cross_entropy(&probs, &label)
    };
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.data().to_vec();
        let mut minus = base.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        grad.push((loss_at(plus)? - loss_at(minus)?) / (2.0 * h));
    }
    Tensor::new(input.shape().to_vec(), grad)
}

/// Largest elementwise relative error, with entries whose analytic magnitude
/// is below `abs_floor` compared absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if a.abs() < abs_floor {
                diff
            } else {
                diff / a.abs()
            }
        })
        .fold(0.0, f64::max)
}
