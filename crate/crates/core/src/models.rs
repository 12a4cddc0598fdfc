//! The six detector architectures (FNN/CNN/RNN for defender and attacker),
//! classifier metrics and temperature distillation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Label, LabeledDataset, Provenance, READINGS_PER_DAY};
use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, Mode, NeuralModel, Tensor, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fnn,
    Cnn,
    Rnn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Fnn, Family::Cnn, Family::Rnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Fnn => "fnn",
            Family::Cnn => "cnn",
            Family::Rnn => "rnn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureId {
    pub family: Family,
    pub side: Provenance,
    /// Multiplier on the reference layer widths (1.0 = full size).
    pub width_scale: f64,
}

const DROPOUT: f64 = 0.25;

impl ArchitectureId {
    pub fn new(family: Family, side: Provenance, width_scale: f64) -> Self {
        Self {
            family,
            side,
            width_scale,
        }
    }

    /// `fnn-defender`, `cnn-attacker`, ...
    pub fn name(&self) -> String {
        format!("{}-{}", self.family, self.side)
    }

    fn scaled(&self, units: usize) -> usize {
        ((units as f64 * self.width_scale).round() as usize).max(2)
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "width scale {} must be positive",
                self.width_scale
            )));
        }
        let defender = self.side == Provenance::Defender;
        let s = |u: usize| self.scaled(u);
        let dropout = LayerSpec::Dropout { rate: DROPOUT };
        let output = LayerSpec::SoftmaxOutput { classes: 2 };
        Ok(match self.family {
            Family::Fnn => {
                let w: [usize; 5] = if defender {
                    [128, 256, 128, 64, 32]
                } else {
                    [168, 328, 168, 128, 64]
                };
                vec![
                    LayerSpec::dense(s(w[0])),
                    LayerSpec::dense(s(w[1])),
                    LayerSpec::dense(s(w[2])),
                    LayerSpec::dense(s(w[3])),
                    dropout.clone(),
                    LayerSpec::dense(s(w[4])),
                    dropout,
                    output,
                ]
            }
            Family::Rnn => {
                let w: [usize; 3] = if defender { [256, 168, 128] } else { [246, 148, 108] };
                vec![
                    LayerSpec::Reshape {
                        rows: READINGS_PER_DAY,
                        cols: 1,
                    },
                    LayerSpec::lstm(s(w[0]), true),
                    dropout.clone(),
                    LayerSpec::lstm(s(w[1]), true),
                    dropout,
                    LayerSpec::lstm(s(w[2]), false),
                    output,
                ]
            }
            Family::Cnn => {
                let w: [usize; 3] = if defender { [128, 128, 32] } else { [156, 214, 48] };
                vec![
                    LayerSpec::Reshape { rows: 6, cols: 8 },
                    LayerSpec::conv(s(w[0])),
                    LayerSpec::conv(s(w[1])),
                    LayerSpec::MaxPool2D,
                    dropout,
                    LayerSpec::Flatten,
                    LayerSpec::dense(s(w[2])),
                    output,
                ]
            }
        })
    }
}

pub fn build_model(id: &ArchitectureId, seed: u64) -> Result<NeuralModel> {
    NeuralModel::new(vec![READINGS_PER_DAY], id.layer_specs()?, seed)
}

/// Argmax decision; exact ties go to Theft.
pub fn classify(model: &NeuralModel, inputs: &Tensor) -> Result<Vec<Label>> {
    let probs = model.forward(inputs, Mode::Infer)?;
    Ok((0..probs.rows())
        .map(|i| {
            let p = probs.row(i);
            if p[1] >= p[0] {
                Label::Theft
            } else {
                Label::Normal
            }
        })
        .collect())
}

/// Confusion counts with Theft as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub false_positive_rate: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassifierMetrics {
    /// Rates with an empty denominator are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            false_positive_rate: ratio(fp, fp + tn),
            recall: ratio(tp, tp + fn_),
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

pub fn metrics_from_predictions(truth: &[Label], predicted: &[Label]) -> ClassifierMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (t, p) in truth.iter().zip(predicted) {
        match (t, p) {
            (Label::Theft, Label::Theft) => tp += 1,
            (Label::Normal, Label::Theft) => fp += 1,
            (Label::Normal, Label::Normal) => tn += 1,
            (Label::Theft, Label::Normal) => fn_ += 1,
        }
    }
    ClassifierMetrics::from_counts(tp, fp, tn, fn_)
}

pub fn evaluate_classifier(model: &NeuralModel, dataset: &LabeledDataset) -> Result<ClassifierMetrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluate_classifier"));
    }
    let predicted = classify(model, &dataset.inputs())?;
    Ok(metrics_from_predictions(&dataset.labels, &predicted))
}

pub fn train_classifier(
    id: &ArchitectureId,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = build_model(id, config.seed)?;
    nn::train(&model, &dataset.inputs(), &dataset.targets(), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 100.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Distilled {
    pub teacher: NeuralModel,
    /// Same architecture as the teacher; deploy at temperature 1.
    pub student: NeuralModel,
    pub teacher_history: Vec<f64>,
    pub student_history: Vec<f64>,
}

/// Trains a teacher at temperature `T` on hard labels, then a student of the
/// same architecture at `T` on the teacher's temperature-`T` probabilities.
pub fn distill(
    id: &ArchitectureId,
    dataset: &LabeledDataset,
    train: &TrainConfig,
    cfg: &DistillConfig,
) -> Result<Distilled> {
    if !(cfg.temperature >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "distillation temperature {} must be at least 1",
            cfg.temperature
        )));
    }
    let hot = TrainConfig {
        temperature: cfg.temperature,
        ..train.clone()
    };
    let inputs = dataset.inputs();
    let teacher = nn::train(&build_model(id, train.seed)?, &inputs, &dataset.targets(), &hot)?;
    let soft = teacher
        .model
        .forward_at_temperature(&inputs, Mode::Infer, cfg.temperature)?;
    let student_init = build_model(id, train.seed.wrapping_add(1))?;
    let student_cfg = TrainConfig {
        seed: train.seed.wrapping_add(1),
        ..hot
    };
    let student = nn::train(&student_init, &inputs, &soft, &student_cfg)?;
    Ok(Distilled {
        teacher: teacher.model,
        student: student.model,
        teacher_history: teacher.loss_history,
        student_history: student.loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn dense_units(specs: &[LayerSpec]) -> Vec<usize> {
        specs
            .iter()
            .filter_map(|s| match s {
                LayerSpec::Dense { units, .. } | LayerSpec::Lstm { units, .. } => Some(*units),
                LayerSpec::Conv2D { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fnn_defender_matches_reference_stack() {
        let id = ArchitectureId::new(Family::Fnn, Provenance::Defender, 1.0);
        let specs = id.layer_specs().unwrap();
        assert_eq!(
            specs,
            vec![
                LayerSpec::Dense { units: 128, activation: Activation::Relu },
                LayerSpec::dense(256),
                LayerSpec::dense(128),
                LayerSpec::dense(64),
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::dense(32),
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::SoftmaxOutput { classes: 2 },
            ]
        );
        let model = build_model(&id, 0).unwrap();
        assert_eq!(model.input_shape(), &[48]);
    }

    #[test]
    fn cnn_attacker_matches_reference_stack() {
        let id = ArchitectureId::new(Family::Cnn, Provenance::Attacker, 1.0);
        let specs = id.layer_specs().unwrap();
        assert_eq!(specs[0], LayerSpec::Reshape { rows: 6, cols: 8 });
        assert_eq!(specs[3], LayerSpec::MaxPool2D);
        assert!(matches!(specs[4], LayerSpec::Dropout { .. }));
        assert_eq!(specs[5], LayerSpec::Flatten);
        assert_eq!(dense_units(&specs), vec![156, 214, 48]);
        assert_eq!(specs.last(), Some(&LayerSpec::SoftmaxOutput { classes: 2 }));
    }

    #[test]
    fn width_scale_rounds_units() {
        let id = ArchitectureId::new(Family::Rnn, Provenance::Defender, 0.125);
        assert_eq!(dense_units(&id.layer_specs().unwrap()), vec![32, 21, 16]);
        let tiny = ArchitectureId::new(Family::Fnn, Provenance::Defender, 0.001);
        assert!(dense_units(&tiny.layer_specs().unwrap()).iter().all(|&u| u == 2));
    }

    #[test]
    fn build_is_deterministic() {
        let id = ArchitectureId::new(Family::Cnn, Provenance::Defender, 0.05);
        assert_eq!(build_model(&id, 9).unwrap(), build_model(&id, 9).unwrap());
        assert_ne!(build_model(&id, 9).unwrap(), build_model(&id, 10).unwrap());
    }

    #[test]
    fn metric_identities() {
        let truth = [Label::Theft, Label::Theft, Label::Normal, Label::Normal];
        let perfect = metrics_from_predictions(&truth, &truth);
        assert_eq!((perfect.accuracy, perfect.false_positive_rate, perfect.recall), (1.0, 0.0, 1.0));
        let always_normal = metrics_from_predictions(&truth, &[Label::Normal; 4]);
        assert_eq!(
            (always_normal.accuracy, always_normal.false_positive_rate, always_normal.recall),
            (0.5, 0.0, 0.0)
        );
    }
}
