use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::profile::{DailyProfile, Label, READINGS_PER_DAY};
use super::theft::{apply_theft_scenario, ScenarioMix, TheftKind, TheftScenario};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Defender,
    Attacker,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Defender => "defender",
            Provenance::Attacker => "attacker",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "defender" => Ok(Provenance::Defender),
            "attacker" => Ok(Provenance::Attacker),
            other => Err(Error::InvalidConfig(format!("unknown side {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub profiles: Vec<DailyProfile>,
    pub labels: Vec<Label>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(profiles: Vec<DailyProfile>, labels: Vec<Label>, provenance: Provenance) -> Result<Self> {
        if profiles.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "labeled dataset",
                expected: vec![profiles.len()],
                found: vec![labels.len()],
            });
        }
        Ok(Self {
            profiles,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `[n, 48]` reading matrix.
    pub fn inputs(&self) -> Tensor {
        let data = self.profiles.iter().flat_map(|p| p.readings().iter().copied()).collect();
        Tensor::new(vec![self.len(), READINGS_PER_DAY], data).expect("consistent shape")
    }

    /// `[n, 2]` one-hot rows, Normal = `[1, 0]`, Theft = `[0, 1]`.
    pub fn targets(&self) -> Tensor {
        let data = self.labels.iter().flat_map(|l| l.one_hot()).collect();
        Tensor::new(vec![self.len(), 2], data).expect("consistent shape")
    }

    pub fn normal_profiles(&self) -> Vec<DailyProfile> {
        self.profiles
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == Label::Normal)
            .map(|(p, _)| *p)
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            profiles: idx.iter().map(|&i| self.profiles[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance,
        }
    }

    /// CSV with columns `r01..r48,label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=READINGS_PER_DAY).map(|i| format!("r{i:02}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (p, l) in self.profiles.iter().zip(&self.labels) {
            let mut rec: Vec<String> = p.readings().iter().map(|v| v.to_string()).collect();
            rec.push(l.as_str().into());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, provenance: Provenance) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut profiles = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != READINGS_PER_DAY + 1 {
                return Err(Error::Format(format!("expected 49 columns, found {}", rec.len())));
            }
            let values: Vec<f64> = rec
                .iter()
                .take(READINGS_PER_DAY)
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad reading {v:?}"))))
                .collect::<Result<_>>()?;
            profiles.push(DailyProfile::from_slice(&values)?);
            labels.push(match &rec[READINGS_PER_DAY] {
                "normal" => Label::Normal,
                "theft" => Label::Theft,
                other => return Err(Error::Format(format!("bad label {other:?}"))),
            });
        }
        Self::new(profiles, labels, provenance)
    }
}

/// Sidecar describing how a dataset file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub provenance: Provenance,
    pub seed: u64,
    pub rows: usize,
    pub normal: usize,
    pub theft: usize,
    pub polluted_fraction: f64,
    pub scenario_mix: String,
    pub scenario_counts: BTreeMap<TheftKind, usize>,
    pub source: String,
}

impl DatasetMetadata {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub struct BuiltDataset {
    pub dataset: LabeledDataset,
    pub scenario_counts: BTreeMap<TheftKind, usize>,
}

/// Samples `total` profiles without replacement, pollutes exactly
/// `round(fraction · total)` of them with scenarios drawn from `mix`, and
/// shuffles the rows.
pub fn build_labeled_dataset(
    profiles: &[DailyProfile],
    total: usize,
    polluted_fraction: f64,
    mix: &ScenarioMix,
    provenance: Provenance,
    rng: &mut dyn RngCore,
) -> Result<BuiltDataset> {
    if total > profiles.len() {
        return Err(Error::InsufficientProfiles {
            needed: total,
            available: profiles.len(),
        });
    }
    if !(0.0..=1.0).contains(&polluted_fraction) {
        return Err(Error::InvalidConfig(format!(
            "polluted fraction {polluted_fraction} outside [0, 1]"
        )));
    }
    let chosen = index::sample(rng, profiles.len(), total).into_vec();
    let polluted = (polluted_fraction * total as f64).round() as usize;
    let mut counts = BTreeMap::new();
    let mut rows = Vec::with_capacity(total);
    for (k, &i) in chosen.iter().enumerate() {
        if k < polluted {
            let kind = mix.sample(rng);
            let scenario = TheftScenario::sample(kind, rng);
            rows.push((apply_theft_scenario(&profiles[i], &scenario, rng)?, Label::Theft));
            *counts.entry(kind).or_insert(0) += 1;
        } else {
            rows.push((profiles[i], Label::Normal));
        }
    }
    rows.shuffle(rng);
    let (profiles, labels) = rows.into_iter().unzip();
    Ok(BuiltDataset {
        dataset: LabeledDataset::new(profiles, labels, provenance)?,
        scenario_counts: counts,
    })
}

/// Random disjoint split with `round(test_fraction · n)` test rows.
pub fn split_dataset(
    dataset: &LabeledDataset,
    test_fraction: f64,
    rng: &mut dyn RngCore,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("split_dataset"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let n = dataset.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (test, train) = order.split_at(n_test);
    Ok((dataset.subset(train), dataset.subset(test)))
}
