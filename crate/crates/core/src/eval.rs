//! Attack experiments: recall and cost measurement over attack grids,
//! plain-versus-distilled comparison, and report emission.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AdversarialBatch, AttackConfig, AttackKind, AttackParams};
use crate::data::{DailyProfile, Label};
use crate::error::{Error, Result};
use crate::models::classify;
use crate::nn::{NeuralModel, Tensor};

/// Init-only recall expected from any trained defender.
pub const PREFLIGHT_RECALL: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    White,
    Black,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::White => "white",
            Setting::Black => "black",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub defender: String,
    /// Equal to `defender` for white-box experiments.
    pub surrogate: String,
    pub grid: Vec<AttackConfig>,
    /// Vectors generated per grid cell.
    pub n: usize,
    /// Mean L1 of the normal test profiles, the cost reference.
    pub normal_mean_l1: f64,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn setting(&self) -> Setting {
        if self.surrogate == self.defender {
            Setting::White
        } else {
            Setting::Black
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("vectors per cell must be at least 1".into()));
        }
        if !(self.normal_mean_l1 > 0.0 && self.normal_mean_l1.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "normal mean L1 {} must be positive",
                self.normal_mean_l1
            )));
        }
        self.grid.iter().try_for_each(AttackConfig::validate)
    }
}

/// One grid cell's outcome. Parameters irrelevant to the attack are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReportRow {
    pub setting: Setting,
    pub defender: String,
    pub attack: AttackKind,
    pub surrogate: String,
    pub epsilon: Option<f64>,
    pub step: Option<usize>,
    pub size: Option<f64>,
    pub sigma: f64,
    pub max_iter: Option<usize>,
    pub alpha: Option<f64>,
    pub u: Option<f64>,
    pub recall: f64,
    pub bypass: f64,
    pub avg_l1: f64,
    /// `avg_l1` over the normal-set mean L1.
    pub avg_l1_frac: f64,
    pub n: usize,
    pub seed: u64,
}

impl AttackReportRow {
    fn new(spec: &ExperimentSpec, config: &AttackConfig, recall: f64, avg_l1: f64, n: usize) -> Self {
        let mut row = Self {
            setting: spec.setting(),
            defender: spec.defender.clone(),
            attack: config.kind(),
            surrogate: spec.surrogate.clone(),
            epsilon: None,
            step: None,
            size: None,
            sigma: config.sigma,
            max_iter: None,
            alpha: None,
            u: None,
            recall,
            bypass: 1.0 - recall,
            avg_l1,
            avg_l1_frac: avg_l1 / spec.normal_mean_l1,
            n,
            seed: config.seed,
        };
        match config.params {
            AttackParams::Fgsm { epsilon } | AttackParams::Fgv { epsilon } => row.epsilon = Some(epsilon),
            AttackParams::Deepfool { max_iter } => row.max_iter = Some(max_iter),
            AttackParams::SsfIter { step, size } => {
                row.step = Some(step);
                row.size = Some(size);
            }
            AttackParams::Va1 { alpha } => row.alpha = Some(alpha),
            AttackParams::Va2 { u } => row.u = Some(u),
            AttackParams::InitOnly => {}
        }
        row
    }

    /// Rebuilds the attack configuration this row was measured with.
    pub fn config(&self) -> Result<AttackConfig> {
        let missing = |field: &str| Error::Format(format!("{} row lacks {field}", self.attack));
        let params = match self.attack {
            AttackKind::Fgsm => AttackParams::Fgsm {
                epsilon: self.epsilon.ok_or_else(|| missing("epsilon"))?,
            },
            AttackKind::Fgv => AttackParams::Fgv {
                epsilon: self.epsilon.ok_or_else(|| missing("epsilon"))?,
            },
            AttackKind::Deepfool => AttackParams::Deepfool {
                max_iter: self.max_iter.ok_or_else(|| missing("max_iter"))?,
            },
            AttackKind::SsfIter => AttackParams::SsfIter {
                step: self.step.ok_or_else(|| missing("step"))?,
                size: self.size.ok_or_else(|| missing("size"))?,
            },
            AttackKind::Va1 => AttackParams::Va1 {
                alpha: self.alpha.ok_or_else(|| missing("alpha"))?,
            },
            AttackKind::Va2 => AttackParams::Va2 {
                u: self.u.ok_or_else(|| missing("u"))?,
            },
            AttackKind::InitOnly => AttackParams::InitOnly,
        };
        Ok(AttackConfig {
            params,
            sigma: self.sigma,
            seed: self.seed,
        })
    }

    /// Short cell label such as `fgsm eps=0.1`.
    pub fn cell(&self) -> String {
        cell_label(&self.config().unwrap_or(AttackConfig::new(AttackParams::InitOnly, self.seed)))
    }
}

fn cell_label(config: &AttackConfig) -> String {
    match config.params {
        AttackParams::Fgsm { epsilon } | AttackParams::Fgv { epsilon } => {
            format!("{} eps={epsilon}", config.kind())
        }
        AttackParams::Deepfool { max_iter } => format!("deepfool max_iter={max_iter}"),
        AttackParams::SsfIter { step, size } => format!("ssf-iter step={step} size={size}"),
        AttackParams::Va1 { alpha } => format!("va1 alpha={alpha}"),
        AttackParams::Va2 { u } => format!("va2 u={u}"),
        AttackParams::InitOnly => format!("init-only sigma={}", config.sigma),
    }
}

/// Fraction of vectors the defender still flags as Theft.
pub fn measure_recall(defender: &NeuralModel, vectors: &[Vec<f64>]) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::EmptyDataset("measure_recall"));
    }
    let labels = classify(defender, &Tensor::from_rows(vectors)?)?;
    Ok(recall_of(&labels))
}

/// Recall over predictions for all-Theft ground truth.
pub fn recall_of(predicted: &[Label]) -> f64 {
    predicted.iter().filter(|&&l| l == Label::Theft).count() as f64 / predicted.len() as f64
}

/// Mean over rows of the row sum.
pub fn average_l1(vectors: &[Vec<f64>]) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::EmptyDataset("average_l1"));
    }
    Ok(vectors.iter().map(|v| v.iter().sum::<f64>()).sum::<f64>() / vectors.len() as f64)
}

pub fn mean_profile_l1(profiles: &[DailyProfile]) -> Result<f64> {
    if profiles.is_empty() {
        return Err(Error::EmptyDataset("mean_profile_l1"));
    }
    Ok(profiles.iter().map(DailyProfile::l1).sum::<f64>() / profiles.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Init-only cell; absent for an empty grid.
    pub preflight: Option<AttackReportRow>,
    pub rows: Vec<AttackReportRow>,
}

fn with_cell<T>(config: &AttackConfig, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Cell {
        cell: cell_label(config),
        source: Box::new(e),
    })
}

/// Runs every grid cell: `n` vectors from the surrogate, scored by the
/// defender. In black-box mode the defender's gradient counter must not move.
/// ssf-iter cells sharing size, σ and seed reuse one trajectory.
pub fn run_experiment(
    spec: &ExperimentSpec,
    defender: &NeuralModel,
    surrogate: &NeuralModel,
    normal_pool: &[DailyProfile],
) -> Result<ExperimentReport> {
    spec.validate()?;
    if spec.grid.is_empty() {
        return Ok(ExperimentReport {
            preflight: None,
            rows: Vec::new(),
        });
    }
    let calls_before = defender.gradient_calls();
    let score = |config: &AttackConfig, batch: &AdversarialBatch| -> Result<AttackReportRow> {
        let recall = with_cell(config, measure_recall(defender, &batch.vectors))?;
        let l1 = with_cell(config, average_l1(&batch.vectors))?;
        Ok(AttackReportRow::new(spec, config, recall, l1, batch.len()))
    };

    let init = AttackConfig {
        params: AttackParams::InitOnly,
        sigma: spec.grid[0].sigma,
        seed: spec.seed,
    };
    let batch = with_cell(&init, attacks::generate_batch(&init, spec.n, surrogate, &spec.surrogate, normal_pool))?;
    let preflight = score(&init, &batch)?;
    if preflight.recall < PREFLIGHT_RECALL {
        log::warn!(
            "{}: init-only recall {} below {PREFLIGHT_RECALL}",
            spec.defender,
            preflight.recall
        );
    }

    let mut rows: Vec<Option<AttackReportRow>> = vec![None; spec.grid.len()];
    let mut ssf_groups: BTreeMap<(u64, u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, config) in spec.grid.iter().enumerate() {
        if let AttackParams::SsfIter { size, .. } = config.params {
            ssf_groups
                .entry((size.to_bits(), config.sigma.to_bits(), config.seed))
                .or_default()
                .push(i);
            continue;
        }
        let batch = with_cell(
            config,
            attacks::generate_batch(config, spec.n, surrogate, &spec.surrogate, normal_pool),
        )?;
        rows[i] = Some(score(config, &batch)?);
    }
    for ((size, sigma, seed), cells) in ssf_groups {
        let steps: Vec<usize> = cells
            .iter()
            .map(|&i| match spec.grid[i].params {
                AttackParams::SsfIter { step, .. } => step,
                _ => unreachable!("grouped ssf-iter cells"),
            })
            .collect();
        let first = &spec.grid[cells[0]];
        let batches = with_cell(
            first,
            attacks::generate_ssf_sweep(
                f64::from_bits(size),
                &steps,
                f64::from_bits(sigma),
                seed,
                spec.n,
                surrogate,
                &spec.surrogate,
            ),
        )?;
        for (&i, batch) in cells.iter().zip(&batches) {
            rows[i] = Some(score(&spec.grid[i], batch)?);
        }
    }

    if spec.setting() == Setting::Black {
        let calls = defender.gradient_calls() - calls_before;
        if calls != 0 {
            return Err(Error::AuditViolation {
                defender: spec.defender.clone(),
                calls,
            });
        }
    }
    Ok(ExperimentReport {
        preflight: Some(preflight),
        rows: rows.into_iter().map(|r| r.expect("every cell scored")).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub cell: String,
    pub plain_bypass: f64,
    pub distilled_bypass: f64,
    pub delta_bypass: f64,
    pub plain_avg_l1: f64,
    pub distilled_avg_l1: f64,
    pub delta_avg_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseComparison {
    pub rows: Vec<ComparisonRow>,
    /// Cells where distillation lowered the bypass rate.
    pub reduced: usize,
    pub unchanged: usize,
    pub increased: usize,
}

impl DefenseComparison {
    /// Fraction of cells where the distilled bypass rate is at most the plain one.
    pub fn not_worse_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        (self.reduced + self.unchanged) as f64 / self.rows.len() as f64
    }
}

/// Per-cell deltas (distilled minus plain). Both reports must cover the same
/// attack configurations in the same order.
pub fn compare_defenses(
    plain: &[AttackReportRow],
    distilled: &[AttackReportRow],
) -> Result<DefenseComparison> {
    if plain.len() != distilled.len() {
        return Err(Error::GridMismatch(plain.len().min(distilled.len())));
    }
    let mut out = DefenseComparison {
        rows: Vec::with_capacity(plain.len()),
        reduced: 0,
        unchanged: 0,
        increased: 0,
    };
    for (i, (p, d)) in plain.iter().zip(distilled).enumerate() {
        if p.config()? != d.config()? {
            return Err(Error::GridMismatch(i));
        }
        let delta = d.bypass - p.bypass;
        match delta.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Less) => out.reduced += 1,
            Some(std::cmp::Ordering::Equal) => out.unchanged += 1,
            _ => out.increased += 1,
        }
        out.rows.push(ComparisonRow {
            cell: p.cell(),
            plain_bypass: p.bypass,
            distilled_bypass: d.bypass,
            delta_bypass: delta,
            plain_avg_l1: p.avg_l1,
            distilled_avg_l1: d.avg_l1,
            delta_avg_l1: d.avg_l1 - p.avg_l1,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_report(rows: &[AttackReportRow], format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Csv => write_csv(rows, path),
        ReportFormat::Json => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, rows)?;
            w.write_all(b"\n")?;
            w.flush()?;
            Ok(())
        }
    }
}

pub fn parse_report(format: ReportFormat, path: &Path) -> Result<Vec<AttackReportRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    match format {
        ReportFormat::Csv => read_csv(path),
        ReportFormat::Json => Ok(serde_json::from_reader(File::open(path)?)?),
    }
}

/// A row type with a fixed CSV column order matching its serde fields.
pub trait CsvRecord: Serialize {
    const COLUMNS: &'static [&'static str];
}

impl CsvRecord for AttackReportRow {
    const COLUMNS: &'static [&'static str] = &REPORT_COLUMNS;
}

impl CsvRecord for ComparisonRow {
    const COLUMNS: &'static [&'static str] = &COMPARISON_COLUMNS;
}

impl CsvRecord for PlotPoint {
    const COLUMNS: &'static [&'static str] = &PLOT_COLUMNS;
}

/// Writes rows as CSV, emitting the header even when there are none.
pub fn write_csv<T: CsvRecord>(rows: &[T], path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(T::COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub const REPORT_COLUMNS: [&str; 17] = [
    "setting",
    "defender",
    "attack",
    "surrogate",
    "epsilon",
    "step",
    "size",
    "sigma",
    "max_iter",
    "alpha",
    "u",
    "recall",
    "bypass",
    "avg_l1",
    "avg_l1_frac",
    "n",
    "seed",
];

const COMPARISON_COLUMNS: [&str; 7] = [
    "cell",
    "plain_bypass",
    "distilled_bypass",
    "delta_bypass",
    "plain_avg_l1",
    "distilled_avg_l1",
    "delta_avg_l1",
];

const PLOT_COLUMNS: [&str; 10] = [
    "series", "setting", "defender", "attack", "x_name", "x", "y_name", "y", "recall", "avg_l1",
];

fn read_csv(path: &Path) -> Result<Vec<AttackReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One point of a figure series: `x` is the swept parameter, `y` the second
/// axis of two-dimensional sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub setting: Setting,
    pub defender: String,
    pub attack: AttackKind,
    pub x_name: String,
    pub x: f64,
    pub y_name: Option<String>,
    pub y: Option<f64>,
    pub recall: f64,
    pub avg_l1: f64,
}

/// Groups rows by (setting, defender, attack) in order of first appearance.
pub fn plot_points(rows: &[AttackReportRow]) -> Vec<PlotPoint> {
    let mut order: Vec<(Setting, String, AttackKind)> = Vec::new();
    let mut groups: BTreeMap<(Setting, String, AttackKind), Vec<&AttackReportRow>> = BTreeMap::new();
    for row in rows {
        let key = (row.setting, row.defender.clone(), row.attack);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    let mut out = Vec::with_capacity(rows.len());
    for key in order {
        let series = format!("{}/{}/{}", key.0, key.1, key.2);
        for row in &groups[&key] {
            let (x_name, x, y_name, y) = match row.attack {
                AttackKind::Fgsm | AttackKind::Fgv => ("epsilon", row.epsilon.unwrap_or(0.0), None, None),
                AttackKind::SsfIter => (
                    "size",
                    row.size.unwrap_or(0.0),
                    Some("step".to_string()),
                    row.step.map(|s| s as f64),
                ),
                AttackKind::Va1 => ("alpha", row.alpha.unwrap_or(0.0), None, None),
                AttackKind::Va2 => ("u", row.u.unwrap_or(0.0), None, None),
                AttackKind::Deepfool => ("max_iter", row.max_iter.unwrap_or(0) as f64, None, None),
                AttackKind::InitOnly => ("sigma", row.sigma, None, None),
            };
            out.push(PlotPoint {
                series: series.clone(),
                setting: row.setting,
                defender: row.defender.clone(),
                attack: row.attack,
                x_name: x_name.to_string(),
                x,
                y_name,
                y,
                recall: row.recall,
                avg_l1: row.avg_l1,
            });
        }
    }
    out
}

pub fn emit_plot_data(rows: &[AttackReportRow], path: &Path) -> Result<()> {
    write_csv(&plot_points(rows), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn spec(grid: Vec<AttackConfig>, surrogate: &str) -> ExperimentSpec {
        ExperimentSpec {
            defender: "def".into(),
            surrogate: surrogate.into(),
            grid,
            n: 8,
            normal_mean_l1: 30.0,
            seed: 1,
        }
    }

    fn model(seed: u64) -> NeuralModel {
        NeuralModel::new(
            vec![48],
            vec![LayerSpec::dense(6), LayerSpec::SoftmaxOutput { classes: 2 }],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn recall_examples() {
        use Label::*;
        assert_eq!(recall_of(&[Theft, Theft]), 1.0);
        assert_eq!(recall_of(&[Normal, Normal]), 0.0);
        assert_eq!(recall_of(&[Theft, Normal, Theft, Theft]), 0.75);
    }

    #[test]
    fn average_l1_examples() {
        assert_eq!(average_l1(&[vec![1.0; 48], vec![1.0; 48]]).unwrap(), 48.0);
        assert_eq!(average_l1(&[vec![0.0; 48]]).unwrap(), 0.0);
        assert!(average_l1(&[]).is_err());
    }

    #[test]
    fn empty_grid_gives_empty_report() {
        let m = model(0);
        let report = run_experiment(&spec(vec![], "def"), &m, &m, &[]).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.preflight.is_none());
    }

    #[test]
    fn black_box_leaves_defender_untouched() {
        let def = model(0);
        let sur = model(1);
        let grid = vec![
            AttackConfig::new(AttackParams::Fgsm { epsilon: 0.1 }, 1),
            AttackConfig::new(AttackParams::SsfIter { step: 3, size: 0.01 }, 1),
            AttackConfig::new(AttackParams::SsfIter { step: 1, size: 0.01 }, 1),
        ];
        let report = run_experiment(&spec(grid, "sur"), &def, &sur, &[]).unwrap();
        assert_eq!(def.gradient_calls(), 0);
        assert!(sur.gradient_calls() > 0);
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[1].step, Some(3));
        for row in &report.rows {
            assert_eq!(row.recall + row.bypass, 1.0);
            assert_eq!(row.setting, Setting::Black);
        }
    }

    #[test]
    fn black_box_audit_detects_defender_gradients() {
        let def = model(0);
        let grid = vec![AttackConfig::new(AttackParams::Fgsm { epsilon: 0.1 }, 1)];
        // Same model object posing as a distinct surrogate.
        let err = run_experiment(&spec(grid, "sur"), &def, &def, &[]).unwrap_err();
        assert!(matches!(err, Error::AuditViolation { .. }));
    }

    #[test]
    fn identical_reports_compare_to_zero() {
        let m = model(0);
        let grid = vec![
            AttackConfig::new(AttackParams::Fgv { epsilon: 0.5 }, 2),
            AttackConfig::new(AttackParams::Va2 { u: 0.2 }, 2),
        ];
        let report = run_experiment(&spec(grid, "def"), &m, &m, &[]).unwrap();
        let cmp = compare_defenses(&report.rows, &report.rows).unwrap();
        assert!(cmp.rows.iter().all(|r| r.delta_bypass == 0.0 && r.delta_avg_l1 == 0.0));
        assert_eq!(cmp.unchanged, 2);
        assert!(compare_defenses(&report.rows, &report.rows[..1]).is_err());
    }
}
