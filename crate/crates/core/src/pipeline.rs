//! Stage orchestration: data preparation, training, distillation, attack
//! sweeps and report emission. Every stage writes under the work directory
//! with a content hash of its inputs in the name, and is skipped when that
//! output already exists.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, log_grid, AdversarialBatch, AttackConfig, AttackKind, AttackParams};
use crate::data::{
    build_labeled_dataset, parse_raw_file, regulate_daily, split_dataset, synthesize_with, DailyProfile,
    DatasetMetadata, Label, LabeledDataset, Provenance, ScenarioMix, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    compare_defenses, emit_plot_data, emit_report, mean_profile_l1, run_experiment, write_csv, AttackReportRow,
    CsvRecord, DefenseComparison, ExperimentSpec, ReportFormat, Setting,
};
use crate::models::{distill, evaluate_classifier, train_classifier, ArchitectureId, ClassifierMetrics, DistillConfig, Family};
use crate::nn::{io, NeuralModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Raw,
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "synthetic" => Ok(Source::Synthetic),
            "raw" => Ok(Source::Raw),
            other => Err(Error::InvalidConfig(format!("unknown data source {other:?}"))),
        }
    }
}

/// Everything a run depends on. Loaded from flat `key = value` text, then
/// overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workdir: PathBuf,
    pub out: PathBuf,
    pub data_in: Option<PathBuf>,
    pub source: Source,
    pub seed: u64,
    /// Rows in each of the defender and attacker datasets.
    pub rows: usize,
    pub polluted_fraction: f64,
    pub test_fraction: f64,
    pub scenario_mix: String,
    pub synthetic: SyntheticConfig,
    pub width_scale: f64,
    pub families: Vec<Family>,
    pub distill_families: Vec<Family>,
    pub epochs_fnn: usize,
    pub epochs_cnn: usize,
    pub epochs_rnn: usize,
    pub learning_rate: f64,
    /// Teacher and student rate; logits must grow by about `temperature`.
    pub distill_learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Vectors per attack cell.
    pub n: usize,
    /// Vectors per ssf-iter cell.
    pub ssf_n: usize,
    pub eps_grid: Vec<f64>,
    pub step_max: usize,
    pub size_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
    pub sigma: f64,
    pub max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            out: PathBuf::from("reports"),
            data_in: None,
            source: Source::Synthetic,
            seed: 7,
            rows: 20_000,
            polluted_fraction: 0.5,
            test_fraction: 0.2,
            scenario_mix: ScenarioMix::default().to_string(),
            synthetic: SyntheticConfig::default(),
            width_scale: 0.25,
            families: Family::ALL.to_vec(),
            distill_families: Family::ALL.to_vec(),
            epochs_fnn: 20,
            epochs_cnn: 8,
            epochs_rnn: 16,
            learning_rate: 1e-3,
            distill_learning_rate: 3e-3,
            batch_size: 32,
            temperature: 100.0,
            n: 1_000,
            ssf_n: 1_000,
            eps_grid: log_grid(-2.0, 0.5, 15),
            step_max: 30,
            size_grid: log_grid(-3.0, 0.0, 16),
            alpha_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            u_grid: log_grid(-2.0, 0.0, 9),
            sigma: attacks::DEFAULT_SIGMA,
            max_iter: attacks::DEFAULT_MAX_ITER,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_families(key: &str, value: &str) -> Result<Vec<Family>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let f: Family = part.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("{key}: no families in {value:?}")));
    }
    Ok(out)
}

/// Parses `a,b,c` or `log:lo:hi:count`, the latter giving `count` points
/// from `10^lo` to `10^hi`.
pub fn parse_grid(value: &str) -> Result<Vec<f64>> {
    let value = value.trim();
    if let Some(rest) = value.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidConfig(format!("grid {value:?}: expected log:lo:hi:count")));
        }
        return Ok(log_grid(
            parse_num("grid", parts[0])?,
            parse_num("grid", parts[1])?,
            parse_num("grid", parts[2])?,
        ));
    }
    value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| parse_num("grid", p))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "workdir" => self.workdir = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "data_in" => self.data_in = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "source" => self.source = v.parse()?,
            "seed" => self.seed = parse_num(&key, v)?,
            "rows" | "count" => self.rows = parse_num(&key, v)?,
            "polluted_fraction" => self.polluted_fraction = parse_num(&key, v)?,
            "test_fraction" => self.test_fraction = parse_num(&key, v)?,
            "scenario_mix" => self.scenario_mix = v.parse::<ScenarioMix>()?.to_string(),
            "synth.target_mean_l1" => self.synthetic.target_mean_l1 = parse_num(&key, v)?,
            "synth.total_sigma" => self.synthetic.total_sigma = parse_num(&key, v)?,
            "synth.noise_sigma" => self.synthetic.noise_sigma = parse_num(&key, v)?,
            "synth.away_fraction" => self.synthetic.away_fraction = parse_num(&key, v)?,
            "synth.away_level" => self.synthetic.away_level = parse_num(&key, v)?,
            "synth.away_noise_sigma" => self.synthetic.away_noise_sigma = parse_num(&key, v)?,
            "synth.resolution" => self.synthetic.resolution = parse_num(&key, v)?,
            "width_scale" => self.width_scale = parse_num(&key, v)?,
            "families" => self.families = parse_families(&key, v)?,
            "distill_families" => self.distill_families = parse_families(&key, v)?,
            "epochs" => {
                let e = parse_num(&key, v)?;
                self.epochs_fnn = e;
                self.epochs_cnn = e;
                self.epochs_rnn = e;
            }
            "epochs_fnn" => self.epochs_fnn = parse_num(&key, v)?,
            "epochs_cnn" => self.epochs_cnn = parse_num(&key, v)?,
            "epochs_rnn" => self.epochs_rnn = parse_num(&key, v)?,
            "learning_rate" => self.learning_rate = parse_num(&key, v)?,
            "distill_learning_rate" => self.distill_learning_rate = parse_num(&key, v)?,
            "batch_size" => self.batch_size = parse_num(&key, v)?,
            "temperature" => self.temperature = parse_num(&key, v)?,
            "n" => self.n = parse_num(&key, v)?,
            "ssf_n" => self.ssf_n = parse_num(&key, v)?,
            "eps_grid" => self.eps_grid = parse_grid(v)?,
            "step_max" => self.step_max = parse_num(&key, v)?,
            "size_grid" => self.size_grid = parse_grid(v)?,
            "alpha_grid" => self.alpha_grid = parse_grid(v)?,
            "u_grid" => self.u_grid = parse_grid(v)?,
            "sigma" => self.sigma = parse_num(&key, v)?,
            "max_iter" => self.max_iter = parse_num(&key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.rows < 2 {
            return fail(format!("rows {} must be at least 2", self.rows));
        }
        if !(self.width_scale > 0.0) {
            return fail(format!("width scale {} must be positive", self.width_scale));
        }
        if self.families.is_empty() {
            return fail("no model families selected".into());
        }
        if let Some(f) = self.distill_families.iter().find(|f| !self.families.contains(f)) {
            return fail(format!("distilled family {f} is not among the trained families"));
        }
        if self.n == 0 || self.ssf_n == 0 {
            return fail("vectors per cell must be at least 1".into());
        }
        if self.source == Source::Raw && self.data_in.is_none() {
            return fail("raw source needs data_in".into());
        }
        self.scenario_mix.parse::<ScenarioMix>()?;
        self.train_config(Family::Fnn, Role::Defender, 0).validate()?;
        self.train_config(Family::Fnn, Role::Distilled, 0).validate()?;
        Ok(())
    }

    fn epochs(&self, family: Family) -> usize {
        match family {
            Family::Fnn => self.epochs_fnn,
            Family::Cnn => self.epochs_cnn,
            Family::Rnn => self.epochs_rnn,
        }
    }

    fn train_config(&self, family: Family, role: Role, seed: u64) -> TrainConfig {
        let learning_rate = match role {
            Role::Distilled => self.distill_learning_rate,
            _ => self.learning_rate,
        };
        TrainConfig {
            learning_rate,
            epochs: self.epochs(family),
            batch_size: self.batch_size,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Seed for a named sub-stream of the master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(json))[..16].to_string())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn file_digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Defender,
    Attacker,
    Distilled,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Defender => "defender",
            Role::Attacker => "attacker",
            Role::Distilled => "distilled",
        }
    }

    fn side(self) -> Provenance {
        match self {
            Role::Attacker => Provenance::Attacker,
            Role::Defender | Role::Distilled => Provenance::Defender,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "defender" => Ok(Role::Defender),
            "attacker" => Ok(Role::Attacker),
            "distilled" => Ok(Role::Distilled),
            other => Err(Error::InvalidConfig(format!("unknown model role {other:?}"))),
        }
    }
}

pub fn model_name(family: Family, role: Role) -> String {
    match role {
        Role::Distilled => format!("{family}-defender-distilled"),
        _ => format!("{family}-{role}"),
    }
}

/// Train/test splits for both sides.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dir: PathBuf,
    pub hash: String,
    pub defender_train: LabeledDataset,
    pub defender_test: LabeledDataset,
    pub attacker_train: LabeledDataset,
    pub attacker_test: LabeledDataset,
}

impl PreparedData {
    fn split(&self, side: Provenance) -> (&LabeledDataset, &LabeledDataset) {
        match side {
            Provenance::Defender => (&self.defender_train, &self.defender_test),
            Provenance::Attacker => (&self.attacker_train, &self.attacker_test),
        }
    }

    /// Normal profiles the defender never trained on.
    pub fn held_out_normals(&self) -> Vec<DailyProfile> {
        self.defender_test.normal_profiles()
    }
}

#[derive(Serialize)]
struct DataKey<'a> {
    source: Source,
    data_in: Option<String>,
    data_digest: Option<String>,
    rows: usize,
    polluted_fraction: f64,
    test_fraction: f64,
    scenario_mix: &'a str,
    synthetic: Option<&'a SyntheticConfig>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StageRecord<K> {
    stage: String,
    hash: String,
    key: K,
}

const SPLIT_FILES: [(&str, Provenance, bool); 4] = [
    ("defender_train.csv", Provenance::Defender, false),
    ("defender_test.csv", Provenance::Defender, true),
    ("attacker_train.csv", Provenance::Attacker, false),
    ("attacker_test.csv", Provenance::Attacker, true),
];

/// Runs stages against one configuration. `force` recomputes every stage
/// this pipeline touches.
pub struct Pipeline {
    pub config: RunConfig,
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, force })
    }

    fn cached(&self, marker: &Path) -> bool {
        !self.force && marker.exists()
    }

    /// Normal profile pools for each side, disjoint by construction.
    fn source_pools(&self) -> Result<(Vec<DailyProfile>, Vec<DailyProfile>)> {
        let cfg = &self.config;
        match cfg.source {
            Source::Synthetic => Ok((
                synthesize_with(cfg.rows, derive_seed(cfg.seed, "pool/defender"), &cfg.synthetic)?,
                synthesize_with(cfg.rows, derive_seed(cfg.seed, "pool/attacker"), &cfg.synthetic)?,
            )),
            Source::Raw => {
                let path = cfg.data_in.as_ref().ok_or(Error::InvalidConfig("raw source needs data_in".into()))?;
                let days = regulate_daily(&parse_raw_file(path)?.readings);
                let mut meters: Vec<u32> = days.iter().map(|d| d.meter_id).collect::<BTreeSet<_>>().into_iter().collect();
                meters.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "meters")));
                let defender_meters: BTreeSet<u32> = meters[..meters.len() / 2].iter().copied().collect();
                let (d, a): (Vec<_>, Vec<_>) = days.iter().partition(|d| defender_meters.contains(&d.meter_id));
                log::info!(
                    "raw data: {} meters, {} defender days, {} attacker days",
                    meters.len(),
                    d.len(),
                    a.len()
                );
                Ok((
                    d.into_iter().map(|m| m.profile).collect(),
                    a.into_iter().map(|m| m.profile).collect(),
                ))
            }
        }
    }

    pub fn data_hash(&self) -> Result<String> {
        let cfg = &self.config;
        let (data_in, data_digest) = match (cfg.source, &cfg.data_in) {
            (Source::Raw, Some(p)) => (Some(p.display().to_string()), Some(file_digest(p)?)),
            _ => (None, None),
        };
        content_hash(&self.data_key(data_in, data_digest))
    }

    fn data_key(&self, data_in: Option<String>, data_digest: Option<String>) -> DataKey<'_> {
        let cfg = &self.config;
        DataKey {
            source: cfg.source,
            data_in,
            data_digest,
            rows: cfg.rows,
            polluted_fraction: cfg.polluted_fraction,
            test_fraction: cfg.test_fraction,
            scenario_mix: &cfg.scenario_mix,
            synthetic: (cfg.source == Source::Synthetic).then_some(&cfg.synthetic),
            seed: cfg.seed,
        }
    }

    /// Builds labeled defender and attacker datasets and their splits.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let cfg = &self.config;
        let hash = self.data_hash()?;
        let dir = cfg.workdir.join(format!("data-{hash}"));
        let marker = dir.join("stage.json");
        if self.cached(&marker) {
            log::info!("data {hash}: cached");
            return self.load_data(&dir, hash);
        }
        fs::create_dir_all(&dir)?;
        let mix: ScenarioMix = cfg.scenario_mix.parse()?;
        let (defender_pool, attacker_pool) = self.source_pools()?;
        let source = match cfg.source {
            Source::Synthetic => "synthetic".to_string(),
            Source::Raw => format!("raw:{}", cfg.data_in.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
        };
        for (side, pool) in [(Provenance::Defender, &defender_pool), (Provenance::Attacker, &attacker_pool)] {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("build/{side}")));
            let built = build_labeled_dataset(pool, cfg.rows, cfg.polluted_fraction, &mix, side, &mut rng)?;
            let (train, test) = split_dataset(&built.dataset, cfg.test_fraction, &mut rng)?;
            train.write_csv(&dir.join(format!("{side}_train.csv")))?;
            test.write_csv(&dir.join(format!("{side}_test.csv")))?;
            DatasetMetadata {
                provenance: side,
                seed: cfg.seed,
                rows: built.dataset.len(),
                normal: built.dataset.count(Label::Normal),
                theft: built.dataset.count(Label::Theft),
                polluted_fraction: cfg.polluted_fraction,
                scenario_mix: cfg.scenario_mix.clone(),
                scenario_counts: built.scenario_counts,
                source: source.clone(),
            }
            .write_json(&dir.join(format!("{side}.json")))?;
            log::info!("data {hash}: {side} {} train / {} test rows", train.len(), test.len());
        }
        let (data_in, data_digest) = match (cfg.source, &cfg.data_in) {
            (Source::Raw, Some(p)) => (Some(p.display().to_string()), Some(file_digest(p)?)),
            _ => (None, None),
        };
        write_json(
            &StageRecord {
                stage: "prepare-data".into(),
                hash: hash.clone(),
                key: self.data_key(data_in, data_digest),
            },
            &marker,
        )?;
        self.load_data(&dir, hash)
    }

    fn load_data(&self, dir: &Path, hash: String) -> Result<PreparedData> {
        let mut sets = Vec::with_capacity(4);
        for (file, side, _) in SPLIT_FILES {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::MissingInput(path));
            }
            sets.push(LabeledDataset::read_csv(&path, side)?);
        }
        let mut it = sets.into_iter();
        Ok(PreparedData {
            dir: dir.to_path_buf(),
            hash,
            defender_train: it.next().expect("four splits"),
            defender_test: it.next().expect("four splits"),
            attacker_train: it.next().expect("four splits"),
            attacker_test: it.next().expect("four splits"),
        })
    }

    fn model_key(&self, data_hash: &str, family: Family, role: Role) -> ModelKey {
        let cfg = &self.config;
        let name = model_name(family, role);
        ModelKey {
            name: name.clone(),
            data: data_hash.to_string(),
            width_scale: cfg.width_scale,
            train: cfg.train_config(family, role, derive_seed(cfg.seed, &format!("train/{name}"))),
            temperature: (role == Role::Distilled).then_some(cfg.temperature),
        }
    }

    /// Trains (or loads) one model and scores it on its side's test split.
    pub fn model(&self, data: &PreparedData, family: Family, role: Role) -> Result<TrainedModel> {
        let key = self.model_key(&data.hash, family, role);
        let hash = content_hash(&key)?;
        let dir = self.config.workdir.join("models");
        let path = dir.join(format!("{}-{hash}.mgnn", key.name));
        let record_path = dir.join(format!("{}-{hash}.json", key.name));
        if self.cached(&record_path) {
            let record: ModelRecord = read_json(&record_path)?;
            let model = io::load(&path)?;
            log::info!("{}: cached ({hash})", key.name);
            return Ok(TrainedModel { record, model, path });
        }
        fs::create_dir_all(&dir)?;
        let id = ArchitectureId::new(family, role.side(), self.config.width_scale);
        let (train, test) = data.split(role.side());
        log::info!("{}: training on {} rows for {} epochs", key.name, train.len(), key.train.epochs);
        let started = Instant::now();
        let (model, history) = match role {
            Role::Distilled => {
                let d = distill(&id, train, &key.train, &DistillConfig {
                    temperature: self.config.temperature,
                })?;
                let mut history = d.teacher_history;
                history.extend(d.student_history);
                (d.student, history)
            }
            _ => {
                let out = train_classifier(&id, train, &key.train)?;
                (out.model, out.loss_history)
            }
        };
        let train_seconds = started.elapsed().as_secs_f64();
        let metrics = evaluate_classifier(&model, test)?;
        log::info!(
            "{}: accuracy {:.4}, recall {:.4}, fpr {:.4}",
            key.name,
            metrics.accuracy,
            metrics.recall,
            metrics.false_positive_rate
        );
        io::save(&model, &path)?;
        let record = ModelRecord {
            name: key.name.clone(),
            family,
            role,
            hash,
            model_hash: io::model_hash(&model)?,
            key,
            loss_history: history,
            metrics,
            train_seconds,
        };
        write_json(&record, &record_path)?;
        Ok(TrainedModel { record, model, path })
    }

    /// Every plain defender and attacker in the configured families.
    pub fn train_all(&self) -> Result<(PreparedData, Vec<TrainedModel>)> {
        let data = self.prepare_data()?;
        let mut out = Vec::new();
        for &family in &self.config.families {
            for role in [Role::Defender, Role::Attacker] {
                out.push(self.model(&data, family, role)?);
            }
        }
        Ok((data, out))
    }

    pub fn distill_all(&self) -> Result<(PreparedData, Vec<TrainedModel>)> {
        let data = self.prepare_data()?;
        let mut out = Vec::new();
        for &family in &self.config.distill_families {
            out.push(self.model(&data, family, Role::Distilled)?);
        }
        Ok((data, out))
    }

    fn grid(&self, kinds: &[AttackKind]) -> Vec<AttackConfig> {
        let cfg = &self.config;
        let make = |params| AttackConfig {
            params,
            sigma: cfg.sigma,
            seed: cfg.seed,
        };
        let mut out = Vec::new();
        for kind in kinds {
            match kind {
                AttackKind::Fgsm => out.extend(cfg.eps_grid.iter().map(|&epsilon| make(AttackParams::Fgsm { epsilon }))),
                AttackKind::Fgv => out.extend(cfg.eps_grid.iter().map(|&epsilon| make(AttackParams::Fgv { epsilon }))),
                AttackKind::Deepfool => out.push(make(AttackParams::Deepfool { max_iter: cfg.max_iter })),
                AttackKind::SsfIter => {
                    for &size in &cfg.size_grid {
                        out.extend((1..=cfg.step_max).map(|step| make(AttackParams::SsfIter { step, size })));
                    }
                }
                AttackKind::Va1 => out.extend(cfg.alpha_grid.iter().map(|&alpha| make(AttackParams::Va1 { alpha }))),
                AttackKind::Va2 => out.extend(cfg.u_grid.iter().map(|&u| make(AttackParams::Va2 { u }))),
                AttackKind::InitOnly => out.push(make(AttackParams::InitOnly)),
            }
        }
        out
    }

    /// The experiments a full evaluation runs, in report order.
    pub fn experiment_plan(&self) -> Vec<PlannedExperiment> {
        use AttackKind::*;
        let mut plan = Vec::new();
        for &family in &self.config.families {
            plan.push(PlannedExperiment {
                family,
                defender: Role::Defender,
                surrogate: Role::Defender,
                kinds: vec![Va1, Va2, Fgsm, Fgv, Deepfool, SsfIter],
            });
            plan.push(PlannedExperiment {
                family,
                defender: Role::Defender,
                surrogate: Role::Attacker,
                kinds: vec![Fgsm, Fgv, Deepfool, SsfIter],
            });
            if self.config.distill_families.contains(&family) {
                plan.push(PlannedExperiment {
                    family,
                    defender: Role::Distilled,
                    surrogate: Role::Attacker,
                    kinds: vec![Fgsm, Fgv, Deepfool, SsfIter],
                });
            }
        }
        plan
    }

    /// Runs (or loads) the whole attack evaluation.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let (data, mut models) = self.train_all()?;
        models.extend(self.distill_all()?.1);
        let normal_pool = data.held_out_normals();
        let normal_mean_l1 = mean_profile_l1(&normal_pool)?;
        let cfg = &self.config;
        let key = EvalKey {
            attack_revision: attacks::ATTACK_REVISION,
            models: models.iter().map(|m| m.record.model_hash.clone()).collect(),
            data: data.hash.clone(),
            plan: self
                .experiment_plan()
                .iter()
                .map(|p| format!("{}:{}<-{}:{:?}", p.family, p.defender, p.surrogate, p.kinds))
                .collect(),
            eps_grid: cfg.eps_grid.clone(),
            step_max: cfg.step_max,
            size_grid: cfg.size_grid.clone(),
            alpha_grid: cfg.alpha_grid.clone(),
            u_grid: cfg.u_grid.clone(),
            sigma: cfg.sigma,
            max_iter: cfg.max_iter,
            n: cfg.n,
            ssf_n: cfg.ssf_n,
            seed: cfg.seed,
        };
        let hash = content_hash(&key)?;
        let path = cfg.workdir.join(format!("eval-{hash}.json"));
        if self.cached(&path) {
            log::info!("evaluation {hash}: cached");
            let mut eval: Evaluation = read_json(&path)?;
            eval.models = models.into_iter().map(|m| m.record).collect();
            return Ok(eval);
        }
        let find = |family: Family, role: Role| {
            models
                .iter()
                .find(|m| m.record.family == family && m.record.role == role)
                .ok_or_else(|| Error::MissingInput(PathBuf::from(model_name(family, role))))
        };
        let mut preflights = Vec::new();
        let mut rows = Vec::new();
        for planned in self.experiment_plan() {
            let defender = find(planned.family, planned.defender)?;
            let surrogate = find(planned.family, planned.surrogate)?;
            let (ssf, rest): (Vec<AttackKind>, Vec<AttackKind>) =
                planned.kinds.iter().partition(|&&k| k == AttackKind::SsfIter);
            for (kinds, n) in [(rest, cfg.n), (ssf, cfg.ssf_n)] {
                if kinds.is_empty() {
                    continue;
                }
                let spec = ExperimentSpec {
                    defender: defender.record.name.clone(),
                    surrogate: surrogate.record.name.clone(),
                    grid: self.grid(&kinds),
                    n,
                    normal_mean_l1,
                    seed: cfg.seed,
                };
                log::info!(
                    "experiment {} <- {}: {} cells x {n} vectors",
                    spec.defender,
                    spec.surrogate,
                    spec.grid.len()
                );
                let report = run_experiment(&spec, &defender.model, &surrogate.model, &normal_pool)?;
                preflights.extend(report.preflight);
                rows.extend(report.rows);
            }
        }
        let eval = Evaluation {
            hash,
            normal_mean_l1,
            preflights,
            rows,
            models: models.into_iter().map(|m| m.record).collect(),
        };
        write_json(&eval, &path)?;
        Ok(eval)
    }

    /// Writes the report set into the output directory.
    pub fn report(&self) -> Result<Evaluation> {
        let eval = self.evaluate()?;
        let out = &self.config.out;
        fs::create_dir_all(out)?;
        emit_report(&eval.rows, ReportFormat::Csv, &out.join("report.csv"))?;
        emit_report(&eval.rows, ReportFormat::Json, &out.join("report.json"))?;
        emit_report(&eval.preflights, ReportFormat::Csv, &out.join("preflight.csv"))?;
        let metrics: Vec<MetricsRow> = eval.models.iter().map(MetricsRow::from).collect();
        write_csv(&metrics, &out.join("metrics.csv"))?;

        let distilled_names: Vec<String> = self
            .config
            .distill_families
            .iter()
            .map(|&f| model_name(f, Role::Distilled))
            .collect();
        let plain = |r: &&AttackReportRow| !distilled_names.contains(&r.defender);
        let select = |kind: AttackKind, setting: Option<Setting>, distilled: bool| -> Vec<AttackReportRow> {
            eval.rows
                .iter()
                .filter(|r| r.attack == kind && setting.map_or(true, |s| r.setting == s))
                .filter(|r| plain(r) != distilled)
                .cloned()
                .collect()
        };
        use AttackKind::*;
        let figures: [(&str, Vec<AttackReportRow>); 9] = [
            ("fig2_va1.csv", select(Va1, None, false)),
            ("fig2_va2.csv", select(Va2, None, false)),
            ("fig3_fgsm.csv", select(Fgsm, None, false)),
            ("fig4_fgv.csv", select(Fgv, None, false)),
            ("fig5_ssf_white.csv", select(SsfIter, Some(Setting::White), false)),
            ("fig6_ssf_black.csv", select(SsfIter, Some(Setting::Black), false)),
            ("fig8_fgsm_distilled.csv", select(Fgsm, None, true)),
            ("fig9_fgv_distilled.csv", select(Fgv, None, true)),
            ("fig10_ssf_black_distilled.csv", select(SsfIter, None, true)),
        ];
        for (file, rows) in &figures {
            emit_plot_data(rows, &out.join(file))?;
        }
        let mut table4 = select(Deepfool, None, false);
        table4.extend(select(Deepfool, None, true));
        emit_report(&table4, ReportFormat::Csv, &out.join("table4_deepfool.csv"))?;

        let mut summary = Vec::new();
        for comparison in eval.distillation_comparisons()? {
            write_csv(&comparison.comparison.rows, &out.join(format!("distillation_{}.csv", comparison.family)))?;
            summary.push(comparison.summary());
        }
        write_csv(&summary, &out.join("distillation_summary.csv"))?;
        write_json(
            &RunRecord {
                config: self.portable_config()?,
                evaluation: &eval.hash,
                normal_mean_l1: eval.normal_mean_l1,
                models: eval
                    .models
                    .iter()
                    .map(|m| (m.name.clone(), m.model_hash.clone()))
                    .collect(),
            },
            &out.join("run.json"),
        )?;
        log::info!("reports written to {}", out.display());
        Ok(eval)
    }

    /// The configuration without its output locations, which do not affect
    /// any result.
    fn portable_config(&self) -> Result<serde_json::Value> {
        let mut value = serde_json::to_value(&self.config)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("workdir");
            map.remove("out");
        }
        Ok(value)
    }

    /// Generates one adversarial batch and writes it with its sidecar.
    pub fn attack(&self, request: &AttackRequest) -> Result<(AdversarialBatch, PathBuf)> {
        request.config.validate()?;
        let data = self.prepare_data()?;
        let surrogate = self.model(&data, request.family, request.surrogate)?;
        let hash = content_hash(&(
            attacks::ATTACK_REVISION,
            &request.config,
            request.n,
            &surrogate.record.model_hash,
        ))?;
        let dir = self.config.workdir.join("attacks");
        let stem = format!("{}-{}-{hash}", request.config.kind(), surrogate.record.name);
        let csv = dir.join(format!("{stem}.csv"));
        let sidecar = dir.join(format!("{stem}.json"));
        if self.cached(&sidecar) {
            log::info!("{stem}: cached");
            return Ok((AdversarialBatch::read(&csv, &sidecar)?, csv));
        }
        fs::create_dir_all(&dir)?;
        let batch = attacks::generate_batch(
            &request.config,
            request.n,
            &surrogate.model,
            &surrogate.record.name,
            &data.held_out_normals(),
        )?;
        batch.write_csv(&csv)?;
        batch.write_sidecar(&sidecar, Some(surrogate.record.model_hash.clone()))?;
        Ok((batch, csv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelKey {
    pub name: String,
    pub data: String,
    pub width_scale: f64,
    pub train: TrainConfig,
    pub temperature: Option<f64>,
}

/// Sidecar of a trained model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub family: Family,
    pub role: Role,
    /// Hash of `key`, part of the file name.
    pub hash: String,
    /// SHA-256 of the serialized parameters.
    pub model_hash: String,
    pub key: ModelKey,
    pub loss_history: Vec<f64>,
    /// Scored on the test split of the model's own side.
    pub metrics: ClassifierMetrics,
    /// Wall-clock training time, including the teacher for distilled models.
    #[serde(default)]
    pub train_seconds: f64,
}

pub struct TrainedModel {
    pub record: ModelRecord,
    pub model: NeuralModel,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedExperiment {
    pub family: Family,
    pub defender: Role,
    pub surrogate: Role,
    pub kinds: Vec<AttackKind>,
}

#[derive(Serialize)]
struct EvalKey {
    attack_revision: u32,
    models: Vec<String>,
    data: String,
    plan: Vec<String>,
    eps_grid: Vec<f64>,
    step_max: usize,
    size_grid: Vec<f64>,
    alpha_grid: Vec<f64>,
    u_grid: Vec<f64>,
    sigma: f64,
    max_iter: usize,
    n: usize,
    ssf_n: usize,
    seed: u64,
}

/// All measured cells of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub hash: String,
    pub normal_mean_l1: f64,
    pub preflights: Vec<AttackReportRow>,
    pub rows: Vec<AttackReportRow>,
    #[serde(default, skip_serializing)]
    pub models: Vec<ModelRecord>,
}

pub struct FamilyComparison {
    pub family: Family,
    pub comparison: DefenseComparison,
}

impl FamilyComparison {
    fn summary(&self) -> ComparisonSummary {
        ComparisonSummary {
            family: self.family,
            cells: self.comparison.rows.len(),
            reduced: self.comparison.reduced,
            unchanged: self.comparison.unchanged,
            increased: self.comparison.increased,
            not_worse_fraction: self.comparison.not_worse_fraction(),
        }
    }
}

impl Evaluation {
    /// Rows of one (setting, defender, attack) series.
    pub fn series(&self, setting: Setting, defender: &str, attack: AttackKind) -> Vec<&AttackReportRow> {
        self.rows
            .iter()
            .filter(|r| r.setting == setting && r.defender == defender && r.attack == attack)
            .collect()
    }

    pub fn preflight(&self, defender: &str) -> Option<&AttackReportRow> {
        self.preflights.iter().find(|r| r.defender == defender)
    }

    pub fn model(&self, name: &str) -> Option<&ModelRecord> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Black-box plain versus distilled cells for each distilled family.
    pub fn distillation_comparisons(&self) -> Result<Vec<FamilyComparison>> {
        let families: BTreeSet<Family> = self
            .models
            .iter()
            .filter(|m| m.role == Role::Distilled)
            .map(|m| m.family)
            .collect();
        let mut out = Vec::new();
        for family in families {
            let plain_name = model_name(family, Role::Defender);
            let distilled_name = model_name(family, Role::Distilled);
            let black = |name: &str| -> Vec<AttackReportRow> {
                self.rows
                    .iter()
                    .filter(|r| r.setting == Setting::Black && r.defender == name)
                    .cloned()
                    .collect()
            };
            out.push(FamilyComparison {
                family,
                comparison: compare_defenses(&black(&plain_name), &black(&distilled_name))?,
            });
        }
        Ok(out)
    }

    /// Comparison restricted to one attack kind.
    pub fn distillation_comparison(&self, family: Family, attack: AttackKind) -> Result<DefenseComparison> {
        let pick = |role| -> Vec<AttackReportRow> {
            self.series(Setting::Black, &model_name(family, role), attack)
                .into_iter()
                .cloned()
                .collect()
        };
        compare_defenses(&pick(Role::Defender), &pick(Role::Distilled))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub family: Family,
    pub cells: usize,
    pub reduced: usize,
    pub unchanged: usize,
    pub increased: usize,
    pub not_worse_fraction: f64,
}

impl CsvRecord for ComparisonSummary {
    const COLUMNS: &'static [&'static str] =
        &["family", "cells", "reduced", "unchanged", "increased", "not_worse_fraction"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub family: Family,
    pub role: Role,
    pub accuracy: f64,
    pub false_positive_rate: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub model_hash: String,
}

impl CsvRecord for MetricsRow {
    const COLUMNS: &'static [&'static str] = &[
        "model",
        "family",
        "role",
        "accuracy",
        "false_positive_rate",
        "recall",
        "tp",
        "fp",
        "tn",
        "fn",
        "model_hash",
    ];
}

impl From<&ModelRecord> for MetricsRow {
    fn from(m: &ModelRecord) -> Self {
        Self {
            model: m.name.clone(),
            family: m.family,
            role: m.role,
            accuracy: m.metrics.accuracy,
            false_positive_rate: m.metrics.false_positive_rate,
            recall: m.metrics.recall,
            tp: m.metrics.tp,
            fp: m.metrics.fp,
            tn: m.metrics.tn,
            fn_: m.metrics.fn_,
            model_hash: m.model_hash.clone(),
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: serde_json::Value,
    evaluation: &'a str,
    normal_mean_l1: f64,
    models: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRequest {
    pub family: Family,
    pub surrogate: Role,
    pub config: AttackConfig,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_overrides_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# desk run\nseed = 11\nrows=500\nfamilies = fnn, cnn\neps_grid = log:-1:0:3\n")
            .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.rows, 500);
        assert_eq!(cfg.families, vec![Family::Fnn, Family::Cnn]);
        assert_eq!(cfg.eps_grid.len(), 3);
        assert!((cfg.eps_grid[1] - 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn unknown_key_and_bad_line_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("colour = blue").is_err());
        assert!(cfg.apply_text("seed 3").is_err());
        assert!(cfg.set("rows", "many").is_err());
    }

    #[test]
    fn explicit_grid_lists_parse() {
        assert_eq!(parse_grid("0.1, 0.2,0.3").unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(parse_grid("log:1:2").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(7, "pool/defender"), derive_seed(7, "pool/attacker"));
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
    }

    #[test]
    fn distilled_family_must_be_trained() {
        let mut cfg = RunConfig::default();
        cfg.set("families", "fnn").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("distill_families", "none").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn tiny_pipeline_is_cached_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "rows = 120\nfamilies = fnn\ndistill_families = fnn\nepochs = 1\nwidth_scale = 0.05\n\
             n = 6\nssf_n = 4\neps_grid = 0.1\nstep_max = 2\nsize_grid = 0.01\nalpha_grid = 0.5\nu_grid = 0.1\n",
        )
        .unwrap();
        cfg.workdir = dir.path().join("work");
        cfg.out = dir.path().join("out");
        let first = Pipeline::new(cfg.clone(), false).unwrap().report().unwrap();
        let report = fs::read(cfg.out.join("report.csv")).unwrap();
        let again = Pipeline::new(cfg.clone(), false).unwrap().report().unwrap();
        assert_eq!(first.rows, again.rows);
        assert_eq!(fs::read(cfg.out.join("report.csv")).unwrap(), report);
        // white: va1, va2, fgsm, fgv, deepfool, two ssf; black plain and distilled: five each
        assert_eq!(first.rows.len(), 7 + 5 + 5);
        assert_eq!(first.preflights.len(), 6);
        assert!(first.rows.iter().all(|r| r.recall + r.bypass == 1.0));
        for file in ["metrics.csv", "fig5_ssf_white.csv", "table4_deepfool.csv", "distillation_fnn.csv", "run.json"] {
            assert!(cfg.out.join(file).exists(), "{file}");
        }
    }
}
