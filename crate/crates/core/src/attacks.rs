//! Adversarial measurement generators. Every output is a nonnegative
//! 48-reading vector aimed at being classified Normal.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DailyProfile, Label, READINGS_PER_DAY};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Mode, NeuralModel, Tensor};

pub const DEFAULT_SIGMA: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Gradients with a smaller norm are treated as vanished.
pub const GRADIENT_FLOOR: f64 = 1e-12;
/// Relative overshoot applied to every DeepFool step.
pub const DEEPFOOL_OVERSHOOT: f64 = 0.02;
/// Smallest logit margin a DeepFool step aims to remove.
const TIE_MARGIN: f64 = 1e-9;
/// Changes whenever attack outputs change for identical inputs, so cached
/// batches and evaluations are recomputed.
pub const ATTACK_REVISION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Fgv,
    Deepfool,
    SsfIter,
    Va1,
    Va2,
    InitOnly,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Fgsm,
        AttackKind::Fgv,
        AttackKind::Deepfool,
        AttackKind::SsfIter,
        AttackKind::Va1,
        AttackKind::Va2,
        AttackKind::InitOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Fgv => "fgv",
            AttackKind::Deepfool => "deepfool",
            AttackKind::SsfIter => "ssf-iter",
            AttackKind::Va1 => "va1",
            AttackKind::Va2 => "va2",
            AttackKind::InitOnly => "init-only",
        }
    }

    /// Whether the attack queries model gradients.
    pub fn uses_gradients(self) -> bool {
        matches!(
            self,
            AttackKind::Fgsm | AttackKind::Fgv | AttackKind::Deepfool | AttackKind::SsfIter
        )
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack {s:?}")))
    }
}

/// Parameters of one attack; only the fields relevant to the kind exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackParams {
    Fgsm { epsilon: f64 },
    Fgv { epsilon: f64 },
    Deepfool { max_iter: usize },
    SsfIter { step: usize, size: f64 },
    Va1 { alpha: f64 },
    Va2 { u: f64 },
    InitOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub params: AttackParams,
    /// Spread of the Gaussian starting point.
    pub sigma: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(params: AttackParams, seed: u64) -> Self {
        Self {
            params,
            sigma: DEFAULT_SIGMA,
            seed,
        }
    }

    pub fn kind(&self) -> AttackKind {
        match self.params {
            AttackParams::Fgsm { .. } => AttackKind::Fgsm,
            AttackParams::Fgv { .. } => AttackKind::Fgv,
            AttackParams::Deepfool { .. } => AttackKind::Deepfool,
            AttackParams::SsfIter { .. } => AttackKind::SsfIter,
            AttackParams::Va1 { .. } => AttackKind::Va1,
            AttackParams::Va2 { .. } => AttackKind::Va2,
            AttackParams::InitOnly => AttackKind::InitOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be nonnegative", self.sigma));
        }
        match self.params {
            AttackParams::Fgsm { epsilon } | AttackParams::Fgv { epsilon }
                if !(epsilon > 0.0 && epsilon.is_finite()) =>
            {
                bad(format!("epsilon {epsilon} must be positive"))
            }
            AttackParams::Deepfool { max_iter: 0 } => bad("max_iter must be at least 1".into()),
            AttackParams::SsfIter { size, .. } if !(size > 0.0 && size.is_finite()) => {
                bad(format!("size {size} must be positive"))
            }
            AttackParams::Va1 { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                bad(format!("alpha {alpha} outside (0, 1]"))
            }
            AttackParams::Va2 { u } if !(u > 0.0 && u.is_finite()) => {
                bad(format!("u {u} must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Generator for vector `index` of a batch: the master seed on its own stream.
pub fn vector_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn clip_nonnegative(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn clip_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn ensure_finite(v: &[f64], context: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Clipped i.i.d. Gaussian(0, σ²) draws.
pub fn random_init(n: usize, sigma: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidConfig(format!("sigma {sigma}: {e}")))?;
    Ok((0..n).map(|_| normal.sample(rng).max(0.0)).collect())
}

fn theft_targets(rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * 2);
    for _ in 0..rows {
        data.extend_from_slice(&Label::Theft.one_hot());
    }
    Tensor::new(vec![rows, 2], data).expect("consistent shape")
}

fn as_batch(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

/// Per-row gradient of the loss against the Theft label.
fn theft_loss_gradient(model: &NeuralModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let grad = model.input_gradient(&as_batch(rows)?, &theft_targets(rows.len()))?;
    Ok((0..rows.len()).map(|i| grad.row(i).to_vec()).collect())
}

/// Coefficients selecting the logit margin `z_theft − z_normal`.
fn margin_coefficients() -> [f64; 2] {
    let mut c = [0.0; 2];
    c[Label::Theft.index()] = 1.0;
    c[Label::Normal.index()] = -1.0;
    c
}

/// Per-row ascent direction of the loss against the Theft label.
///
/// With two classes that gradient is `p_normal · ∇(z_normal − z_theft)`, so
/// its direction is taken from the logit margin, which stays representable
/// when `p_normal` underflows.
fn theft_loss_direction(model: &NeuralModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let grad = model.logit_input_gradient(&as_batch(rows)?, &margin_coefficients())?;
    Ok((0..rows.len()).map(|i| grad.row(i).iter().map(|g| -g).collect()).collect())
}

/// `a + ε·sign(g)` before clipping, with `sign(0) = 0`.
pub fn fgsm_step(a: &[f64], gradient: &[f64], epsilon: f64) -> Vec<f64> {
    a.iter()
        .zip(gradient)
        .map(|(&x, &g)| {
            if g > 0.0 {
                x + epsilon
            } else if g < 0.0 {
                x - epsilon
            } else {
                x
            }
        })
        .collect()
}

/// `a + ε·g` before clipping.
pub fn fgv_step(a: &[f64], gradient: &[f64], epsilon: f64) -> Vec<f64> {
    a.iter().zip(gradient).map(|(&x, &g)| x + epsilon * g).collect()
}

pub fn fgsm_attack(model: &NeuralModel, a0: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    Ok(fgsm_batch(model, &[a0.to_vec()], epsilon)?.remove(0))
}

pub fn fgv_attack(model: &NeuralModel, a0: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    Ok(fgv_batch(model, &[a0.to_vec()], epsilon)?.remove(0))
}

/// Only the sign of the gradient matters, so the direction is used.
pub fn fgsm_batch(model: &NeuralModel, a0: &[Vec<f64>], epsilon: f64) -> Result<Vec<Vec<f64>>> {
    single_step_batch(a0, theft_loss_direction, model, |a, g| fgsm_step(a, g, epsilon))
}

pub fn fgv_batch(model: &NeuralModel, a0: &[Vec<f64>], epsilon: f64) -> Result<Vec<Vec<f64>>> {
    single_step_batch(a0, theft_loss_gradient, model, |a, g| fgv_step(a, g, epsilon))
}

type GradientFn = fn(&NeuralModel, &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;

fn single_step_batch(
    a0: &[Vec<f64>],
    gradient: GradientFn,
    model: &NeuralModel,
    step: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    if a0.is_empty() {
        return Ok(Vec::new());
    }
    let grads = gradient(model, a0)?;
    a0.iter()
        .zip(&grads)
        .map(|(a, g)| {
            ensure_finite(g, "attack gradient")?;
            let mut out = step(a, g);
            clip_in_place(&mut out);
            Ok(out)
        })
        .collect()
}

/// Projection `a − (1 + overshoot)·g/‖∇g‖²·∇g` towards the linearised
/// boundary `g = 0`; with zero overshoot it lands on it.
pub fn deepfool_step(a: &[f64], g: f64, grad: &[f64], overshoot: f64) -> Option<Vec<f64>> {
    let norm_sq: f64 = grad.iter().map(|x| x * x).sum();
    if norm_sq.sqrt() < GRADIENT_FLOOR {
        return None;
    }
    let scale = (1.0 + overshoot) * g / norm_sq;
    Some(a.iter().zip(grad).map(|(&x, &d)| x - scale * d).collect())
}

/// Ties count as Theft.
fn is_normal(scores: &[f64]) -> bool {
    scores[Label::Normal.index()] > scores[Label::Theft.index()]
}

/// Result of an iterative attack on one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Fails with [`Error::VanishingGradient`] when the margin gradient vanishes
/// before the input is classified Normal.
pub fn deepfool_attack(model: &NeuralModel, a0: &[f64], max_iter: usize) -> Result<IterativeOutcome> {
    let mut rows = deepfool_rows(model, &[a0.to_vec()], max_iter)?;
    match rows.aborted.pop() {
        Some(e) => Err(e),
        None => Ok(rows.outcomes.remove(0)),
    }
}

/// Batch DeepFool. A row whose gradient vanishes keeps its last iterate,
/// which is still classified Theft; the count of such rows is logged.
pub fn deepfool_batch(model: &NeuralModel, a0: &[Vec<f64>], max_iter: usize) -> Result<Vec<IterativeOutcome>> {
    let rows = deepfool_rows(model, a0, max_iter)?;
    if let Some(e) = rows.aborted.first() {
        log::warn!("deepfool: {} of {} rows aborted ({e})", rows.aborted.len(), a0.len());
    }
    Ok(rows.outcomes)
}

struct DeepfoolRows {
    outcomes: Vec<IterativeOutcome>,
    aborted: Vec<Error>,
}

/// DeepFool on the logit margin `g(a) = z_theft(a) − z_normal(a)`, whose
/// zero set is the `p_theft = p_normal` boundary. Each projection is
/// lengthened by the overshoot, so iterates cannot settle onto the boundary,
/// where ties count as Theft, and is clipped. A row stops at the first
/// iterate classified Normal.
fn deepfool_rows(model: &NeuralModel, a0: &[Vec<f64>], max_iter: usize) -> Result<DeepfoolRows> {
    if max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
    }
    let starts: Vec<Vec<f64>> = a0.iter().map(|a| clip_nonnegative(a)).collect();
    let mut iterates = starts.clone();
    let mut out: Vec<IterativeOutcome> = starts
        .iter()
        .map(|a| IterativeOutcome {
            vector: a.clone(),
            iterations: 0,
        })
        .collect();
    let mut active: Vec<usize> = (0..out.len()).collect();
    let mut aborted = Vec::new();
    for iteration in 0..=max_iter {
        if active.is_empty() {
            break;
        }
        let rows: Vec<Vec<f64>> = active.iter().map(|&i| iterates[i].clone()).collect();
        let batch = as_batch(&rows)?;
        let logits = model.logits(&batch, Mode::Infer)?;
        // the same probabilities `forward` would give, ties included
        let probs = softmax_rows(logits.data(), 2, 1.0);
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            out[i] = IterativeOutcome {
                vector: rows[k].clone(),
                iterations: iteration,
            };
            if !is_normal(&probs[2 * k..2 * k + 2]) {
                still.push(k);
            }
        }
        if still.is_empty() || iteration == max_iter {
            break;
        }
        let batch = as_batch(&still.iter().map(|&k| rows[k].clone()).collect::<Vec<_>>())?;
        let dg = model.logit_input_gradient(&batch, &margin_coefficients())?;
        let mut stepped = Vec::with_capacity(still.len());
        for (j, &k) in still.iter().enumerate() {
            let z = logits.row(k);
            // a row still classified Theft may sit in the rounding band where
            // a slightly negative margin still gives tied probabilities
            let g = (z[Label::Theft.index()] - z[Label::Normal.index()]).max(TIE_MARGIN);
            let grad = dg.row(j);
            ensure_finite(grad, "deepfool gradient")?;
            let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            match deepfool_step(&rows[k], g, grad, DEEPFOOL_OVERSHOOT) {
                Some(mut next) => {
                    clip_in_place(&mut next);
                    iterates[active[k]] = next;
                    stepped.push(active[k]);
                }
                None => aborted.push(Error::VanishingGradient {
                    iteration: iteration + 1,
                    norm,
                }),
            }
        }
        active = stepped;
    }
    Ok(DeepfoolRows { outcomes: out, aborted })
}

/// Gradient steps normalised to infinity-norm `size`, clipped each time.
/// Rows whose gradient direction vanishes stop early; `iterations` counts
/// the gradient evaluations that produced a step.
pub fn ssf_iter_attack(
    model: &NeuralModel,
    step: usize,
    size: f64,
    sigma: f64,
    rng: &mut dyn RngCore,
) -> Result<IterativeOutcome> {
    let init = random_init(READINGS_PER_DAY, sigma, rng)?;
    let mut snaps = ssf_iter_trajectory(model, &[init], size, &[step])?;
    Ok(snaps.remove(0).remove(0))
}

/// `a + g·size/max|g|` before clipping, or `None` when `max|g|` is below
/// [`GRADIENT_FLOOR`].
pub fn ssf_step(a: &[f64], gradient: &[f64], size: f64) -> Option<Vec<f64>> {
    let peak = gradient.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak < GRADIENT_FLOOR {
        return None;
    }
    Some(a.iter().zip(gradient).map(|(&x, &g)| x + g * size / peak).collect())
}

/// Runs the iteration once up to the largest requested step count and
/// returns, for every entry of `steps`, the iterates at that step.
/// Iterates are independent across rows, so a prefix of a longer run equals
/// a shorter run.
pub fn ssf_iter_trajectory(
    model: &NeuralModel,
    inits: &[Vec<f64>],
    size: f64,
    steps: &[usize],
) -> Result<Vec<Vec<IterativeOutcome>>> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(Error::InvalidConfig(format!("size {size} must be positive")));
    }
    let max_step = steps.iter().copied().max().unwrap_or(0);
    let mut current: Vec<IterativeOutcome> = inits
        .iter()
        .map(|a| IterativeOutcome {
            vector: a.clone(),
            iterations: 0,
        })
        .collect();
    let mut frozen = vec![false; inits.len()];
    let mut snapshots: Vec<Option<Vec<IterativeOutcome>>> = vec![None; steps.len()];
    for k in 0..=max_step {
        for (slot, &s) in snapshots.iter_mut().zip(steps) {
            if s == k {
                *slot = Some(current.clone());
            }
        }
        if k == max_step {
            break;
        }
        let active: Vec<usize> = (0..current.len()).filter(|&i| !frozen[i]).collect();
        if active.is_empty() {
            continue;
        }
        let rows: Vec<Vec<f64>> = active.iter().map(|&i| current[i].vector.clone()).collect();
        let grads = theft_loss_direction(model, &rows)?;
        for (&i, g) in active.iter().zip(&grads) {
            ensure_finite(g, "ssf-iter gradient")?;
            let Some(mut next) = ssf_step(&current[i].vector, g, size) else {
                frozen[i] = true;
                continue;
            };
            clip_in_place(&mut next);
            current[i].vector = next;
            current[i].iterations += 1;
        }
    }
    Ok(snapshots.into_iter().map(|s| s.expect("every step visited")).collect())
}

pub fn va1_attack(base: &DailyProfile, alpha: f64) -> Vec<f64> {
    base.readings().iter().map(|x| alpha * x).collect()
}

pub fn va2_attack(n: usize, u: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.0..u)).collect()
}

/// A set of adversarial vectors together with how they were made.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub vectors: Vec<Vec<f64>>,
    pub config: AttackConfig,
    pub surrogate: String,
    pub iterations: Vec<usize>,
}

/// JSON sidecar written next to a persisted batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSidecar {
    pub config: AttackConfig,
    pub surrogate: String,
    pub surrogate_hash: Option<String>,
    pub rows: usize,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        as_batch(&self.vectors)
    }

    /// Writes `r01..r48` plus attack metadata columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header: Vec<String> = (1..=READINGS_PER_DAY).map(|i| format!("r{i:02}")).collect();
        header.extend(["attack", "surrogate", "iterations"].map(String::from));
        w.write_record(&header)?;
        for (v, it) in self.vectors.iter().zip(&self.iterations) {
            let mut record: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            record.push(self.config.kind().to_string());
            record.push(self.surrogate.clone());
            record.push(it.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar(&self, path: &Path, surrogate_hash: Option<String>) -> Result<()> {
        let sidecar = BatchSidecar {
            config: self.config,
            surrogate: self.surrogate.clone(),
            surrogate_hash,
            rows: self.len(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &sidecar)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        for p in [csv_path, sidecar_path] {
            if !p.exists() {
                return Err(Error::MissingInput(p.to_path_buf()));
            }
        }
        let sidecar: BatchSidecar = serde_json::from_reader(File::open(sidecar_path)?)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut vectors = Vec::new();
        let mut iterations = Vec::new();
        for record in r.records() {
            let record = record?;
            if record.len() != READINGS_PER_DAY + 3 {
                return Err(Error::Format(format!("batch row has {} fields", record.len())));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad reading {s:?}")));
            vectors.push(record.iter().take(READINGS_PER_DAY).map(parse).collect::<Result<Vec<_>>>()?);
            iterations.push(
                record[READINGS_PER_DAY + 2]
                    .parse()
                    .map_err(|_| Error::Format("bad iteration count".into()))?,
            );
        }
        Ok(Self {
            vectors,
            config: sidecar.config,
            surrogate: sidecar.surrogate,
            iterations,
        })
    }
}

/// Generates `n` vectors for `config`. Gradient attacks query only
/// `surrogate`; VA1 scales profiles drawn from `normal_pool`.
pub fn generate_batch(
    config: &AttackConfig,
    n: usize,
    surrogate: &NeuralModel,
    surrogate_id: &str,
    normal_pool: &[DailyProfile],
) -> Result<AdversarialBatch> {
    config.validate()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| vector_rng(config.seed, i)).collect();
    let inits = || -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|i| random_init(READINGS_PER_DAY, config.sigma, &mut vector_rng(config.seed, i)))
            .collect()
    };
    let (vectors, iterations) = match config.params {
        AttackParams::InitOnly => (inits()?, vec![0; n]),
        AttackParams::Fgsm { epsilon } => (fgsm_batch(surrogate, &inits()?, epsilon)?, vec![1; n]),
        AttackParams::Fgv { epsilon } => (fgv_batch(surrogate, &inits()?, epsilon)?, vec![1; n]),
        AttackParams::Deepfool { max_iter } => {
            let out = deepfool_batch(surrogate, &inits()?, max_iter)?;
            let iters = out.iter().map(|o| o.iterations).collect();
            (out.into_iter().map(|o| o.vector).collect(), iters)
        }
        AttackParams::SsfIter { step, size } => {
            let out = ssf_iter_trajectory(surrogate, &inits()?, size, &[step])?.remove(0);
            let iters = out.iter().map(|o| o.iterations).collect();
            (out.into_iter().map(|o| o.vector).collect(), iters)
        }
        AttackParams::Va1 { alpha } => {
            if normal_pool.is_empty() {
                return Err(Error::EmptyDataset("va1 normal pool"));
            }
            let v = rngs
                .iter_mut()
                .map(|rng| va1_attack(&normal_pool[rng.gen_range(0..normal_pool.len())], alpha))
                .collect();
            (v, vec![0; n])
        }
        AttackParams::Va2 { u } => {
            let v = rngs.iter_mut().map(|rng| va2_attack(READINGS_PER_DAY, u, rng)).collect();
            (v, vec![0; n])
        }
    };
    Ok(AdversarialBatch {
        vectors,
        config: *config,
        surrogate: surrogate_id.to_string(),
        iterations,
    })
}

/// One batch per requested step count, sharing a single trajectory.
pub fn generate_ssf_sweep(
    size: f64,
    steps: &[usize],
    sigma: f64,
    seed: u64,
    n: usize,
    surrogate: &NeuralModel,
    surrogate_id: &str,
) -> Result<Vec<AdversarialBatch>> {
    let inits: Vec<Vec<f64>> = (0..n)
        .map(|i| random_init(READINGS_PER_DAY, sigma, &mut vector_rng(seed, i)))
        .collect::<Result<_>>()?;
    let snaps = ssf_iter_trajectory(surrogate, &inits, size, steps)?;
    Ok(steps
        .iter()
        .zip(snaps)
        .map(|(&step, out)| AdversarialBatch {
            config: AttackConfig {
                params: AttackParams::SsfIter { step, size },
                sigma,
                seed,
            },
            surrogate: surrogate_id.to_string(),
            iterations: out.iter().map(|o| o.iterations).collect(),
            vectors: out.into_iter().map(|o| o.vector).collect(),
        })
        .collect())
}

/// `count` points evenly spaced in log10 between `10^lo` and `10^hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![10f64.powf(lo)],
        _ => (0..count)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1) as f64))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn tiny_model(seed: u64) -> NeuralModel {
        NeuralModel::new(
            vec![READINGS_PER_DAY],
            vec![LayerSpec::dense(8), LayerSpec::SoftmaxOutput { classes: 2 }],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_nonnegative(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(clip_nonnegative(&[0.5, 3.0]), vec![0.5, 3.0]);
    }

    #[test]
    fn zero_sigma_init_is_zero() {
        let mut rng = vector_rng(1, 0);
        assert_eq!(random_init(48, 0.0, &mut rng).unwrap(), vec![0.0; 48]);
    }

    #[test]
    fn fgsm_reference_step() {
        assert_eq!(fgsm_step(&[1.0, 1.0, 1.0], &[0.5, -0.2, 0.0], 0.1), vec![1.1, 0.9, 1.0]);
    }

    #[test]
    fn fgv_zero_gradient_is_identity() {
        assert_eq!(fgv_step(&[0.2, 0.0], &[0.0, 0.0], 0.7), vec![0.2, 0.0]);
    }

    #[test]
    fn deepfool_linear_step_hits_hyperplane() {
        let w = [0.5, -1.5, 2.0];
        let b = 0.25;
        let a = [1.0, 2.0, 3.0];
        let g = |x: &[f64]| w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
        let next = deepfool_step(&a, g(&a), &w, 0.0).unwrap();
        assert!(g(&next).abs() < 1e-12);
        let past = deepfool_step(&a, g(&a), &w, 0.02).unwrap();
        assert!((g(&past) + 0.02 * g(&a)).abs() < 1e-12);
        assert!(deepfool_step(&a, 1.0, &[0.0; 3], 0.0).is_none());
    }

    fn linear_model(weights: Vec<f64>, theft_bias: f64) -> NeuralModel {
        let mut bias = vec![0.0; 2];
        bias[Label::Theft.index()] = theft_bias;
        NeuralModel::from_parts(
            vec![READINGS_PER_DAY],
            vec![LayerSpec::SoftmaxOutput { classes: 2 }],
            vec![vec![
                Tensor::new(vec![READINGS_PER_DAY, 2], weights).unwrap(),
                Tensor::new(vec![2], bias).unwrap(),
            ]],
        )
        .unwrap()
    }

    #[test]
    fn deepfool_crosses_a_linear_boundary_in_one_step() {
        let mut w = vec![0.0; 2 * READINGS_PER_DAY];
        for t in 0..READINGS_PER_DAY {
            w[2 * t + Label::Theft.index()] = -0.1;
        }
        let model = linear_model(w, 6.0);
        let out = deepfool_attack(&model, &[1.0; READINGS_PER_DAY], 100).unwrap();
        assert_eq!(out.iterations, 1);
        let l1: f64 = out.vector.iter().sum();
        assert!((l1 - (48.0 + 48.0 * 0.255)).abs() < 1e-9, "{l1}");
    }

    #[test]
    fn deepfool_vanishing_gradient_aborts_only_its_row() {
        let model = linear_model(vec![0.0; 2 * READINGS_PER_DAY], 1.0);
        let a0 = vec![0.5; READINGS_PER_DAY];
        assert!(matches!(
            deepfool_attack(&model, &a0, 10),
            Err(Error::VanishingGradient { iteration: 1, .. })
        ));
        let out = deepfool_batch(&model, &[a0.clone(), a0.clone()], 10).unwrap();
        assert!(out.iter().all(|o| o.vector == a0 && o.iterations == 0));
    }

    #[test]
    fn va_examples() {
        let base = DailyProfile::new([1.5; 48]).unwrap();
        assert_eq!(va1_attack(&base, 1.0).iter().sum::<f64>(), base.l1());
        assert_eq!(va1_attack(&base, 0.5).iter().sum::<f64>(), base.l1() / 2.0);
        let mut rng = vector_rng(0, 0);
        assert!(va2_attack(48, 0.3, &mut rng).iter().all(|&x| (0.0..0.3).contains(&x)));
    }

    #[test]
    fn ssf_zero_steps_returns_init() {
        let model = tiny_model(1);
        let out = ssf_iter_attack(&model, 0, 0.1, 1e-4, &mut vector_rng(5, 0)).unwrap();
        let init = random_init(48, 1e-4, &mut vector_rng(5, 0)).unwrap();
        assert_eq!(out.vector, init);
        assert_eq!(out.iterations, 0);
        assert_eq!(model.gradient_calls(), 0);
    }

    #[test]
    fn ssf_prefix_matches_independent_run() {
        let model = tiny_model(2);
        let sweep = generate_ssf_sweep(0.05, &[2, 5], 1e-4, 9, 6, &model, "m").unwrap();
        let direct = generate_batch(
            &AttackConfig::new(AttackParams::SsfIter { step: 2, size: 0.05 }, 9),
            6,
            &model,
            "m",
            &[],
        )
        .unwrap();
        assert_eq!(sweep[0], direct);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(-2.0, 0.5, 15);
        assert_eq!(g.len(), 15);
        assert!((g[0] - 0.01).abs() < 1e-15);
        assert!((g[14] - 10f64.powf(0.5)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(AttackParams::Fgsm { epsilon: 0.0 }, 0).validate().is_err());
        assert!(AttackConfig::new(AttackParams::Deepfool { max_iter: 0 }, 0).validate().is_err());
        assert!(AttackConfig::new(AttackParams::Va2 { u: 1.0 }, 0).validate().is_ok());
        let json = serde_json::to_string(&AttackConfig::new(AttackParams::SsfIter { step: 3, size: 0.1 }, 4)).unwrap();
        assert!(json.contains("\"kind\":\"ssf-iter\""));
        let back: AttackConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.kind(), AttackKind::SsfIter);
    }
}
