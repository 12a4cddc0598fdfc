//! The six false-measurement scenarios used to synthesise theft records.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::profile::{DailyProfile, READINGS_PER_DAY};
use crate::error::{Error, Result};

pub const SCALE_BOUNDS: (f64, f64) = (0.1, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TheftKind {
    H1,
    H2,
    H3,
    H4,
    H5,
    H6,
}

impl TheftKind {
    pub const ALL: [TheftKind; 6] = [
        TheftKind::H1,
        TheftKind::H2,
        TheftKind::H3,
        TheftKind::H4,
        TheftKind::H5,
        TheftKind::H6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TheftKind::H1 => "h1",
            TheftKind::H2 => "h2",
            TheftKind::H3 => "h3",
            TheftKind::H4 => "h4",
            TheftKind::H5 => "h5",
            TheftKind::H6 => "h6",
        }
    }
}

impl fmt::Display for TheftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TheftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TheftKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown theft scenario {s:?}")))
    }
}

/// A concrete scenario instance. Intervals are 1-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TheftScenario {
    /// `α·m_t` with one α for the whole day.
    H1 { alpha: f64 },
    /// `β_t·m_t` with a fresh `β_t ~ U(low, high)` per reading.
    H2 { low: f64, high: f64 },
    /// Zero on `[start, end]`, unchanged elsewhere.
    H3 { start: usize, end: usize },
    /// Every reading replaced by the day's mean.
    H4,
    /// `β_t·mean(m)` with a fresh `β_t` per reading.
    H5 { low: f64, high: f64 },
    /// Readings in reverse order.
    H6,
}

impl TheftScenario {
    /// Draws the per-profile parameters of a scenario: α for h1 and the
    /// zeroed window for h3 (start uniform in 1..=42, length uniform in
    /// 6..=49-start).
    pub fn sample(kind: TheftKind, rng: &mut dyn RngCore) -> Self {
        let (low, high) = SCALE_BOUNDS;
        match kind {
            TheftKind::H1 => TheftScenario::H1 {
                alpha: rng.gen_range(low..high),
            },
            TheftKind::H2 => TheftScenario::H2 { low, high },
            TheftKind::H3 => {
                let start = rng.gen_range(1..=42);
                let len = rng.gen_range(6..=READINGS_PER_DAY - start + 1);
                TheftScenario::H3 {
                    start,
                    end: start + len - 1,
                }
            }
            TheftKind::H4 => TheftScenario::H4,
            TheftKind::H5 => TheftScenario::H5 { low, high },
            TheftKind::H6 => TheftScenario::H6,
        }
    }

    pub fn kind(&self) -> TheftKind {
        match self {
            TheftScenario::H1 { .. } => TheftKind::H1,
            TheftScenario::H2 { .. } => TheftKind::H2,
            TheftScenario::H3 { .. } => TheftKind::H3,
            TheftScenario::H4 => TheftKind::H4,
            TheftScenario::H5 { .. } => TheftKind::H5,
            TheftScenario::H6 => TheftKind::H6,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TheftScenario::H1 { alpha } if !(alpha.is_finite() && alpha >= 0.0) => {
                Err(Error::InvalidConfig(format!("h1 alpha {alpha} must be nonnegative")))
            }
            TheftScenario::H2 { low, high } | TheftScenario::H5 { low, high }
                if !(low >= 0.0 && low < high && high.is_finite()) =>
            {
                Err(Error::InvalidConfig(format!("invalid scale bounds ({low}, {high})")))
            }
            TheftScenario::H3 { start, end }
                if !(1 <= start && start <= end && end <= READINGS_PER_DAY) =>
            {
                Err(Error::InvalidConfig(format!("invalid h3 interval [{start}, {end}]")))
            }
            _ => Ok(()),
        }
    }
}

pub fn apply_theft_scenario(
    profile: &DailyProfile,
    scenario: &TheftScenario,
    rng: &mut dyn RngCore,
) -> Result<DailyProfile> {
    scenario.validate()?;
    let m = profile.readings();
    let mean = profile.mean();
    let mut out = *m;
    match *scenario {
        TheftScenario::H1 { alpha } => out.iter_mut().for_each(|v| *v *= alpha),
        TheftScenario::H2 { low, high } => {
            out.iter_mut().for_each(|v| *v *= rng.gen_range(low..high))
        }
        TheftScenario::H3 { start, end } => out[start - 1..end].fill(0.0),
        TheftScenario::H4 => out.fill(mean),
        TheftScenario::H5 { low, high } => {
            out.iter_mut().for_each(|v| *v = rng.gen_range(low..high) * mean)
        }
        TheftScenario::H6 => out.reverse(),
    }
    DailyProfile::new(out)
}

/// Relative weights of the six scenarios when polluting a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    weights: [f64; 6],
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self { weights: [1.0; 6] }
    }
}

impl ScenarioMix {
    pub fn new(weights: [f64; 6]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("scenario weights must be nonnegative with positive sum".into()));
        }
        Ok(Self { weights })
    }

    pub fn only(kind: TheftKind) -> Self {
        let mut weights = [0.0; 6];
        weights[kind as usize] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64; 6] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> TheftKind {
        let dist = WeightedIndex::new(self.weights).expect("validated weights");
        TheftKind::ALL[dist.sample(rng)]
    }
}

/// Parses `h1:0.5,h6:1` style mixes; unnamed kinds get weight zero.
impl FromStr for ScenarioMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("uniform") {
            return Ok(Self::default());
        }
        let mut weights = [0.0; 6];
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, w) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("bad mix entry {part:?}")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad mix weight {w:?}")))?;
            weights[k.parse::<TheftKind>()? as usize] = w;
        }
        Self::new(weights)
    }
}

impl fmt::Display for ScenarioMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = TheftKind::ALL
            .iter()
            .zip(self.weights)
            .map(|(k, w)| format!("{k}:{w}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}
