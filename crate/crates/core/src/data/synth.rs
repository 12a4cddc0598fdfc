//! Seeded stand-in for real household load data.
//!
//! An occupied day is a smooth shape (base load, morning peak, daytime
//! activity, larger evening peak) normalised to sum to one and scaled by a
//! log-normal daily total. An away day is a flat standby load. Every reading
//! then gets mean-one multiplicative log-normal noise. The occupied-day total
//! is set so that the expected daily total over both kinds is the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::profile::{DailyProfile, READINGS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Expected daily total in kWh.
    pub target_mean_l1: f64,
    /// Log-space spread of the daily total across households.
    pub total_sigma: f64,
    /// Log-space spread of the per-reading noise.
    pub noise_sigma: f64,
    /// Probability that a day is an away day.
    pub away_fraction: f64,
    /// Mean standby reading on away days, kWh per interval.
    pub away_level: f64,
    /// Log-space spread of the per-reading noise on away days.
    pub away_noise_sigma: f64,
    /// Meter resolution in kWh; readings are rounded to a multiple of it.
    /// Zero disables rounding.
    pub resolution: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            target_mean_l1: 32.05,
            total_sigma: 1.0,
            noise_sigma: 0.25,
            away_fraction: 0.1,
            away_level: 0.08,
            away_noise_sigma: 1.0,
            resolution: 0.01,
        }
    }
}

fn quantize(x: f64, resolution: f64) -> f64 {
    if resolution > 0.0 {
        (x / resolution).round() * resolution
    } else {
        x
    }
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    let d = (t - center) / width;
    (-0.5 * d * d).exp()
}

pub fn synthesize_normal_profiles(count: usize, seed: u64) -> Result<Vec<DailyProfile>> {
    synthesize_with(count, seed, &SyntheticConfig::default())
}

pub fn synthesize_with(count: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Vec<DailyProfile>> {
    let away_total = cfg.away_level * READINGS_PER_DAY as f64;
    let occupied_mean = (cfg.target_mean_l1 - cfg.away_fraction * away_total) / (1.0 - cfg.away_fraction);
    if !(occupied_mean > 0.0)
        || cfg.total_sigma < 0.0
        || cfg.noise_sigma < 0.0
        || !(0.0..1.0).contains(&cfg.away_fraction)
        || cfg.away_level < 0.0
        || cfg.away_noise_sigma < 0.0
        || !(cfg.resolution >= 0.0)
    {
        return Err(Error::InvalidConfig("invalid synthetic profile parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = LogNormal::new(-0.5 * cfg.total_sigma.powi(2), cfg.total_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = LogNormal::new(-0.5 * cfg.noise_sigma.powi(2), cfg.noise_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let away_noise = LogNormal::new(-0.5 * cfg.away_noise_sigma.powi(2), cfg.away_noise_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let jitter = Normal::new(0.0, 1.5).expect("valid normal");

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut readings = [0.0; READINGS_PER_DAY];
        if rng.gen_bool(cfg.away_fraction) {
            let level = cfg.away_level * total.sample(&mut rng);
            for r in readings.iter_mut() {
                *r = quantize(level * away_noise.sample(&mut rng), cfg.resolution);
            }
            out.push(DailyProfile::new(readings)?);
            continue;
        }
        let base = rng.gen_range(0.3..0.6);
        let morning_center = 15.0 + jitter.sample(&mut rng);
        let morning_amp = rng.gen_range(0.6..1.4);
        let morning_width = rng.gen_range(1.5..3.0);
        let evening_center = 37.0 + jitter.sample(&mut rng);
        let evening_amp = rng.gen_range(1.5..3.0);
        let evening_width = rng.gen_range(2.5..4.5);
        let daytime = rng.gen_range(0.1..0.4);

        let shape: Vec<f64> = (0..READINGS_PER_DAY)
            .map(|t| {
                let t = t as f64;
                base + morning_amp * bump(t, morning_center, morning_width)
                    + evening_amp * bump(t, evening_center, evening_width)
                    + daytime * bump(t, 26.0, 6.0)
            })
            .collect();
        let shape_sum: f64 = shape.iter().sum();
        let day_total = occupied_mean * total.sample(&mut rng);
        for (r, s) in readings.iter_mut().zip(&shape) {
            *r = quantize(day_total * s / shape_sum * noise.sample(&mut rng), cfg.resolution);
        }
        out.push(DailyProfile::new(readings)?);
    }
    Ok(out)
}
