//! Raw half-hourly meter readings: one `meter_id code kwh` record per line,
//! where `code = day_index * 100 + interval` and `interval` is 1..=48.
//! Gzip-compressed streams are detected by their magic bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use super::profile::{DailyProfile, READINGS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeterReading {
    pub meter_id: u32,
    pub day: u32,
    /// 1-based half-hour slot.
    pub interval: u8,
    pub kwh: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedReadings {
    pub readings: Vec<MeterReading>,
    pub malformed: usize,
}

/// A complete, valid meter-day.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterDay {
    pub meter_id: u32,
    pub day: u32,
    pub profile: DailyProfile,
}

fn parse_line(line: &str) -> Option<MeterReading> {
    let mut fields = line.split_whitespace();
    let meter_id = fields.next()?.parse().ok()?;
    let code: u64 = fields.next()?.parse().ok()?;
    let kwh: f64 = fields.next()?.parse().ok()?;
    if fields.next().is_some() {
        return None;
    }
    let interval = (code % 100) as u8;
    if !(1..=READINGS_PER_DAY as u8).contains(&interval) {
        return None;
    }
    let day = u32::try_from(code / 100).ok()?;
    Some(MeterReading {
        meter_id,
        day,
        interval,
        kwh,
    })
}

/// Parses a plain or gzip-compressed reading stream. Blank lines are ignored;
/// structurally invalid lines are skipped and counted. Aborts when more than
/// half of the non-blank lines are malformed.
pub fn parse_raw_readings<R: Read>(stream: R) -> Result<ParsedReadings> {
    let mut buffered = BufReader::new(stream);
    let gzip = buffered.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    let reader: Box<dyn BufRead> = if gzip {
        Box::new(BufReader::new(GzDecoder::new(buffered)))
    } else {
        Box::new(buffered)
    };

    let mut out = ParsedReadings::default();
    let mut total = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(&line) {
            Some(r) => out.readings.push(r),
            None => out.malformed += 1,
        }
    }
    if out.malformed * 2 > total {
        return Err(Error::MalformedInput {
            malformed: out.malformed,
            total,
        });
    }
    if out.malformed > 0 {
        log::warn!("skipped {} malformed of {total} lines", out.malformed);
    }
    Ok(out)
}

pub fn parse_raw_file(path: &Path) -> Result<ParsedReadings> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_raw_readings(File::open(path)?)
}

/// Groups readings into meter-days, keeping only days with all 48 intervals
/// present exactly once and every reading finite and nonnegative.
/// Output is ordered by (meter, day).
pub fn regulate_daily(readings: &[MeterReading]) -> Vec<MeterDay> {
    let mut days: BTreeMap<(u32, u32), Vec<Option<f64>>> = BTreeMap::new();
    let mut illegal: BTreeMap<(u32, u32), bool> = BTreeMap::new();
    for r in readings {
        let key = (r.meter_id, r.day);
        let slots = days.entry(key).or_insert_with(|| vec![None; READINGS_PER_DAY]);
        let slot = &mut slots[r.interval as usize - 1];
        if slot.is_some() || !r.kwh.is_finite() || r.kwh < 0.0 {
            illegal.insert(key, true);
        }
        *slot = Some(r.kwh);
    }
    days.into_iter()
        .filter(|(key, _)| !illegal.contains_key(key))
        .filter_map(|((meter_id, day), slots)| {
            let values: Option<Vec<f64>> = slots.into_iter().collect();
            let profile = DailyProfile::from_slice(&values?).ok()?;
            Some(MeterDay {
                meter_id,
                day,
                profile,
            })
        })
        .collect()
}
