use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-hourly readings per day.
pub const READINGS_PER_DAY: usize = 48;

/// One meter-day of 48 nonnegative half-hourly kWh readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile(#[serde(with = "readings")] [f64; READINGS_PER_DAY]);

impl DailyProfile {
    pub fn new(readings: [f64; READINGS_PER_DAY]) -> Result<Self> {
        if readings.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(Self(readings))
        } else {
            Err(Error::InvalidConfig(
                "daily profile readings must be finite and nonnegative".into(),
            ))
        }
    }

    pub fn from_slice(readings: &[f64]) -> Result<Self> {
        let arr: [f64; READINGS_PER_DAY] = readings.try_into().map_err(|_| Error::ShapeMismatch {
            context: "daily profile",
            expected: vec![READINGS_PER_DAY],
            found: vec![readings.len()],
        })?;
        Self::new(arr)
    }

    pub fn readings(&self) -> &[f64; READINGS_PER_DAY] {
        &self.0
    }

    /// Total billed energy of the day.
    pub fn l1(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.l1() / READINGS_PER_DAY as f64
    }
}

mod readings {
    use super::READINGS_PER_DAY;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; READINGS_PER_DAY], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; READINGS_PER_DAY], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 48 readings"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Theft,
}

impl Label {
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Normal => [1.0, 0.0],
            Label::Theft => [0.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Theft => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Theft => "theft",
        }
    }
}
