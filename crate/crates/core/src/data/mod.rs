//! Meter data: raw reading ingestion, daily regulation, synthetic normal
//! profiles, theft scenarios and labeled dataset assembly.

mod dataset;
mod profile;
mod raw;
mod synth;
mod theft;

pub use dataset::{
    build_labeled_dataset, split_dataset, BuiltDataset, DatasetMetadata, LabeledDataset, Provenance,
};
pub use profile::{DailyProfile, Label, READINGS_PER_DAY};
pub use raw::{parse_raw_file, parse_raw_readings, regulate_daily, MeterDay, MeterReading, ParsedReadings};
pub use synth::{synthesize_normal_profiles, synthesize_with, SyntheticConfig};
pub use theft::{apply_theft_scenario, ScenarioMix, TheftKind, TheftScenario, SCALE_BOUNDS};
