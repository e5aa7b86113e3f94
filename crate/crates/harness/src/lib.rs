//! Command-line front end for filippov-core: TOML run configs, scenario
//! dispatch, grazing scans, ensembles, and CSV/JSON output with a manifest
//! of content digests.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{RunKind, ScenarioConfig};
pub use error::HarnessError;
pub use output::{read_trajectory_csv, trajectory_csv, FileEntry};
pub use run::{run, scan_grazing, RunManifest, ScanResult};
