//! Front-end plumbing for the `hammerlab` binary: run configuration,
//! versioned reports, manifests and CSV series.

pub mod config;
pub mod report;
pub mod run;

pub use config::{Command, RunConfig};
pub use report::{emit_series, Manifest, Report, ReportBody, SeriesKind};
pub use run::{execute, run_to_dir};
