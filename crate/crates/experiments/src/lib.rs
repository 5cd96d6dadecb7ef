//! Experiment harness for `ebm-core`: the inference and training figures,
//! oracle checks, and their CSV and summary output.

pub mod checks;
pub mod config;
pub mod figures;
pub mod mnist;
pub mod output;

pub use config::{Experiment, ExperimentConfig};
pub use figures::run;
pub use output::{Report, Summary, Table};
