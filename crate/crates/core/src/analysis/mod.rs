//! Evaluation reports, parameter sweeps, multi-seed stability runs and the
//! commands the CLI dispatches to.

pub mod commands;
pub mod config;
pub mod report;
pub mod stability;
pub mod sweep;

pub use commands::{rerun, run, Command, RunManifest};
pub use config::{RunConfig, Scale};
pub use report::{emit_histogram, evaluate, Binning, EvalReport, Histogram};
pub use stability::{training_stability, AgentKind, StabilityRun};
pub use sweep::{run_sweep, CellValue, Strategy, SweepAxis, SweepOutcome, SweepSpec};
