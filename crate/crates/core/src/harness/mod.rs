//! Experiment runner: config files, scenarios, statistics and reports.

mod config;
mod eventlog;
mod report;
mod scenarios;
mod stats;

pub use config::{ExperimentConfig, Scenario};
pub use eventlog::{export_event_log, parse_event_log, replay_event_log, ParsedLog, ReplayOutcome};
pub use report::{emit_report, ReportFormat, CSV_HEADER};
pub use scenarios::{
    btb_mistrain_sweep, run_scenario, run_scenario_capture, syscall_gadget_active, MistrainRow, RunOutput,
    ScenarioResult, ATTACKER, GUEST,
};
pub use stats::{f1_score, ConfusionCounts};
