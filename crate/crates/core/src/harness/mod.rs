//! Config-driven experiments: train every method, calibrate the conformal
//! methods per evaluation seed, and measure coverage and set size on the
//! clean and shifted test sets.

mod config;
mod metrics;
mod report;
mod runner;

pub use config::{
    DataConfig, ExperimentConfig, GridConfig, MethodConfig, MethodKind, NetworkConfig, ScheduleName, SetMethod,
    ShiftConfig, SplitConfig, TrainDefaults, MFVI_STEP_SIZE,
};
pub use metrics::{
    avg_set_size, binomial_se, coverage, diagnose_confidence, empty_set_rate, ConfidenceDiagnosis, Verdict,
};
pub use report::{
    read_report, write_outputs, write_report, DiagnosisRecord, ExperimentReport, ReportRow, SummaryJson, SummaryRow,
    REPORT_CSV, RESOLVED_CONFIG, SUMMARY_CSV, SUMMARY_JSON,
};
pub use runner::{
    calibrate_cell, calibration_indices, evaluate, method_outputs, prepare_data, run_experiment, train_all,
    train_method, variant_count, variants, MethodOutputs, PreparedData,
};
