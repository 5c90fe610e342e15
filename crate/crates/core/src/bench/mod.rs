//! Benchmark objectives and the experiment-grid driver.

mod objectives;
mod suite;


pub use objectives::{
    eval_objective, BenchObjective, DomainMap, Kind, KnownOptimum, ObjectiveRecord, HARTMANN3_ARGMAX, HARTMANN3_OPTIMUM,
    PRIOR_OPTIMUM_RESTARTS,
};
pub use suite::{
    mean_se, run_suite, trace_file_name, write_summary_csv, CellOutcome, Method, SuiteReport, SuiteSpec, SummaryRow,
    DEFAULT_PRIOR_SEED, SUMMARY_HEADER,
};
