//! Metrics, baselines, cost curves, cohort analyses and report files.

mod analysis;
mod auc;
mod baselines;
mod policy_eval;
mod report;

use thiserror::Error;

use crate::domain::DomainError;
use crate::rl::RlError;

pub use analysis::{
    cohort_report, cost_curve, group_usage_histogram, CohortRow, CohortView, CostCurvePoint, GroupUsage,
    GroupUsageHistogram, ImmediatePredict, Oracle, OrderEverything, DEFAULT_BUDGETS,
};
pub use auc::auc;
pub use baselines::{
    run_baseline, BaselineResult, BaselineSpec, FeatureMap, Imputation, LogisticConfig, LogisticModel,
};
pub use policy_eval::{evaluate_policy, PatientTrace, PolicyEvaluation};
pub use report::{
    emit_report, read_report, read_table, write_table, CostCurveRow, GroupUsageRow, LearningRow, MethodRow,
    ReportBundle, TableRow,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
