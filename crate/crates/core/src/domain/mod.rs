//! Shared vocabulary: the lab catalog, patient records, outcome tasks and
//! classification metrics.

mod catalog;
mod metrics;
mod record;

use thiserror::Error;

pub use catalog::{
    default_catalog, groups, CohortTier, GroupId, LabCatalog, LabGroup, LabTest, NamingMode,
    CATALOG_SCHEMA_VERSION, RESERVED_DELIMITERS,
};
pub use metrics::{metrics_from_confusion, ConfusionCounts, MetricReport};
pub use record::{
    cohort_memberships, cohort_of, LabResult, OutcomeTask, PatientRecord, TriageRecord,
    ACUITY_INDEX, CHIEF_COMPLAINTS, CHIEF_COMPLAINT_FEATURE, NUM_TRIAGE_FEATURES, TRIAGE_FEATURES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("group {0} is not in the catalog")]
    UnknownGroup(GroupId),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("patient {0:?}: {1}")]
    InvalidPatient(String, String),
}
