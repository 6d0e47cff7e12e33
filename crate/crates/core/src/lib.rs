//! Cost-effective sequential diagnostic assistance.
//!
//! A small causal encoder reads a patient's linearized triage block and the
//! lab groups acquired so far. Supervised pre-training teaches it to propose
//! the next group and to predict the outcome; a PPO-trained actor/critic on
//! top of the frozen encoder then learns when to order which group and when
//! to stop, trading prediction quality against accrued test time.

pub mod domain;
pub mod encoder;
pub mod eval;
pub mod rl;
pub mod sft;
pub mod synthgen;
pub(crate) mod util;

pub use domain::{
    default_catalog, ConfusionCounts, GroupId, LabCatalog, MetricReport, NamingMode, OutcomeTask,
    PatientRecord,
};
