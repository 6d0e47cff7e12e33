use serde::{Deserialize, Serialize};

use super::catalog::{CohortTier, GroupId, LabCatalog};
use super::DomainError;

pub const NUM_TRIAGE_FEATURES: usize = 9;

/// Names of the numeric triage features, in storage order.
pub const TRIAGE_FEATURES: [&str; NUM_TRIAGE_FEATURES] = [
    "Age",
    "Heart Rate",
    "Respiratory Rate",
    "Systolic Blood Pressure",
    "Diastolic Blood Pressure",
    "Temperature",
    "Oxygen Saturation",
    "Acuity",
    "Pain",
];

pub const ACUITY_INDEX: usize = 7;

pub const CHIEF_COMPLAINT_FEATURE: &str = "Chief Complaint";

/// Chief complaint categories (the code is the index).
pub const CHIEF_COMPLAINTS: [&str; 8] = [
    "abdominal pain",
    "chest pain",
    "dyspnea",
    "fever",
    "trauma",
    "altered mental status",
    "weakness",
    "other",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageRecord {
    pub values: [f64; NUM_TRIAGE_FEATURES],
    pub chief_complaint: u8,
}

impl TriageRecord {
    pub fn validate(&self) -> Result<(), DomainError> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(DomainError::InvalidRecord(format!(
                    "triage {} is not finite",
                    TRIAGE_FEATURES[i]
                )));
            }
        }
        let acuity = self.values[ACUITY_INDEX];
        if acuity.fract() != 0.0 || !(1.0..=5.0).contains(&acuity) {
            return Err(DomainError::InvalidRecord(format!(
                "acuity must be an integer in 1..=5, got {acuity}"
            )));
        }
        if self.chief_complaint as usize >= CHIEF_COMPLAINTS.len() {
            return Err(DomainError::InvalidRecord(format!(
                "unknown chief complaint code {}",
                self.chief_complaint
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabResult {
    pub group_id: GroupId,
    /// One value per test, aligned with the group's test list.
    pub values: Vec<f64>,
}

impl LabResult {
    /// A result block with every value imputed as 0.
    pub fn zero_filled(group_id: GroupId, catalog: &LabCatalog) -> Self {
        LabResult {
            group_id,
            values: vec![0.0; catalog.groups[group_id.index()].tests.len()],
        }
    }

    pub fn validate(&self, catalog: &LabCatalog) -> Result<(), DomainError> {
        let g = catalog.group(self.group_id)?;
        if self.values.len() != g.tests.len() {
            return Err(DomainError::InvalidRecord(format!(
                "group {} expects {} values, got {}",
                g.short_name,
                g.tests.len(),
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::InvalidRecord(format!(
                "group {} has a non-finite value",
                g.short_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTask {
    /// Inpatient death or ICU transfer within 12 hours.
    #[default]
    CriticalOutcome,
    /// ED length of stay above 24 hours.
    LengthenedStay,
}

impl OutcomeTask {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeTask::CriticalOutcome => "critical_outcome",
            OutcomeTask::LengthenedStay => "lengthened_stay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "critical_outcome" | "critical" => Some(OutcomeTask::CriticalOutcome),
            "lengthened_stay" | "los" => Some(OutcomeTask::LengthenedStay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub id: String,
    pub triage: TriageRecord,
    /// Lab groups the patient received, in order.
    pub observed: Vec<LabResult>,
    pub y_critical: bool,
    pub y_los: bool,
    /// Ground-truth latent state `(critical, los)`; only present in synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_state: Option<(bool, bool)>,
}

impl PatientRecord {
    pub fn label(&self, task: OutcomeTask) -> bool {
        match task {
            OutcomeTask::CriticalOutcome => self.y_critical,
            OutcomeTask::LengthenedStay => self.y_los,
        }
    }

    pub fn panel(&self) -> Vec<GroupId> {
        self.observed.iter().map(|r| r.group_id).collect()
    }

    pub fn has_group(&self, g: GroupId) -> bool {
        self.observed.iter().any(|r| r.group_id == g)
    }

    pub fn result(&self, g: GroupId) -> Option<&LabResult> {
        self.observed.iter().find(|r| r.group_id == g)
    }

    /// Sum of time costs over the groups this patient received.
    pub fn panel_cost(&self, catalog: &LabCatalog) -> u32 {
        self.observed.iter().map(|r| catalog.cost(r.group_id)).sum()
    }

    pub fn validate(&self, catalog: &LabCatalog) -> Result<(), DomainError> {
        self.triage
            .validate()
            .map_err(|e| DomainError::InvalidPatient(self.id.clone(), e.to_string()))?;
        let mut seen = vec![false; catalog.num_groups()];
        for r in &self.observed {
            let idx = r.group_id.index();
            if idx >= seen.len() {
                return Err(DomainError::InvalidPatient(
                    self.id.clone(),
                    format!("unknown group id {}", r.group_id),
                ));
            }
            if seen[idx] {
                return Err(DomainError::InvalidPatient(
                    self.id.clone(),
                    format!("group {} received more than once", catalog.groups[idx].short_name),
                ));
            }
            seen[idx] = true;
            r.validate(catalog)
                .map_err(|e| DomainError::InvalidPatient(self.id.clone(), e.to_string()))?;
        }
        Ok(())
    }
}

/// Exclusive cohort of a patient: `Rare` if any rare group was received, else
/// `Middle` if any middle group, else `Top` (including patients without labs).
pub fn cohort_of(record: &PatientRecord, catalog: &LabCatalog) -> Result<CohortTier, DomainError> {
    let mut worst = CohortTier::Top;
    for r in &record.observed {
        worst = worst.max(catalog.tier(r.group_id)?);
    }
    Ok(worst)
}

/// Overlapping cohort membership: `[top, middle, rare]` flags, one per tier
/// with at least one received group.
pub fn cohort_memberships(
    record: &PatientRecord,
    catalog: &LabCatalog,
) -> Result<[bool; 3], DomainError> {
    let mut m = [false; 3];
    for r in &record.observed {
        m[catalog.tier(r.group_id)? as usize] = true;
    }
    Ok(m)
}
