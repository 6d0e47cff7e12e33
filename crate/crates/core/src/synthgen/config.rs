use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{LabCatalog, NUM_TRIAGE_FEATURES, CHIEF_COMPLAINTS};

use super::SynthError;

pub const GENERATOR_SCHEMA_VERSION: u32 = 1;
pub const NUM_LATENT_STATES: usize = 4;
pub const NUM_ACUITY_LEVELS: usize = 5;

/// Index of a latent state `(critical, los)` in the 4-entry tables.
pub fn latent_index(critical: bool, los: bool) -> usize {
    (critical as usize) * 2 + los as usize
}

pub fn latent_bits(index: usize) -> (bool, bool) {
    (index & 2 != 0, index & 1 != 0)
}

/// Triage distribution given the latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageSignal {
    pub base_mean: [f64; NUM_TRIAGE_FEATURES],
    pub noise_sd: [f64; NUM_TRIAGE_FEATURES],
    /// Additive mean shift per latent state and feature (the acuity column is unused).
    pub shift: [[f64; NUM_TRIAGE_FEATURES]; NUM_LATENT_STATES],
    /// `P(acuity = k + 1 | z)`.
    pub acuity_probs: [[f64; NUM_ACUITY_LEVELS]; NUM_LATENT_STATES],
    /// `P(chief complaint = c | z)`.
    pub complaint_probs: [[f64; CHIEF_COMPLAINTS.len()]; NUM_LATENT_STATES],
}

/// Result distribution of one group: every test, standardized by its reference
/// mean and scale, is `N(shift[z], noise^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSignal {
    pub shift: [f64; NUM_LATENT_STATES],
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReference {
    pub mean: f64,
    pub scale: f64,
}

/// Which groups a patient receives, and in what order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelPolicy {
    /// Groups ordered first (in random order among themselves) when included.
    pub core_groups: Vec<u8>,
    pub core_include_prob: f64,
    /// Inclusion logit of every non-core group at zero severity.
    pub base_logit: Vec<f64>,
    /// Added to the inclusion logit (and the ordering weight) per unit of severity.
    pub severity_gain: Vec<f64>,
    /// Severity contributed by the critical and the los bit.
    pub severity_weights: (f64, f64),
}

impl PanelPolicy {
    pub fn severity(&self, z: usize) -> f64 {
        let (c, l) = latent_bits(z);
        self.severity_weights.0 * c as u8 as f64 + self.severity_weights.1 * l as u8 as f64
    }

    pub fn inclusion_prob(&self, group: usize, z: usize) -> f64 {
        if self.core_groups.contains(&(group as u8)) {
            return self.core_include_prob;
        }
        let logit = self.base_logit[group] + self.severity_gain[group] * self.severity(z);
        1.0 / (1.0 + (-logit).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub schema_version: u32,
    pub n_patients: usize,
    pub seed: u64,
    pub base_rate_critical: f64,
    pub base_rate_los: f64,
    /// `latent_joint[critical][los]`.
    pub latent_joint: [[f64; 2]; 2],
    /// Probability of flipping each observed label away from its latent bit.
    pub label_noise: f64,
    pub triage_signal: TriageSignal,
    pub group_signal: Vec<GroupSignal>,
    pub test_reference: Vec<TestReference>,
    pub panel_policy: PanelPolicy,
}

// (mean, scale) per test of the default catalog, in catalog order.
const DEFAULT_TEST_REFERENCE: [(f64, f64); 67] = [
    // CBC
    (40.0, 5.0),
    (8.5, 3.0),
    (13.2, 1.8),
    (4.5, 0.6),
    (90.0, 6.0),
    (30.0, 2.5),
    (33.0, 1.2),
    (14.0, 1.5),
    (250.0, 70.0),
    (0.5, 0.3),
    (2.0, 1.5),
    (25.0, 9.0),
    (65.0, 11.0),
    (46.0, 5.0),
    (1.8, 0.8),
    (0.04, 0.03),
    (0.15, 0.12),
    (0.6, 0.25),
    (5.5, 2.5),
    (1.0, 1.0),
    (0.5, 0.5),
    (0.2, 0.3),
    (7.0, 2.5),
    // CHEM
    (18.0, 8.0),
    (1.0, 0.4),
    (139.0, 3.0),
    (102.0, 4.0),
    (25.0, 3.0),
    (115.0, 35.0),
    (4.2, 0.5),
    (13.0, 3.0),
    (9.2, 0.5),
    // COAG
    (13.0, 2.0),
    (1.1, 0.2),
    (30.0, 5.0),
    // UA
    (6.0, 0.8),
    (1.015, 0.007),
    (5.0, 6.0),
    (8.0, 10.0),
    (3.0, 3.0),
    (15.0, 20.0),
    (2.0, 2.0),
    (5.0, 8.0),
    (0.5, 0.5),
    (20.0, 40.0),
    // Lactate
    (1.6, 0.9),
    // LFTs
    (85.0, 30.0),
    (30.0, 18.0),
    (28.0, 18.0),
    (0.7, 0.4),
    (3.9, 0.5),
    // Lipase
    (35.0, 20.0),
    // LYTES
    (2.0, 0.25),
    (3.5, 0.7),
    // CARDIO
    (400.0, 350.0),
    (0.02, 0.02),
    // Blood Gas
    (4.1, 0.5),
    (7.38, 0.05),
    (25.0, 3.5),
    (0.0, 3.0),
    (80.0, 25.0),
    (42.0, 7.0),
    (125.0, 40.0),
    (138.0, 3.5),
    // TOX
    (40.0, 60.0),
    // Inflammation
    (150.0, 100.0),
    (15.0, 20.0),
];

// Per-test standardized shift caused by the critical and by the los bit, per group.
const DEFAULT_GROUP_EFFECTS: [(f64, f64); 12] = [
    (1.25, 0.15), // CBC
    (0.3, 0.2),   // CHEM
    (0.2, 0.1),   // COAG
    (0.1, 0.6),   // UA
    (3.0, 0.1),   // Lactate
    (0.1, 0.6),   // LFTs
    (0.1, 0.6),   // Lipase
    (0.15, 0.3),  // LYTES
    (0.4, 0.2),   // CARDIO
    (1.2, 0.1),   // Blood Gas
    (0.1, 0.8),   // TOX
    (0.2, 0.5),   // Inflammation
];

const DEFAULT_BASE_LOGIT: [f64; 12] = [
    0.0, 0.0, -0.3, -0.1, -0.6, -0.85, -1.05, -0.7, -1.95, -1.75, -2.15, -1.95,
];
const DEFAULT_SEVERITY_GAIN: [f64; 12] = [0.0, 0.0, 0.7, 0.4, 0.8, 0.4, 0.3, 0.4, 0.9, 1.0, 0.6, 0.8];

impl GeneratorConfig {
    /// Joint table with the given marginals and `P(critical, los) = both`.
    pub fn joint_from_rates(critical: f64, los: f64, both: f64) -> [[f64; 2]; 2] {
        [
            [1.0 - critical - los + both, los - both],
            [critical - both, both],
        ]
    }

    /// Defaults for the 12-group reference catalog: 9.67% critical, 6.90%
    /// lengthened stay, about 4.7 groups per patient.
    pub fn default_for(catalog: &LabCatalog) -> Self {
        let base_rate_critical = 0.0967;
        let base_rate_los = 0.0690;
        let k = catalog.num_groups();
        let effects: Vec<(f64, f64)> = if k == DEFAULT_GROUP_EFFECTS.len() {
            DEFAULT_GROUP_EFFECTS.to_vec()
        } else {
            vec![(0.5, 0.5); k]
        };
        let group_signal = effects
            .iter()
            .map(|&(c, l)| GroupSignal {
                shift: std::array::from_fn(|z| {
                    let (bc, bl) = latent_bits(z);
                    c * bc as u8 as f64 + l * bl as u8 as f64
                }),
                noise: 1.0,
            })
            .collect();
        let test_reference = if catalog.tests.len() == DEFAULT_TEST_REFERENCE.len() {
            DEFAULT_TEST_REFERENCE
                .iter()
                .map(|&(mean, scale)| TestReference { mean, scale })
                .collect()
        } else {
            vec![TestReference { mean: 0.0, scale: 1.0 }; catalog.tests.len()]
        };
        let (base_logit, severity_gain) = if k == DEFAULT_BASE_LOGIT.len() {
            (DEFAULT_BASE_LOGIT.to_vec(), DEFAULT_SEVERITY_GAIN.to_vec())
        } else {
            (vec![-1.0; k], vec![0.5; k])
        };
        let core_groups = catalog
            .frequency_rank
            .iter()
            .take(2)
            .map(|g| g.0)
            .collect();
        GeneratorConfig {
            schema_version: GENERATOR_SCHEMA_VERSION,
            n_patients: 20_000,
            seed: 7,
            base_rate_critical,
            base_rate_los,
            latent_joint: Self::joint_from_rates(base_rate_critical, base_rate_los, 0.025),
            label_noise: 0.0,
            triage_signal: default_triage_signal(),
            group_signal,
            test_reference,
            panel_policy: PanelPolicy {
                core_groups,
                core_include_prob: 0.97,
                base_logit,
                severity_gain,
                severity_weights: (1.0, 0.5),
            },
        }
    }

    pub fn validate(&self, catalog: &LabCatalog) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.schema_version != GENERATOR_SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.schema_version));
        }
        let prob = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        let joint = self.latent_joint.iter().flatten().copied().collect::<Vec<_>>();
        if !joint.iter().all(|&p| prob(p)) {
            return bad("latent_joint entries must be probabilities".into());
        }
        if (joint.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("latent_joint must sum to 1".into());
        }
        let crit = self.latent_joint[1][0] + self.latent_joint[1][1];
        let los = self.latent_joint[0][1] + self.latent_joint[1][1];
        if (crit - self.base_rate_critical).abs() > 1e-9 || (los - self.base_rate_los).abs() > 1e-9 {
            return bad(format!(
                "latent_joint marginals ({crit}, {los}) do not match base rates ({}, {})",
                self.base_rate_critical, self.base_rate_los
            ));
        }
        if !prob(self.label_noise) || !prob(self.panel_policy.core_include_prob) {
            return bad("label_noise and core_include_prob must be probabilities".into());
        }
        let t = &self.triage_signal;
        for rows in [&t.acuity_probs[..]] {
            for row in rows {
                check_distribution(row, "acuity_probs")?;
            }
        }
        for row in &t.complaint_probs {
            check_distribution(row, "complaint_probs")?;
        }
        if t.noise_sd.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("triage noise_sd must be positive".into());
        }
        let k = catalog.num_groups();
        if self.group_signal.len() != k {
            return bad(format!("group_signal has {} entries, catalog has {k} groups", self.group_signal.len()));
        }
        if self.group_signal.iter().any(|g| !(g.noise > 0.0 && g.noise.is_finite())) {
            return bad("group noise must be positive".into());
        }
        if self.test_reference.len() != catalog.tests.len() {
            return bad(format!(
                "test_reference has {} entries, catalog has {} tests",
                self.test_reference.len(),
                catalog.tests.len()
            ));
        }
        if self.test_reference.iter().any(|r| !(r.scale > 0.0) || !r.mean.is_finite()) {
            return bad("test scales must be positive".into());
        }
        let p = &self.panel_policy;
        if p.base_logit.len() != k || p.severity_gain.len() != k {
            return bad("panel_policy tables must have one entry per group".into());
        }
        if p.core_groups.iter().any(|&g| g as usize >= k) {
            return bad("panel_policy.core_groups names an unknown group".into());
        }
        Ok(())
    }

    /// Lowercase hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Config(e.to_string()))
    }

    /// Marginal probability of the positive outcome under the configured joint.
    pub fn prior(&self, critical_task: bool) -> f64 {
        let base = if critical_task {
            self.latent_joint[1][0] + self.latent_joint[1][1]
        } else {
            self.latent_joint[0][1] + self.latent_joint[1][1]
        };
        base * (1.0 - self.label_noise) + (1.0 - base) * self.label_noise
    }

    pub(crate) fn latent_probs(&self) -> [f64; NUM_LATENT_STATES] {
        std::array::from_fn(|z| {
            let (c, l) = latent_bits(z);
            self.latent_joint[c as usize][l as usize]
        })
    }
}

fn check_distribution(row: &[f64], name: &str) -> Result<(), SynthError> {
    if row.iter().any(|&p| !(p.is_finite() && (0.0..=1.0).contains(&p)))
        || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(SynthError::Config(format!("{name} rows must be distributions")));
    }
    Ok(())
}

fn default_triage_signal() -> TriageSignal {
    // age, hr, rr, sbp, dbp, temp, spo2, acuity (table), pain
    let base_mean = [55.0, 88.0, 18.0, 132.0, 76.0, 36.9, 97.5, 0.0, 4.0];
    let noise_sd = [18.0, 15.0, 3.0, 20.0, 12.0, 0.6, 2.0, 1.0, 3.0];
    let critical = [4.0, 6.0, 1.5, -6.0, -3.0, 0.15, -1.0, 0.0, 0.3];
    let los = [5.0, 1.0, 0.3, -1.0, 0.0, 0.05, -0.3, 0.0, 0.6];
    let shift = std::array::from_fn(|z| {
        let (c, l) = latent_bits(z);
        std::array::from_fn(|f| critical[f] * c as u8 as f64 + los[f] * l as u8 as f64)
    });
    let acuity_probs = [
        [0.02, 0.25, 0.50, 0.20, 0.03],
        [0.04, 0.36, 0.45, 0.13, 0.02],
        [0.20, 0.50, 0.24, 0.05, 0.01],
        [0.25, 0.50, 0.21, 0.03, 0.01],
    ];
    let complaint_probs = [
        [0.18, 0.15, 0.10, 0.08, 0.12, 0.05, 0.12, 0.20],
        [0.20, 0.12, 0.10, 0.08, 0.10, 0.08, 0.14, 0.18],
        [0.12, 0.18, 0.18, 0.12, 0.06, 0.12, 0.10, 0.12],
        [0.12, 0.16, 0.18, 0.12, 0.06, 0.14, 0.10, 0.12],
    ];
    TriageSignal {
        base_mean,
        noise_sd,
        shift,
        acuity_probs,
        complaint_probs,
    }
}
