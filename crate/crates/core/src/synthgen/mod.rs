//! Synthetic cohorts drawn from a two-bit latent model, the matching exact
//! posterior, stratified splits and the line-delimited cohort file.

mod config;
mod io;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::domain::{
    DomainError, GroupId, LabCatalog, LabResult, OutcomeTask, PatientRecord, TriageRecord,
    ACUITY_INDEX,
};
use crate::util::{log_sum_exp, stream_rng};

pub use config::{
    latent_bits, latent_index, GeneratorConfig, GroupSignal, PanelPolicy, TestReference,
    TriageSignal, GENERATOR_SCHEMA_VERSION, NUM_ACUITY_LEVELS, NUM_LATENT_STATES,
};
pub use io::{read_cohort, write_cohort, LoadedCohort, ReadWarning, COHORT_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generator config: {0}")]
    Config(String),
    #[error("posterior oracle: {0}")]
    Oracle(String),
    #[error("split: {0}")]
    Split(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub config_digest: String,
    pub catalog_hash: String,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn positive_rate(&self, task: OutcomeTask) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        self.patients.iter().filter(|p| p.label(task)).count() as f64 / self.patients.len() as f64
    }

    pub fn mean_groups(&self) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        self.patients.iter().map(|p| p.observed.len()).sum::<usize>() as f64
            / self.patients.len() as f64
    }

    fn with_patients(&self, patients: Vec<PatientRecord>) -> Cohort {
        Cohort {
            patients,
            config_digest: self.config_digest.clone(),
            catalog_hash: self.catalog_hash.clone(),
        }
    }
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a cohort. Patient `i` uses its own random stream derived from
/// `(config.seed, i)`, so the output is a pure function of the inputs.
pub fn generate(config: &GeneratorConfig, catalog: &LabCatalog) -> Result<Cohort, SynthError> {
    catalog.validate()?;
    config.validate(catalog)?;
    let prior = config.latent_probs();
    let patients = (0..config.n_patients)
        .map(|i| generate_patient(config, catalog, &prior, i))
        .collect();
    Ok(Cohort {
        patients,
        config_digest: config.digest(),
        catalog_hash: catalog.hash(),
    })
}

fn generate_patient(
    config: &GeneratorConfig,
    catalog: &LabCatalog,
    prior: &[f64; NUM_LATENT_STATES],
    index: usize,
) -> PatientRecord {
    let mut rng = stream_rng(config.seed, index as u64);
    let z = categorical(&mut rng, prior);
    let (critical, los) = latent_bits(z);
    let mut flip = |bit: bool| {
        if config.label_noise > 0.0 && rng.random::<f64>() < config.label_noise {
            !bit
        } else {
            bit
        }
    };
    let y_critical = flip(critical);
    let y_los = flip(los);

    let ts = &config.triage_signal;
    let mut values = [0.0; crate::domain::NUM_TRIAGE_FEATURES];
    for (f, v) in values.iter_mut().enumerate() {
        if f == ACUITY_INDEX {
            *v = (categorical(&mut rng, &ts.acuity_probs[z]) + 1) as f64;
        } else {
            let e: f64 = rng.sample(StandardNormal);
            *v = ts.base_mean[f] + ts.shift[z][f] + ts.noise_sd[f] * e;
        }
    }
    let chief_complaint = categorical(&mut rng, &ts.complaint_probs[z]) as u8;

    let panel = draw_panel(&config.panel_policy, catalog.num_groups(), z, &mut rng);
    let observed = panel
        .into_iter()
        .map(|g| {
            let signal = &config.group_signal[g.index()];
            let values = catalog.groups[g.index()]
                .tests
                .iter()
                .map(|&t| {
                    let r = config.test_reference[t as usize];
                    let e: f64 = rng.sample(StandardNormal);
                    r.mean + r.scale * (signal.shift[z] + signal.noise * e)
                })
                .collect();
            LabResult { group_id: g, values }
        })
        .collect();

    PatientRecord {
        id: format!("P{index:06}"),
        triage: TriageRecord {
            values,
            chief_complaint,
        },
        observed,
        y_critical,
        y_los,
        latent_state: Some((critical, los)),
    }
}

fn draw_panel<R: Rng>(policy: &PanelPolicy, k: usize, z: usize, rng: &mut R) -> Vec<GroupId> {
    let mut core: Vec<GroupId> = Vec::new();
    for &g in &policy.core_groups {
        if rng.random::<f64>() < policy.core_include_prob {
            core.push(GroupId(g));
        }
    }
    if core.len() == 2 && rng.random::<bool>() {
        core.swap(0, 1);
    }
    // Weighted random permutation by exponential race: smaller key goes first.
    let sev = policy.severity(z);
    let mut rest: Vec<(f64, GroupId)> = Vec::new();
    for g in 0..k {
        if policy.core_groups.contains(&(g as u8)) {
            continue;
        }
        let included = rng.random::<f64>() < policy.inclusion_prob(g, z);
        let u: f64 = rng.random();
        if included {
            let w = (policy.base_logit[g] + policy.severity_gain[g] * sev).exp();
            rest.push((-(1.0 - u).ln() / w, GroupId(g as u8)));
        }
    }
    rest.sort_by(|a, b| a.0.total_cmp(&b.0));
    core.extend(rest.into_iter().map(|(_, g)| g));
    core
}

fn log_normal(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * u * u - sd.ln()
}

/// Exact `P(label = 1 | triage, results of the first k groups)` under the
/// generating model, by enumeration of the four latent states. Which groups
/// a patient received is not used as evidence.
pub fn bayes_posterior(
    record: &PatientRecord,
    k: usize,
    config: &GeneratorConfig,
    catalog: &LabCatalog,
    task: OutcomeTask,
) -> Result<f64, SynthError> {
    config
        .validate(catalog)
        .map_err(|e| SynthError::Oracle(e.to_string()))?;
    if k > record.observed.len() {
        return Err(SynthError::Oracle(format!(
            "prefix length {k} exceeds the {} observed groups of {}",
            record.observed.len(),
            record.id
        )));
    }
    let ts = &config.triage_signal;
    let acuity = record.triage.values[ACUITY_INDEX];
    if acuity.fract() != 0.0 || !(1.0..=5.0).contains(&acuity) {
        return Err(SynthError::Oracle(format!("acuity {acuity} outside the model")));
    }
    let cc = record.triage.chief_complaint as usize;
    if cc >= ts.complaint_probs[0].len() {
        return Err(SynthError::Oracle(format!("chief complaint {cc} outside the model")));
    }
    let prior = config.latent_probs();
    let mut log_joint = [f64::NEG_INFINITY; NUM_LATENT_STATES];
    for (z, lj) in log_joint.iter_mut().enumerate() {
        if prior[z] == 0.0 {
            continue;
        }
        let mut s = prior[z].ln();
        for (f, &v) in record.triage.values.iter().enumerate() {
            s += if f == ACUITY_INDEX {
                ts.acuity_probs[z][acuity as usize - 1].ln()
            } else {
                log_normal(v, ts.base_mean[f] + ts.shift[z][f], ts.noise_sd[f])
            };
        }
        s += ts.complaint_probs[z][cc].ln();
        for r in &record.observed[..k] {
            let g = catalog
                .group(r.group_id)
                .map_err(|e| SynthError::Oracle(e.to_string()))?;
            if r.values.len() != g.tests.len() {
                return Err(SynthError::Oracle(format!(
                    "{}: group {} has {} values, catalog expects {}",
                    record.id,
                    g.short_name,
                    r.values.len(),
                    g.tests.len()
                )));
            }
            let signal = &config.group_signal[g.id.index()];
            for (&t, &v) in g.tests.iter().zip(&r.values) {
                let re = config.test_reference[t as usize];
                s += log_normal((v - re.mean) / re.scale, signal.shift[z], signal.noise);
            }
        }
        *lj = s;
    }
    let norm = log_sum_exp(&log_joint);
    let bit = |z: usize| {
        let (c, l) = latent_bits(z);
        match task {
            OutcomeTask::CriticalOutcome => c,
            OutcomeTask::LengthenedStay => l,
        }
    };
    let positive: Vec<f64> = (0..NUM_LATENT_STATES)
        .filter(|&z| bit(z))
        .map(|z| log_joint[z])
        .collect();
    let p_latent = (log_sum_exp(&positive) - norm).exp().min(1.0);
    let eps = config.label_noise;
    Ok(p_latent * (1.0 - eps) + (1.0 - p_latent) * eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub stratify_on: OutcomeTask,
}

impl SplitSpec {
    pub fn new(seed: u64, stratify_on: OutcomeTask) -> Self {
        SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed,
            stratify_on,
        }
    }
}

/// Stratified train/validation/test partition. Each class is shuffled on its
/// own and cut at the requested fractions; patients keep their original
/// relative order inside every split.
pub fn split(cohort: &Cohort, spec: &SplitSpec) -> Result<(Cohort, Cohort, Cohort), SynthError> {
    let (a, b, c) = spec.fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(SynthError::Split(format!("fractions {a}, {b}, {c} must sum to 1")));
    }
    if cohort.len() < 10 {
        return Err(SynthError::Split(format!(
            "need at least 10 patients, got {}",
            cohort.len()
        )));
    }
    let mut assignment = vec![0u8; cohort.len()];
    for (stream, class) in [false, true].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.patients[i].label(spec.stratify_on) == class)
            .collect();
        let mut rng = stream_rng(spec.seed, stream as u64);
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        let n_train = (a * n as f64).round() as usize;
        let n_val = ((b * n as f64).round() as usize).min(n - n_train);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let take = |which: u8| {
        cohort.with_patients(
            cohort
                .patients
                .iter()
                .zip(&assignment)
                .filter(|(_, &s)| s == which)
                .map(|(p, _)| p.clone())
                .collect(),
        )
    };
    Ok((take(0), take(1), take(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{default_catalog, groups};
    use std::collections::HashSet;

    fn small(n: usize, seed: u64) -> (GeneratorConfig, LabCatalog) {
        let c = default_catalog();
        let mut cfg = GeneratorConfig::default_for(&c);
        cfg.n_patients = n;
        cfg.seed = seed;
        (cfg, c)
    }

    #[test]
    fn empty_cohort_is_not_an_error() {
        let (cfg, c) = small(0, 1);
        assert!(generate(&cfg, &c).unwrap().is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let (cfg, c) = small(300, 3);
        let a = generate(&cfg, &c).unwrap();
        assert_eq!(a, generate(&cfg, &c).unwrap());
        for p in &a.patients {
            p.validate(&c).unwrap();
        }
        // A patient's draw depends only on its index.
        let (cfg2, _) = small(10, 3);
        assert_eq!(generate(&cfg2, &c).unwrap().patients[..], a.patients[..10]);
    }

    #[test]
    fn core_groups_lead_the_panel() {
        let (cfg, c) = small(500, 5);
        let coh = generate(&cfg, &c).unwrap();
        for p in &coh.patients {
            let n_core = p
                .observed
                .iter()
                .filter(|r| r.group_id == groups::CBC || r.group_id == groups::CHEM)
                .count();
            for r in &p.observed[..n_core] {
                assert!(r.group_id == groups::CBC || r.group_id == groups::CHEM);
            }
        }
    }

    #[test]
    fn chem_and_cbc_are_most_frequent() {
        let (cfg, c) = small(3000, 11);
        let coh = generate(&cfg, &c).unwrap();
        let mut counts = [0usize; 12];
        for p in &coh.patients {
            for g in p.panel() {
                counts[g.index()] += 1;
            }
        }
        let mut order: Vec<usize> = (0..12).collect();
        order.sort_by_key(|&g| std::cmp::Reverse(counts[g]));
        let top: HashSet<usize> = order[..2].iter().copied().collect();
        assert_eq!(top, HashSet::from([groups::CBC.index(), groups::CHEM.index()]));
    }

    #[test]
    fn posterior_without_evidence_is_the_prior() {
        let (mut cfg, c) = small(20, 2);
        cfg.triage_signal.shift = [[0.0; 9]; 4];
        let uniform_a = [0.2; 5];
        let uniform_c = [0.125; 8];
        cfg.triage_signal.acuity_probs = [uniform_a; 4];
        cfg.triage_signal.complaint_probs = [uniform_c; 4];
        let coh = generate(&cfg, &c).unwrap();
        for p in &coh.patients {
            let post = bayes_posterior(p, 0, &cfg, &c, OutcomeTask::CriticalOutcome).unwrap();
            assert!((post - 0.0967).abs() < 1e-12, "{post}");
            let post = bayes_posterior(p, 0, &cfg, &c, OutcomeTask::LengthenedStay).unwrap();
            assert!((post - 0.0690).abs() < 1e-12, "{post}");
        }
    }

    #[test]
    fn overwhelming_group_signal_recovers_the_latent() {
        let (mut cfg, c) = small(200, 9);
        for g in &mut cfg.group_signal {
            g.shift = [0.0, 0.0, 60.0, 60.0];
            g.noise = 1.0;
        }
        cfg.panel_policy.core_include_prob = 1.0;
        let coh = generate(&cfg, &c).unwrap();
        for p in &coh.patients {
            let post = bayes_posterior(p, 1, &cfg, &c, OutcomeTask::CriticalOutcome).unwrap();
            let truth = p.latent_state.unwrap().0;
            assert_eq!(post, if truth { 1.0 } else { 0.0 }, "{}", p.id);
        }
    }

    #[test]
    fn posterior_errors_on_long_prefix_and_mismatched_config() {
        let (cfg, c) = small(5, 2);
        let coh = generate(&cfg, &c).unwrap();
        let p = &coh.patients[0];
        let n = p.observed.len();
        assert!(matches!(
            bayes_posterior(p, n + 1, &cfg, &c, OutcomeTask::CriticalOutcome),
            Err(SynthError::Oracle(_))
        ));
        let mut bad = cfg.clone();
        bad.group_signal.pop();
        assert!(matches!(
            bayes_posterior(p, 0, &bad, &c, OutcomeTask::CriticalOutcome),
            Err(SynthError::Oracle(_))
        ));
    }

    #[test]
    fn label_noise_mixes_the_posterior() {
        let (mut cfg, c) = small(3, 4);
        let clean = generate(&cfg, &c).unwrap();
        let p = &clean.patients[0];
        let q = bayes_posterior(p, 0, &cfg, &c, OutcomeTask::CriticalOutcome).unwrap();
        cfg.label_noise = 0.1;
        let noisy = bayes_posterior(p, 0, &cfg, &c, OutcomeTask::CriticalOutcome).unwrap();
        assert!((noisy - (0.9 * q + 0.1 * (1.0 - q))).abs() < 1e-12);
    }

    fn labelled(n: usize, positives: usize) -> Cohort {
        let (cfg, c) = small(n, 1);
        let mut coh = generate(&cfg, &c).unwrap();
        for (i, p) in coh.patients.iter_mut().enumerate() {
            p.y_critical = i < positives;
        }
        coh
    }

    #[test]
    fn split_is_exactly_stratified_on_round_numbers() {
        let coh = labelled(1000, 100);
        let spec = SplitSpec::new(42, OutcomeTask::CriticalOutcome);
        let (tr, va, te) = split(&coh, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        let pos = |c: &Cohort| c.patients.iter().filter(|p| p.y_critical).count();
        assert_eq!((pos(&tr), pos(&va), pos(&te)), (80, 10, 10));
        let (tr2, va2, te2) = split(&coh, &spec).unwrap();
        assert_eq!((tr, va, te), (tr2, va2, te2));
    }

    #[test]
    fn split_is_a_partition() {
        let coh = labelled(237, 31);
        let (tr, va, te) = split(&coh, &SplitSpec::new(3, OutcomeTask::CriticalOutcome)).unwrap();
        let mut ids: Vec<&str> = tr
            .patients
            .iter()
            .chain(&va.patients)
            .chain(&te.patients)
            .map(|p| p.id.as_str())
            .collect();
        assert_eq!(ids.len(), coh.len());
        ids.sort();
        let mut orig: Vec<&str> = coh.patients.iter().map(|p| p.id.as_str()).collect();
        orig.sort();
        assert_eq!(ids, orig);
    }

    #[test]
    fn split_rejects_tiny_cohorts_and_bad_fractions() {
        let coh = labelled(9, 1);
        assert!(split(&coh, &SplitSpec::new(0, OutcomeTask::CriticalOutcome)).is_err());
        let coh = labelled(50, 5);
        let mut spec = SplitSpec::new(0, OutcomeTask::CriticalOutcome);
        spec.fractions = (0.8, 0.1, 0.2);
        assert!(split(&coh, &spec).is_err());
    }
}
