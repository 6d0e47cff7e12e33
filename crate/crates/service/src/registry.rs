use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use edcopilot::domain::{default_catalog, LabCatalog, OutcomeTask};
use edcopilot::encoder::{checksum, EncoderParams};
use edcopilot::rl::{read_sweep_table, PolicyParams, SweepRow};
use serde::Serialize;

use crate::ServiceError;

pub const MODEL_DIR_ENV: &str = "EDCOPILOT_MODEL_DIR";
pub const ENCODER_FILE: &str = "encoder.edcp";
pub const POLICY_FILE: &str = "policy.edcp";
pub const PARETO_FILE: &str = "pareto.csv";

/// A frozen encoder and policy serving one outcome task.
#[derive(Debug)]
pub struct ModelEntry {
    pub task: OutcomeTask,
    pub catalog: LabCatalog,
    pub encoder: EncoderParams<f32>,
    pub policy: PolicyParams,
    pub pareto: Vec<SweepRow>,
    pub encoder_sha256: String,
    pub policy_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub task: OutcomeTask,
    pub catalog_hash: String,
    pub encoder_sha256: String,
    pub policy_sha256: String,
    pub pareto_rows: usize,
    pub policy_meta: serde_json::Value,
}

impl ModelEntry {
    pub fn new(
        task: OutcomeTask,
        catalog: LabCatalog,
        encoder: EncoderParams<f32>,
        policy: PolicyParams,
        pareto: Vec<SweepRow>,
    ) -> Result<Self, ServiceError> {
        encoder.vocab.check(&catalog)?;
        if policy.input_dim != encoder.config.d_model || policy.num_actions != catalog.num_groups() + 2 {
            return Err(ServiceError::Model(format!(
                "policy expects {} inputs and {} actions; encoder width {} and catalog give {} and {}",
                policy.input_dim,
                policy.num_actions,
                encoder.config.d_model,
                encoder.config.d_model,
                catalog.num_groups() + 2
            )));
        }
        Ok(ModelEntry {
            encoder_sha256: checksum(&encoder.to_bytes()),
            policy_sha256: checksum(&policy.to_bytes(&catalog)),
            task,
            catalog,
            encoder,
            policy,
            pareto,
        })
    }

    /// Loads `dir/{encoder.edcp, policy.edcp}` and the optional `pareto.csv`.
    pub fn load(dir: &Path, task: OutcomeTask, catalog: &LabCatalog) -> Result<Self, ServiceError> {
        let enc_bytes = std::fs::read(dir.join(ENCODER_FILE))?;
        let pol_bytes = std::fs::read(dir.join(POLICY_FILE))?;
        let encoder = EncoderParams::from_bytes(&enc_bytes, catalog)?;
        let policy = PolicyParams::from_bytes(&pol_bytes, catalog)?;
        let pareto_path = dir.join(PARETO_FILE);
        let pareto = if pareto_path.exists() {
            read_sweep_table(&pareto_path)?
        } else {
            Vec::new()
        };
        let mut e = ModelEntry::new(task, catalog.clone(), encoder, policy, pareto)?;
        e.encoder_sha256 = checksum(&enc_bytes);
        e.policy_sha256 = checksum(&pol_bytes);
        Ok(e)
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            task: self.task,
            catalog_hash: self.catalog.hash(),
            encoder_sha256: self.encoder_sha256.clone(),
            policy_sha256: self.policy_sha256.clone(),
            pareto_rows: self.pareto.len(),
            policy_meta: self.policy.meta.clone(),
        }
    }
}

/// Loaded models, one per task.
#[derive(Debug, Default)]
pub struct Registry {
    models: BTreeMap<&'static str, Arc<ModelEntry>>,
    pub root: Option<PathBuf>,
}

impl Registry {
    pub fn insert(&mut self, entry: ModelEntry) {
        self.models.insert(entry.task.as_str(), Arc::new(entry));
    }

    pub fn get(&self, task: OutcomeTask) -> Option<Arc<ModelEntry>> {
        self.models.get(task.as_str()).cloned()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn listing(&self) -> Vec<ModelInfo> {
        self.models.values().map(|m| m.info()).collect()
    }

    pub fn all(&self) -> Vec<Arc<ModelEntry>> {
        self.models.values().cloned().collect()
    }

    /// The only loaded model, if exactly one is loaded.
    pub fn single(&self) -> Option<Arc<ModelEntry>> {
        (self.models.len() == 1).then(|| self.models.values().next().cloned()).flatten()
    }

    /// Loads every `root/<task>/` directory holding an encoder and a policy.
    pub fn load_dir(root: &Path) -> Result<Self, ServiceError> {
        let catalog = default_catalog();
        let mut reg = Registry {
            root: Some(root.to_path_buf()),
            ..Registry::default()
        };
        for task in [OutcomeTask::CriticalOutcome, OutcomeTask::LengthenedStay] {
            let dir = root.join(task.as_str());
            if dir.join(ENCODER_FILE).exists() && dir.join(POLICY_FILE).exists() {
                reg.insert(ModelEntry::load(&dir, task, &catalog)?);
                log::info!("loaded {} model from {}", task.as_str(), dir.display());
            }
        }
        Ok(reg)
    }

    /// [`Registry::load_dir`] on `$EDCOPILOT_MODEL_DIR`; empty when unset.
    pub fn from_env() -> Result<Self, ServiceError> {
        match std::env::var_os(MODEL_DIR_ENV) {
            Some(d) => Self::load_dir(Path::new(&d)),
            None => Ok(Registry::default()),
        }
    }
}
