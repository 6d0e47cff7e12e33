use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{LabCatalog, NamingMode};
use crate::encoder::{
    check_catalog_hash, decode_weights, encode_weights, masked_softmax, mlp_forward, normal_tensor,
    EncoderError, ParamSet, Tape, Tensor, Var, WeightsHeader,
};
use crate::util::stream_rng;

use super::RlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { hidden: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDims {
    hidden: usize,
    input_dim: usize,
    num_actions: usize,
}

/// Actor and critic MLPs over a feature vector (the frozen encoder's
/// last-EOS hidden state).
///
/// Tensor order: `actor.{w1,b1,w2,b2}`, `critic.{w1,b1,w2,b2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub input_dim: usize,
    pub num_actions: usize,
    pub weights: ParamSet<f32>,
    /// Free-form provenance stored in the weights header.
    pub meta: serde_json::Value,
}

impl PolicyParams {
    pub fn init(config: PolicyConfig, input_dim: usize, num_actions: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xAC7);
        let h = config.hidden;
        let mut w = ParamSet::default();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        w.push("actor.w1", normal_tensor(input_dim, h, inv(input_dim), &mut rng));
        w.push("actor.b1", Tensor::zeros(1, h));
        w.push("actor.w2", normal_tensor(h, num_actions, 0.01 * inv(h), &mut rng));
        w.push("actor.b2", Tensor::zeros(1, num_actions));
        w.push("critic.w1", normal_tensor(input_dim, h, inv(input_dim), &mut rng));
        w.push("critic.b1", Tensor::zeros(1, h));
        w.push("critic.w2", normal_tensor(h, 1, inv(h), &mut rng));
        w.push("critic.b2", Tensor::zeros(1, 1));
        PolicyParams {
            config,
            input_dim,
            num_actions,
            weights: w,
            meta: serde_json::Value::Null,
        }
    }

    fn check_input(&self, x: &[f32]) {
        assert_eq!(x.len(), self.input_dim, "policy input width");
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        self.check_input(x);
        let t = &self.weights.tensors;
        mlp_forward(x, &t[0], &t[1], &t[2], &t[3])
    }

    pub fn value(&self, x: &[f32]) -> f32 {
        self.check_input(x);
        let t = &self.weights.tensors;
        mlp_forward(x, &t[4], &t[5], &t[6], &t[7])[0]
    }

    /// Action distribution; illegal actions get probability exactly 0.
    pub fn probs(&self, x: &[f32], mask: &[bool]) -> Vec<f32> {
        assert!(mask.iter().any(|&m| m), "no legal action");
        masked_softmax(&self.logits(x), Some(mask))
    }

    /// Most probable legal action; ties go to the lower index.
    pub fn greedy(&self, x: &[f32], mask: &[bool]) -> usize {
        let p = self.probs(x, mask);
        let mut best = None;
        for (i, &q) in p.iter().enumerate().filter(|&(i, _)| mask[i]) {
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((i, q));
            }
        }
        best.expect("a legal action").0
    }

    /// Samples a legal action; returns it with its probability.
    pub fn sample<R: Rng>(&self, x: &[f32], mask: &[bool], rng: &mut R) -> (usize, f32) {
        let p = self.probs(x, mask);
        let u: f32 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (i, &q) in p.iter().enumerate().filter(|&(i, _)| mask[i]) {
            acc += q;
            last = Some((i, q));
            if u < acc && q > 0.0 {
                return (i, q);
            }
        }
        last.expect("a legal action")
    }

    /// Records `(logits, values)` for a batch of feature rows.
    pub fn on_tape(&self, tape: &mut Tape<f32>, v: &[Var], x: Var) -> (Var, Var) {
        let a = tape.linear(x, v[0], v[1]);
        let a = tape.gelu(a);
        let logits = tape.linear(a, v[2], v[3]);
        let c = tape.linear(x, v[4], v[5]);
        let c = tape.gelu(c);
        let values = tape.linear(c, v[6], v[7]);
        (logits, values)
    }

    fn header(&self, catalog_hash: &str, naming_mode: NamingMode) -> WeightsHeader {
        WeightsHeader {
            kind: "policy".into(),
            dims: serde_json::to_value(PolicyDims {
                hidden: self.config.hidden,
                input_dim: self.input_dim,
                num_actions: self.num_actions,
            })
            .expect("dims serialize"),
            catalog_hash: catalog_hash.to_string(),
            naming_mode,
            tensors: Vec::new(),
            vocab: None,
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self, catalog: &LabCatalog) -> Vec<u8> {
        encode_weights(self.header(&catalog.hash(), catalog.naming_mode), &self.weights)
    }

    pub fn save(&self, path: &Path, catalog: &LabCatalog) -> Result<(), RlError> {
        std::fs::write(path, self.to_bytes(catalog))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], catalog: &LabCatalog) -> Result<Self, RlError> {
        let (header, weights) = decode_weights(bytes)?;
        if header.kind != "policy" {
            return Err(EncoderError::Format(format!("expected policy weights, found {}", header.kind)).into());
        }
        check_catalog_hash(&header.catalog_hash, catalog)?;
        let dims: PolicyDims = serde_json::from_value(header.dims)
            .map_err(|e| EncoderError::Format(format!("dims: {e}")))?;
        let expected = PolicyParams::init(PolicyConfig { hidden: dims.hidden }, dims.input_dim, dims.num_actions, 0);
        let shapes = |p: &ParamSet<f32>| p.tensors.iter().map(|t| t.shape()).collect::<Vec<_>>();
        if shapes(&weights) != shapes(&expected.weights) || weights.names != expected.weights.names {
            return Err(EncoderError::Shape("policy tensors do not match their dims".into()).into());
        }
        if !weights.all_finite() {
            return Err(EncoderError::NonFinite("stored policy weights".into()).into());
        }
        if dims.num_actions != catalog.num_groups() + 2 {
            return Err(RlError::Config(format!(
                "policy has {} actions, catalog implies {}",
                dims.num_actions,
                catalog.num_groups() + 2
            )));
        }
        Ok(PolicyParams {
            config: PolicyConfig { hidden: dims.hidden },
            input_dim: dims.input_dim,
            num_actions: dims.num_actions,
            weights,
            meta: header.meta,
        })
    }

    pub fn load(path: &Path, catalog: &LabCatalog) -> Result<Self, RlError> {
        Self::from_bytes(&std::fs::read(path)?, catalog)
    }
}
