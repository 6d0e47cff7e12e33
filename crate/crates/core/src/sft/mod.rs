//! Teacher-forced training of the encoder on next-group prediction and
//! outcome classification.

mod eval;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, LabCatalog, NamingMode, OutcomeTask, PatientRecord};
use crate::encoder::{
    clip_grad_norm, grad, AdamConfig, AdamState, EncoderConfig, EncoderError, EncoderParams, Float,
    Head, Prefix, Tape, Tensor, Var, Vocab, DEFAULT_MAX_LEN, DEFAULT_NUM_BINS,
};
use crate::util::stream_rng;

pub use eval::{
    next_group_accuracy, sft_eval, unigram_precision, EncoderSuggester, RandomSuggester,
    SftEvalReport, Suggester,
};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid sft config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Parameters after the last finite update.
        checkpoint: Box<EncoderParams<f32>>,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub task: OutcomeTask,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the outcome loss on positive records.
    pub class_weight: f64,
    pub naming_mode: NamingMode,
    pub seed: u64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub num_bins: usize,
    pub max_len: usize,
    pub encoder: EncoderConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            task: OutcomeTask::CriticalOutcome,
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            class_weight: 10.0,
            naming_mode: NamingMode::RawName,
            seed: 0,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            num_bins: DEFAULT_NUM_BINS,
            max_len: DEFAULT_MAX_LEN,
            encoder: EncoderConfig::default(),
        }
    }
}

impl SftConfig {
    /// Small learning rate for encoders in the hundreds of millions of parameters.
    pub fn large_model_preset() -> Self {
        SftConfig {
            lr: 1e-5,
            ..SftConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SftError> {
        let bad = |m: &str| Err(SftError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.class_weight >= 1.0) {
            return bad("class_weight must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Batch-mean loss and its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLoss {
    pub total: f64,
    pub lab: f64,
    pub outcome: f64,
}

/// Records the per-record losses `(L_lab, L_y)` on `tape`. `L_lab` is `None`
/// for a record without lab groups.
pub fn record_loss_on_tape<F: Float>(
    params: &EncoderParams<F>,
    tape: &mut Tape<F>,
    vars: &[Var],
    record: &PatientRecord,
    task: OutcomeTask,
    class_weight: f64,
) -> Result<(Option<Var>, Var), SftError> {
    let seq = params.vocab.tokenize(Prefix::full(record))?;
    let hidden = params.hidden_on_tape(tape, vars, &seq.ids)?;
    let n = record.observed.len();
    let lab = if n == 0 {
        None
    } else {
        // Group i is predicted from the EOS that closes the block before it.
        let rows = tape.gather_rows(hidden, &seq.eos_positions[..n]);
        let logits = params.head_on_tape(tape, vars, Head::NextGroup, rows);
        let targets: Vec<usize> = record.observed.iter().map(|r| r.group_id.index()).collect();
        let w = vec![F::of(1.0 / n as f64); n];
        Some(tape.cross_entropy(logits, &targets, &w))
    };
    let last = tape.gather_rows(hidden, &seq.eos_positions[n..]);
    let logits = params.head_on_tape(tape, vars, Head::Outcome, last);
    let y = record.label(task);
    let w = if y { class_weight } else { 1.0 };
    let out = tape.cross_entropy(logits, &[y as usize], &[F::of(w)]);
    Ok((lab, out))
}

fn batch_loss_and_grad<F: Float>(
    params: &EncoderParams<F>,
    batch: &[&PatientRecord],
    task: OutcomeTask,
    class_weight: f64,
    want_grad: bool,
) -> Result<(SftLoss, Vec<Tensor<F>>), SftError> {
    if batch.is_empty() {
        return Err(SftError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut sum = SftLoss {
        total: 0.0,
        lab: 0.0,
        outcome: 0.0,
    };
    let mut grads = if want_grad {
        params.weights.zeros_like()
    } else {
        Vec::new()
    };
    for record in batch {
        let mut parts = (0.0, 0.0);
        let mut run = |tape: &mut Tape<F>, v: &[Var]| {
            let (lab, out) = record_loss_on_tape(params, tape, v, record, task, class_weight)
                .map_err(|e| match e {
                    SftError::Encoder(e) => e,
                    other => EncoderError::Vocab(other.to_string()),
                })?;
            parts = (
                lab.map_or(0.0, |l| tape.value(l).scalar().as_f64()),
                tape.value(out).scalar().as_f64(),
            );
            let terms: Vec<Var> = lab.into_iter().chain([out]).collect();
            let s = tape.sum(&terms);
            Ok(tape.scale(s, F::of(scale)))
        };
        if want_grad {
            let (_, g) = grad(&params.weights.tensors, run)?;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        } else {
            let mut tape = Tape::new();
            let v: Vec<Var> = params
                .weights
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone()))
                .collect();
            run(&mut tape, &v)?;
        }
        sum.lab += parts.0 * scale;
        sum.outcome += parts.1 * scale;
    }
    sum.total = sum.lab + sum.outcome;
    if !sum.total.is_finite() {
        return Err(EncoderError::NonFinite(format!("batch loss {}", sum.total)).into());
    }
    Ok((sum, grads))
}

/// Batch-mean of `L_lab + L_y` with the terms reported separately.
pub fn loss_sft<F: Float>(
    params: &EncoderParams<F>,
    batch: &[PatientRecord],
    task: OutcomeTask,
    class_weight: f64,
) -> Result<SftLoss, SftError> {
    let refs: Vec<&PatientRecord> = batch.iter().collect();
    batch_loss_and_grad(params, &refs, task, class_weight, false).map(|(l, _)| l)
}

/// Loss and the gradient of every encoder tensor.
pub fn loss_sft_grad<F: Float>(
    params: &EncoderParams<F>,
    batch: &[PatientRecord],
    task: OutcomeTask,
    class_weight: f64,
) -> Result<(SftLoss, Vec<Tensor<F>>), SftError> {
    let refs: Vec<&PatientRecord> = batch.iter().collect();
    batch_loss_and_grad(params, &refs, task, class_weight, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_lab: f64,
    pub train_outcome: f64,
    pub val_next_accuracy: f64,
    pub val_auc: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    /// Checkpoint with the best validation F1 (ties broken by AUC, then by the earlier epoch).
    pub params: EncoderParams<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<(), SftError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Fits the vocabulary on `train`, then runs shuffled mini-batch AdamW with
/// linear warmup. Deterministic given `config.seed`.
pub fn train_sft(
    config: &SftConfig,
    catalog: &LabCatalog,
    train: &[PatientRecord],
    val: &[PatientRecord],
) -> Result<SftOutcome, SftError> {
    config.validate()?;
    if train.is_empty() {
        return Err(SftError::EmptyBatch);
    }
    let catalog = catalog.clone().with_naming_mode(config.naming_mode);
    let vocab = Vocab::fit(&catalog, train, config.num_bins, config.max_len)?;
    let mut params: EncoderParams<f32> = EncoderParams::init(config.encoder, vocab, config.seed)?;
    let mut adam = AdamState::new(
        &params.weights,
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let warmup = ((config.warmup_frac * total_steps as f64).ceil() as usize).max(1);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<((f64, f64), usize, EncoderParams<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = stream_rng(config.seed, 0x5F7 + epoch as u64);
        order.shuffle(&mut rng);
        let mut acc = SftLoss {
            total: 0.0,
            lab: 0.0,
            outcome: 0.0,
        };
        let mut lr_scale = 1.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let diverged = |reason: String, params: &EncoderParams<f32>| SftError::Diverged {
                epoch,
                batch: b,
                reason,
                checkpoint: Box::new(params.clone()),
            };
            let (loss, mut grads) =
                match batch_loss_and_grad(&params, &batch, config.task, config.class_weight, true) {
                    Ok(x) => x,
                    Err(SftError::Encoder(EncoderError::NonFinite(m))) => {
                        return Err(diverged(m, &params))
                    }
                    Err(e) => return Err(e),
                };
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let step = epoch * per_epoch + b;
            lr_scale = ((step + 1) as f64 / warmup as f64).min(1.0);
            let before = params.weights.clone();
            adam.update(&mut params.weights, &grads, lr_scale);
            if !params.weights.all_finite() {
                params.weights = before;
                return Err(diverged("non-finite parameters".into(), &params));
            }
            let w = batch.len() as f64 / train.len() as f64;
            acc.total += loss.total * w;
            acc.lab += loss.lab * w;
            acc.outcome += loss.outcome * w;
        }
        let report = if val.is_empty() {
            None
        } else {
            Some(sft_eval(&params, &catalog, val, config.task, false)?)
        };
        let (val_acc, val_auc, val_f1) = report.as_ref().map_or((0.0, 0.5, 0.0), |r| {
            (r.next_group_accuracy, r.outcome.auc, r.outcome.f1)
        });
        history.push(EpochRecord {
            epoch,
            train_loss: acc.total,
            train_lab: acc.lab,
            train_outcome: acc.outcome,
            val_next_accuracy: val_acc,
            val_auc,
            val_f1,
            lr: config.lr * lr_scale,
        });
        log::info!(
            "sft epoch {epoch}: loss {:.4} (lab {:.4}, outcome {:.4}), val acc {val_acc:.3} auc {val_auc:.3} f1 {val_f1:.3}",
            acc.total,
            acc.lab,
            acc.outcome
        );
        let key = (val_f1, val_auc);
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(SftOutcome {
        params,
        best_epoch,
        history,
    })
}
