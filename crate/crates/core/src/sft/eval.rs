use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ConfusionCounts, GroupId, LabCatalog, LabResult, MetricReport, OutcomeTask, PatientRecord};
use crate::encoder::{masked_softmax, EncoderCache, EncoderParams, Prefix};
use crate::eval::auc;

use super::SftError;

/// Anything that scores the next lab group.
pub trait Suggester {
    /// Group scores after each true prefix of `record`; row `i` follows its first `i` groups.
    fn teacher_forced(&mut self, record: &PatientRecord) -> Result<Vec<Vec<f64>>, SftError>;

    /// Greedily suggests `len` distinct groups, feeding back the record's
    /// result for each suggested group, or a zero-filled block when the
    /// patient never received it.
    fn rollout(&mut self, record: &PatientRecord, len: usize) -> Result<Vec<GroupId>, SftError>;
}

fn argmax_excluding(scores: &[f64], taken: &[GroupId]) -> usize {
    (0..scores.len())
        .filter(|&g| !taken.iter().any(|t| t.index() == g))
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .expect("a free group remains")
}

fn argmax(scores: &[f64]) -> usize {
    argmax_excluding(scores, &[])
}

/// Suggests with the encoder's next-group head.
pub struct EncoderSuggester<'a> {
    pub params: &'a EncoderParams<f32>,
    pub catalog: &'a LabCatalog,
}

impl Suggester for EncoderSuggester<'_> {
    fn teacher_forced(&mut self, record: &PatientRecord) -> Result<Vec<Vec<f64>>, SftError> {
        let seq = self.params.vocab.tokenize(Prefix::full(record))?;
        let out = self.params.forward(&seq)?;
        Ok((0..out.next_logits.rows)
            .map(|i| out.next_logits.row(i).iter().map(|&x| x as f64).collect())
            .collect())
    }

    fn rollout(&mut self, record: &PatientRecord, len: usize) -> Result<Vec<GroupId>, SftError> {
        let vocab = &self.params.vocab;
        let mut cache = EncoderCache::new(self.params);
        cache.extend(&vocab.triage_block(&record.triage)?)?;
        let mut taken = Vec::with_capacity(len);
        for _ in 0..len.min(vocab.num_groups()) {
            let logits = self.params.next_group_probs(cache.last_hidden());
            let scores: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
            let g = GroupId(argmax_excluding(&scores, &taken) as u8);
            taken.push(g);
            let block = match record.result(g) {
                Some(r) => vocab.group_block(r)?,
                None => vocab.group_block(&LabResult::zero_filled(g, self.catalog))?,
            };
            cache.extend(&block)?;
        }
        Ok(taken)
    }
}

/// Scores every group with an independent uniform draw.
pub struct RandomSuggester {
    pub num_groups: usize,
    pub rng: ChaCha8Rng,
}

impl RandomSuggester {
    fn draw(&mut self) -> Vec<f64> {
        (0..self.num_groups).map(|_| self.rng.random::<f64>()).collect()
    }
}

impl Suggester for RandomSuggester {
    fn teacher_forced(&mut self, record: &PatientRecord) -> Result<Vec<Vec<f64>>, SftError> {
        Ok((0..=record.observed.len()).map(|_| self.draw()).collect())
    }

    fn rollout(&mut self, _record: &PatientRecord, len: usize) -> Result<Vec<GroupId>, SftError> {
        let mut taken = Vec::with_capacity(len);
        for _ in 0..len.min(self.num_groups) {
            let s = self.draw();
            taken.push(GroupId(argmax_excluding(&s, &taken) as u8));
        }
        Ok(taken)
    }
}

/// Per-step top-1 accuracy against the true next group, pooled over all steps.
/// Returns `None` when no record has a lab group.
pub fn next_group_accuracy<S: Suggester>(
    suggester: &mut S,
    records: &[PatientRecord],
) -> Result<Option<f64>, SftError> {
    let (mut hits, mut steps) = (0usize, 0usize);
    for r in records {
        let rows = suggester.teacher_forced(r)?;
        for (scores, truth) in rows.iter().zip(&r.observed) {
            hits += (argmax(scores) == truth.group_id.index()) as usize;
            steps += 1;
        }
    }
    Ok((steps > 0).then(|| hits as f64 / steps as f64))
}

/// `|suggested ∩ received| / |suggested|` over greedy rollouts as long as
/// each patient's received panel.
pub fn unigram_precision<S: Suggester>(
    suggester: &mut S,
    records: &[PatientRecord],
) -> Result<Option<f64>, SftError> {
    let (mut hits, mut suggested) = (0usize, 0usize);
    for r in records.iter().filter(|r| !r.observed.is_empty()) {
        let s = suggester.rollout(r, r.observed.len())?;
        hits += s.iter().filter(|&&g| r.has_group(g)).count();
        suggested += s.len();
    }
    Ok((suggested > 0).then(|| hits as f64 / suggested as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftEvalReport {
    pub next_group_accuracy: f64,
    pub unigram_precision: f64,
    /// Outcome head at the final EOS, thresholded at 0.5; cost is the full observed panel.
    pub outcome: MetricReport,
}

pub fn sft_eval(
    params: &EncoderParams<f32>,
    catalog: &LabCatalog,
    split: &[PatientRecord],
    task: OutcomeTask,
    rollouts: bool,
) -> Result<SftEvalReport, SftError> {
    params.vocab.check(catalog)?;
    let mut hits = 0usize;
    let mut steps = 0usize;
    let mut scores = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    let mut confusion = ConfusionCounts::default();
    let mut cost = 0u64;
    for r in split {
        let seq = params.vocab.tokenize(Prefix::full(r))?;
        let out = params.forward(&seq)?;
        for (i, truth) in r.observed.iter().enumerate() {
            let row: Vec<f64> = out.next_logits.row(i).iter().map(|&x| x as f64).collect();
            hits += (argmax(&row) == truth.group_id.index()) as usize;
            steps += 1;
        }
        let last = out.outcome_logits.rows - 1;
        let p = masked_softmax(out.outcome_logits.row(last), None)[1] as f64;
        let y = r.label(task);
        confusion.record(p >= 0.5, y);
        scores.push(p);
        labels.push(y);
        cost += r.panel_cost(catalog) as u64;
    }
    let unigram = if rollouts {
        let mut s = EncoderSuggester { params, catalog };
        unigram_precision(&mut s, split)?.unwrap_or(0.0)
    } else {
        0.0
    };
    let n = split.len().max(1) as f64;
    Ok(SftEvalReport {
        next_group_accuracy: if steps == 0 { 0.0 } else { hits as f64 / steps as f64 },
        unigram_precision: unigram,
        outcome: MetricReport::new(confusion, auc(&scores, &labels), cost as f64 / n),
    })
}
