use serde::{Deserialize, Serialize};

use crate::domain::{ConfusionCounts, GroupId, LabCatalog, MetricReport, OutcomeTask, PatientRecord};
use crate::rl::{run_episode, Action, ActionMode, HiddenStates, Policy};

use super::{auc, EvalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrace {
    pub patient_id: String,
    pub label: bool,
    pub prediction: bool,
    pub score: f64,
    pub cost: u32,
    pub orders: Vec<GroupId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub report: MetricReport,
    pub traces: Vec<PatientTrace>,
}

impl PolicyEvaluation {
    pub fn mean_groups(&self) -> f64 {
        let n = self.traces.len().max(1) as f64;
        self.traces.iter().map(|t| t.orders.len()).sum::<usize>() as f64 / n
    }

    /// Metrics over the traces selected by `keep`.
    pub fn subset(&self, keep: impl Fn(&PatientTrace) -> bool) -> MetricReport {
        let picked: Vec<&PatientTrace> = self.traces.iter().filter(|t| keep(t)).collect();
        report_of(&picked)
    }
}

fn report_of(traces: &[&PatientTrace]) -> MetricReport {
    let confusion = ConfusionCounts::from_predictions(traces.iter().map(|t| (t.prediction, t.label)));
    let scores: Vec<f64> = traces.iter().map(|t| t.score).collect();
    let labels: Vec<bool> = traces.iter().map(|t| t.label).collect();
    let cost: u64 = traces.iter().map(|t| t.cost as u64).sum();
    let n = traces.len().max(1) as f64;
    MetricReport::new(confusion, auc(&scores, &labels), cost as f64 / n)
}

/// Runs every patient of `split` to termination with `policy`'s greedy
/// choices. `hidden`, when given, must be built over `split`; it supplies
/// the policy's features and the terminal outcome-head score used for AUC.
pub fn evaluate_policy<P: Policy + ?Sized>(
    policy: &mut P,
    split: &[PatientRecord],
    mut hidden: Option<&mut HiddenStates<'_>>,
    catalog: &LabCatalog,
    task: OutcomeTask,
    mode: ActionMode,
    budget: Option<u32>,
) -> Result<PolicyEvaluation, EvalError> {
    if let Some(h) = hidden.as_deref() {
        if !std::ptr::eq(h.patients, split) {
            return Err(EvalError::Input("hidden states were built for a different split".into()));
        }
    }
    let mut traces = Vec::with_capacity(split.len());
    for (i, r) in split.iter().enumerate() {
        let t = run_episode(policy, split, i, hidden.as_deref_mut(), catalog, mode, budget)?;
        traces.push(PatientTrace {
            patient_id: r.id.clone(),
            label: r.label(task),
            prediction: t.state.prediction.expect("terminated episodes predict"),
            score: t.score,
            cost: t.state.accrued_cost,
            orders: t
                .actions
                .iter()
                .filter_map(|a| match a {
                    Action::Order(g) => Some(*g),
                    Action::Predict(_) => None,
                })
                .collect(),
        });
    }
    let all: Vec<&PatientTrace> = traces.iter().collect();
    Ok(PolicyEvaluation {
        report: report_of(&all),
        traces,
    })
}
