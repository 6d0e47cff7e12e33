use serde::{Deserialize, Serialize};

use crate::domain::{
    cohort_memberships, cohort_of, CohortTier, ConfusionCounts, GroupId, LabCatalog, MetricReport, OutcomeTask,
    PatientRecord,
};
use crate::rl::{Action, ActionMode, DecisionContext, HiddenStates, Policy, RlError};

use super::{auc, evaluate_policy, EvalError, PatientTrace, PolicyEvaluation};

/// Budgets, in minutes, of the default cost curve; the last is the whole catalog.
pub const DEFAULT_BUDGETS: [u32; 9] = [0, 30, 60, 90, 120, 180, 240, 360, 857];

/// Predicts at once, ordering nothing.
#[derive(Debug, Clone, Copy)]
pub struct ImmediatePredict(pub bool);

impl Policy for ImmediatePredict {
    fn decide(&mut self, _: &DecisionContext<'_>) -> Result<Action, RlError> {
        Ok(Action::Predict(self.0))
    }
}

/// Orders every legal group in catalog order, then predicts `predict`.
#[derive(Debug, Clone, Copy)]
pub struct OrderEverything {
    pub predict: bool,
}

impl Policy for OrderEverything {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, RlError> {
        let k = ctx.catalog.num_groups();
        Ok(match (0..k).find(|&g| ctx.mask[g]) {
            Some(g) => Action::Order(GroupId(g as u8)),
            None => Action::Predict(self.predict),
        })
    }
}

/// Predicts the true label at once; an upper bound on quality.
#[derive(Debug, Clone, Copy)]
pub struct Oracle(pub OutcomeTask);

impl Policy for Oracle {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, RlError> {
        Ok(Action::Predict(ctx.record.label(self.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurvePoint {
    pub max_allowed_minutes: u32,
    pub f1: f64,
    pub auc: f64,
    pub avg_groups_used: f64,
}

/// Evaluates `policy` under each budget; orders above the remaining budget
/// are masked.
#[allow(clippy::too_many_arguments)]
pub fn cost_curve<P: Policy + ?Sized>(
    policy: &mut P,
    split: &[PatientRecord],
    mut hidden: Option<&mut HiddenStates<'_>>,
    catalog: &LabCatalog,
    task: OutcomeTask,
    mode: ActionMode,
    budgets: &[u32],
) -> Result<Vec<CostCurvePoint>, EvalError> {
    budgets
        .iter()
        .map(|&b| {
            let ev = evaluate_policy(policy, split, hidden.as_deref_mut(), catalog, task, mode, Some(b))?;
            Ok(CostCurvePoint {
                max_allowed_minutes: b,
                f1: ev.report.f1,
                auc: ev.report.auc,
                avg_groups_used: ev.mean_groups(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortView {
    /// Each patient in exactly one tier: its rarest received group.
    Exclusive,
    /// A patient in every tier it received a group from.
    Overlapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub method: String,
    pub view: CohortView,
    pub cohort: CohortTier,
    pub patients: usize,
    pub positive_rate: f64,
    pub f1: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub avg_time_cost: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn report_over<'t>(traces: impl Iterator<Item = &'t PatientTrace>) -> (usize, usize, MetricReport) {
    let picked: Vec<&PatientTrace> = traces.collect();
    let confusion = ConfusionCounts::from_predictions(picked.iter().map(|t| (t.prediction, t.label)));
    let scores: Vec<f64> = picked.iter().map(|t| t.score).collect();
    let labels: Vec<bool> = picked.iter().map(|t| t.label).collect();
    let cost: u64 = picked.iter().map(|t| t.cost as u64).sum();
    let n = picked.len();
    let report = MetricReport::new(confusion, auc(&scores, &labels), cost as f64 / n.max(1) as f64);
    (n, labels.iter().filter(|&&l| l).count(), report)
}

/// Per-cohort metrics of each method, under both cohort views. Traces must
/// follow `split` order.
pub fn cohort_report(
    methods: &[(String, &[PatientTrace])],
    split: &[PatientRecord],
    catalog: &LabCatalog,
) -> Result<Vec<CohortRow>, EvalError> {
    let exclusive: Vec<CohortTier> = split.iter().map(|r| cohort_of(r, catalog)).collect::<Result<_, _>>()?;
    let overlapping: Vec<[bool; 3]> =
        split.iter().map(|r| cohort_memberships(r, catalog)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (name, traces) in methods {
        if traces.len() != split.len() || traces.iter().zip(split).any(|(t, r)| t.patient_id != r.id) {
            return Err(EvalError::Input(format!("traces of {name} do not follow the split")));
        }
        for view in [CohortView::Exclusive, CohortView::Overlapping] {
            for tier in CohortTier::ALL {
                let member = |i: usize| match view {
                    CohortView::Exclusive => exclusive[i] == tier,
                    CohortView::Overlapping => overlapping[i][tier as usize],
                };
                let (n, pos, r) = report_over(traces.iter().enumerate().filter(|(i, _)| member(*i)).map(|(_, t)| t));
                rows.push(CohortRow {
                    method: name.clone(),
                    view,
                    cohort: tier,
                    patients: n,
                    positive_rate: if n == 0 { 0.0 } else { pos as f64 / n as f64 },
                    f1: r.f1,
                    auc: r.auc,
                    sensitivity: r.sensitivity,
                    specificity: r.specificity,
                    avg_time_cost: r.avg_time_cost,
                    tp: r.confusion.tp,
                    fp: r.confusion.fp,
                    fn_: r.confusion.fn_,
                    tn: r.confusion.tn,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUsage {
    pub group: String,
    /// Fraction of patients who received the group.
    pub observed_fraction: f64,
    /// Fraction of patients for whom the policy ordered it.
    pub policy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUsageHistogram {
    pub groups: Vec<GroupUsage>,
    pub observed_mean_groups: f64,
    pub policy_mean_groups: f64,
}

pub fn group_usage_histogram(
    eval: &PolicyEvaluation,
    split: &[PatientRecord],
    catalog: &LabCatalog,
) -> Result<GroupUsageHistogram, EvalError> {
    if eval.traces.len() != split.len() {
        return Err(EvalError::Input("evaluation does not cover the split".into()));
    }
    let n = split.len().max(1) as f64;
    let k = catalog.num_groups();
    let mut observed = vec![0usize; k];
    let mut ordered = vec![0usize; k];
    for r in split {
        r.observed.iter().for_each(|res| observed[res.group_id.index()] += 1);
    }
    for t in &eval.traces {
        t.orders.iter().for_each(|g| ordered[g.index()] += 1);
    }
    Ok(GroupUsageHistogram {
        groups: catalog
            .groups
            .iter()
            .map(|g| GroupUsage {
                group: g.short_name.clone(),
                observed_fraction: observed[g.id.index()] as f64 / n,
                policy_fraction: ordered[g.id.index()] as f64 / n,
            })
            .collect(),
        observed_mean_groups: observed.iter().sum::<usize>() as f64 / n,
        policy_mean_groups: eval.mean_groups(),
    })
}
