use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{LabCatalog, PatientRecord};
use crate::encoder::EncoderParams;
use crate::eval::evaluate_policy;

use super::cohort::HiddenStates;
use super::env::RewardConfig;
use super::policy::PolicyParams;
use super::train::{train_rl, RlConfig};
use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl SweepGrid {
    /// The full 12 x 8 search grid.
    pub fn full() -> Self {
        SweepGrid {
            alphas: vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 15.0, 16.0, 32.0, 64.0, 256.0],
            betas: vec![0.01, 0.02, 0.05, 0.1, 1.0, 10.0, 100.0, 1000.0],
        }
    }

    /// A 4 x 3 subset for runs on a single core.
    pub fn coarse() -> Self {
        SweepGrid {
            alphas: vec![1.0, 4.0, 15.0, 64.0],
            betas: vec![0.01, 0.1, 1.0],
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.alphas
            .iter()
            .flat_map(move |&a| self.betas.iter().map(move |&b| (a, b)))
    }
}

/// One trained grid point, evaluated on validation. Column order is the
/// table's column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub f1: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub avg_cost_minutes: f64,
    pub avg_groups: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub front: Vec<SweepRow>,
    /// One policy per row, same order.
    pub policies: Vec<PolicyParams>,
}

/// Non-dominated `(cost, F1)` points, sorted by cost with F1 increasing.
pub fn pareto_front(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        a.avg_cost_minutes
            .total_cmp(&b.avg_cost_minutes)
            .then(b.f1.total_cmp(&a.f1))
    });
    let mut front: Vec<SweepRow> = Vec::new();
    for r in sorted {
        if front.last().is_none_or(|l| r.f1 > l.f1) {
            front.push(r);
        }
    }
    front
}

/// Trains one policy per `(alpha, beta)` and evaluates each on `val`.
pub fn sweep(
    encoder: &EncoderParams<f32>,
    catalog: &LabCatalog,
    train: &[PatientRecord],
    val: &[PatientRecord],
    grid: &SweepGrid,
    base: &RlConfig,
) -> Result<SweepResult, RlError> {
    let mut rows = Vec::new();
    let mut policies = Vec::new();
    let mut val_h = HiddenStates::new(encoder, catalog, val, base.memo_entries)?;
    for (alpha, beta) in grid.points() {
        let cfg = RlConfig {
            reward: RewardConfig {
                alpha,
                beta,
                ..base.reward
            },
            ..base.clone()
        };
        let out = train_rl(encoder, catalog, train, val, &cfg)?;
        let mut p = out.policy.clone();
        let ev = evaluate_policy(&mut p, val, Some(&mut val_h), catalog, cfg.task, cfg.mode, None)
            .map_err(|e| RlError::Config(format!("validation: {e}")))?;
        let r = &ev.report;
        log::info!(
            "sweep alpha {alpha} beta {beta}: f1 {:.4}, cost {:.1} min",
            r.f1,
            r.avg_time_cost
        );
        rows.push(SweepRow {
            alpha,
            beta,
            f1: r.f1,
            auc: r.auc,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            avg_cost_minutes: r.avg_time_cost,
            avg_groups: ev.mean_groups(),
        });
        policies.push(out.policy);
    }
    Ok(SweepResult {
        front: pareto_front(&rows),
        rows,
        policies,
    })
}

pub fn write_sweep_table(rows: &[SweepRow], path: &Path) -> Result<(), RlError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "alpha",
            "beta",
            "f1",
            "auc",
            "sensitivity",
            "specificity",
            "avg_cost_minutes",
            "avg_groups",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_table(path: &Path) -> Result<Vec<SweepRow>, RlError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
