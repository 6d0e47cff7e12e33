use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::MetricReport;
use crate::rl::{LearningPoint, SweepRow};

use super::{CohortRow, CostCurvePoint, EvalError, GroupUsageHistogram};

/// A comma-delimited table row with a fixed column order.
pub trait TableRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub f1: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub avg_time_cost: f64,
    pub avg_groups: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl MethodRow {
    pub fn new(method: impl Into<String>, r: &MetricReport, avg_groups: f64) -> Self {
        MethodRow {
            method: method.into(),
            f1: r.f1,
            auc: r.auc,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            avg_time_cost: r.avg_time_cost,
            avg_groups,
            tp: r.confusion.tp,
            fp: r.confusion.fp,
            fn_: r.confusion.fn_,
            tn: r.confusion.tn,
        }
    }
}

impl TableRow for MethodRow {
    const HEADER: &'static [&'static str] = &[
        "method",
        "f1",
        "auc",
        "sensitivity",
        "specificity",
        "avg_time_cost",
        "avg_groups",
        "tp",
        "fp",
        "fn_",
        "tn",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurveRow {
    pub method: String,
    pub max_allowed_minutes: u32,
    pub f1: f64,
    pub auc: f64,
    pub avg_groups_used: f64,
}

impl CostCurveRow {
    pub fn new(method: impl Into<String>, p: &CostCurvePoint) -> Self {
        CostCurveRow {
            method: method.into(),
            max_allowed_minutes: p.max_allowed_minutes,
            f1: p.f1,
            auc: p.auc,
            avg_groups_used: p.avg_groups_used,
        }
    }
}

impl TableRow for CostCurveRow {
    const HEADER: &'static [&'static str] = &["method", "max_allowed_minutes", "f1", "auc", "avg_groups_used"];
}

impl TableRow for CohortRow {
    const HEADER: &'static [&'static str] = &[
        "method",
        "view",
        "cohort",
        "patients",
        "positive_rate",
        "f1",
        "auc",
        "sensitivity",
        "specificity",
        "avg_time_cost",
        "tp",
        "fp",
        "fn_",
        "tn",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUsageRow {
    pub group: String,
    pub observed_fraction: f64,
    pub policy_fraction: f64,
}

impl TableRow for GroupUsageRow {
    const HEADER: &'static [&'static str] = &["group", "observed_fraction", "policy_fraction"];
}

impl TableRow for SweepRow {
    const HEADER: &'static [&'static str] = &[
        "alpha",
        "beta",
        "f1",
        "auc",
        "sensitivity",
        "specificity",
        "avg_cost_minutes",
        "avg_groups",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRow {
    pub update: usize,
    pub timesteps: usize,
    pub mean_episode_return: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub val_f1: Option<f64>,
    pub val_avg_cost: Option<f64>,
}

impl From<&LearningPoint> for LearningRow {
    fn from(p: &LearningPoint) -> Self {
        LearningRow {
            update: p.update,
            timesteps: p.timesteps,
            mean_episode_return: p.mean_episode_return,
            entropy: p.diagnostics.entropy,
            approx_kl: p.diagnostics.approx_kl,
            val_f1: p.val_f1,
            val_avg_cost: p.val_avg_cost,
        }
    }
}

impl TableRow for LearningRow {
    const HEADER: &'static [&'static str] = &[
        "update",
        "timesteps",
        "mean_episode_return",
        "entropy",
        "approx_kl",
        "val_f1",
        "val_avg_cost",
    ];
}

/// Everything behind the tables and figures of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    pub methods: Vec<MethodRow>,
    pub cost_curve: Vec<CostCurveRow>,
    pub cohorts: Vec<CohortRow>,
    pub group_usage: Vec<GroupUsageRow>,
    pub sweep: Vec<SweepRow>,
    pub pareto: Vec<SweepRow>,
    pub learning_curve: Vec<LearningRow>,
}

impl ReportBundle {
    pub fn set_group_usage(&mut self, h: &GroupUsageHistogram) {
        self.group_usage = h
            .groups
            .iter()
            .map(|g| GroupUsageRow {
                group: g.group.clone(),
                observed_fraction: g.observed_fraction,
                policy_fraction: g.policy_fraction,
            })
            .collect();
    }
}

pub fn write_table<T: TableRow>(rows: &[T], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<T: TableRow>(path: &Path) -> Result<Vec<T>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != T::HEADER {
        return Err(EvalError::Input(format!("{}: unexpected header {header:?}", path.display())));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct PlotRecord<'a, T: Serialize> {
    figure: &'a str,
    data: &'a T,
}

fn push_plot<T: Serialize>(out: &mut impl Write, figure: &str, rows: &[T]) -> Result<(), EvalError> {
    for data in rows {
        serde_json::to_writer(&mut *out, &PlotRecord { figure, data }).map_err(|e| EvalError::Input(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes one table per section plus `plots.jsonl`, a line-delimited bundle
/// keyed by figure name. Returns the written paths.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let p = |name: &str| dir.join(name);
    write_table(&bundle.methods, &p("metrics.csv"))?;
    write_table(&bundle.cost_curve, &p("cost_curve.csv"))?;
    write_table(&bundle.cohorts, &p("cohorts.csv"))?;
    write_table(&bundle.group_usage, &p("group_usage.csv"))?;
    write_table(&bundle.sweep, &p("sweep.csv"))?;
    write_table(&bundle.pareto, &p("pareto.csv"))?;
    write_table(&bundle.learning_curve, &p("learning_curve.csv"))?;
    let mut out = BufWriter::new(File::create(p("plots.jsonl"))?);
    push_plot(&mut out, "metrics", &bundle.methods)?;
    push_plot(&mut out, "cost_curve", &bundle.cost_curve)?;
    push_plot(&mut out, "cohorts", &bundle.cohorts)?;
    push_plot(&mut out, "group_usage", &bundle.group_usage)?;
    push_plot(&mut out, "tradeoff", &bundle.sweep)?;
    push_plot(&mut out, "pareto", &bundle.pareto)?;
    push_plot(&mut out, "learning_curve", &bundle.learning_curve)?;
    out.flush()?;
    Ok([
        "metrics.csv",
        "cost_curve.csv",
        "cohorts.csv",
        "group_usage.csv",
        "sweep.csv",
        "pareto.csv",
        "learning_curve.csv",
        "plots.jsonl",
    ]
    .iter()
    .map(|n| p(n))
    .collect())
}

/// Reads every table written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<ReportBundle, EvalError> {
    let p = |name: &str| dir.join(name);
    Ok(ReportBundle {
        methods: read_table(&p("metrics.csv"))?,
        cost_curve: read_table(&p("cost_curve.csv"))?,
        cohorts: read_table(&p("cohorts.csv"))?,
        group_usage: read_table(&p("group_usage.csv"))?,
        sweep: read_table(&p("sweep.csv"))?,
        pareto: read_table(&p("pareto.csv"))?,
        learning_curve: read_table(&p("learning_curve.csv"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CohortTier, ConfusionCounts};
    use crate::eval::CohortView;

    fn bundle() -> ReportBundle {
        let r = MetricReport::new(ConfusionCounts::new(3, 1, 2, 4), 0.123456789, 101.0 / 3.0);
        ReportBundle {
            methods: vec![MethodRow::new("policy", &r, 2.4), MethodRow::new("lr, mean", &r, 4.7)],
            cost_curve: vec![CostCurveRow {
                method: "policy".into(),
                max_allowed_minutes: 90,
                f1: 0.1 + 0.2,
                auc: 1.0 / 7.0,
                avg_groups_used: 1.5,
            }],
            cohorts: vec![CohortRow {
                method: "policy".into(),
                view: CohortView::Overlapping,
                cohort: CohortTier::Rare,
                patients: 10,
                positive_rate: 0.147,
                f1: 0.5,
                auc: 0.75,
                sensitivity: 0.6,
                specificity: 0.8,
                avg_time_cost: 33.0,
                tp: 1,
                fp: 2,
                fn_: 3,
                tn: 4,
            }],
            group_usage: vec![GroupUsageRow {
                group: "CBC".into(),
                observed_fraction: 0.9,
                policy_fraction: 1.0 / 3.0,
            }],
            sweep: vec![],
            pareto: vec![],
            learning_curve: vec![LearningRow {
                update: 0,
                timesteps: 2048,
                mean_episode_return: -0.25,
                entropy: 1.2,
                approx_kl: 0.01,
                val_f1: None,
                val_avg_cost: Some(12.5),
            }],
        }
    }

    #[test]
    fn empty_results_give_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&ReportBundle::default(), dir.path()).unwrap();
        for p in &paths[..7] {
            assert_eq!(std::fs::read_to_string(p).unwrap().lines().count(), 1, "{}", p.display());
        }
        assert_eq!(std::fs::read_to_string(&paths[7]).unwrap(), "");
        assert_eq!(read_report(dir.path()).unwrap(), ReportBundle::default());
    }

    #[test]
    fn tables_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&bundle(), dir.path()).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), bundle());
        let head = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(head.starts_with("method,f1,auc,sensitivity,specificity,avg_time_cost,avg_groups,tp,fp,fn_,tn\n"));
    }

    #[test]
    fn re_emit_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let pa = emit_report(&bundle(), a.path()).unwrap();
        let pb = emit_report(&bundle(), b.path()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let plots = std::fs::read_to_string(&pa[7]).unwrap();
        assert_eq!(plots.lines().count(), 6);
        assert!(plots.lines().all(|l| l.starts_with("{\"figure\":")));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "group,policy_fraction,observed_fraction\n").unwrap();
        assert!(read_table::<GroupUsageRow>(&p).is_err());
    }
}
