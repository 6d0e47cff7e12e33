use serde::{Deserialize, Serialize};

use crate::domain::{
    groups, ConfusionCounts, GroupId, LabCatalog, MetricReport, OutcomeTask, PatientRecord, CHIEF_COMPLAINTS,
    NUM_TRIAGE_FEATURES,
};

use super::{auc, EvalError, PatientTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    Mean,
    Median,
    Zero,
    /// Zero-fill plus one missing-group indicator per group.
    DummyIndicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "imputation")]
pub enum BaselineSpec {
    MajorityClass,
    LogisticRegression(Imputation),
    /// Logistic regression over triage and every received group; charges the
    /// patient's full observed-panel cost.
    FullPanelPolicy,
    /// Logistic regression over triage, CHEM and CBC only; charges their cost
    /// for every patient.
    FixedTopPanelPolicy,
}

impl BaselineSpec {
    pub fn name(&self) -> String {
        match self {
            BaselineSpec::MajorityClass => "majority_class".into(),
            BaselineSpec::LogisticRegression(i) => format!(
                "logistic_regression_{}",
                match i {
                    Imputation::Mean => "mean",
                    Imputation::Median => "median",
                    Imputation::Zero => "zero",
                    Imputation::DummyIndicator => "dummy_indicator",
                }
            ),
            BaselineSpec::FullPanelPolicy => "full_panel".into(),
            BaselineSpec::FixedTopPanelPolicy => "fixed_top_panel".into(),
        }
    }

    pub fn all() -> Vec<BaselineSpec> {
        vec![
            BaselineSpec::MajorityClass,
            BaselineSpec::LogisticRegression(Imputation::Mean),
            BaselineSpec::LogisticRegression(Imputation::Median),
            BaselineSpec::LogisticRegression(Imputation::Zero),
            BaselineSpec::LogisticRegression(Imputation::DummyIndicator),
            BaselineSpec::FullPanelPolicy,
            BaselineSpec::FixedTopPanelPolicy,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            iterations: 300,
            lr: 0.1,
            l2: 1e-4,
        }
    }
}

/// Tabular features: triage values, chief-complaint one-hot, then every test
/// of the selected groups, with missing groups imputed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub groups: Vec<GroupId>,
    pub imputation: Imputation,
    /// One fill value per lab column.
    pub fill: Vec<f64>,
    /// Standardization over all columns, fitted on training rows.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl FeatureMap {
    /// Fits fill values and standardization on `train` only.
    pub fn fit(train: &[PatientRecord], catalog: &LabCatalog, groups: Vec<GroupId>, imputation: Imputation) -> Self {
        let mut fill = Vec::new();
        for &g in &groups {
            for t in 0..catalog.groups[g.index()].tests.len() {
                let seen: Vec<f64> = train.iter().filter_map(|r| r.result(g)).map(|res| res.values[t]).collect();
                fill.push(match imputation {
                    Imputation::Mean if !seen.is_empty() => seen.iter().sum::<f64>() / seen.len() as f64,
                    Imputation::Median => median(seen),
                    _ => 0.0,
                });
            }
        }
        let mut map = FeatureMap {
            groups,
            imputation,
            fill,
            mean: Vec::new(),
            scale: Vec::new(),
        };
        let rows: Vec<Vec<f64>> = train.iter().map(|r| map.raw(r, catalog)).collect();
        let d = map.dim(catalog);
        let n = rows.len().max(1) as f64;
        map.mean = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        map.scale = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - map.mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        map
    }

    pub fn dim(&self, catalog: &LabCatalog) -> usize {
        let labs: usize = self.groups.iter().map(|g| catalog.groups[g.index()].tests.len()).sum();
        let ind = if self.imputation == Imputation::DummyIndicator {
            self.groups.len()
        } else {
            0
        };
        NUM_TRIAGE_FEATURES + CHIEF_COMPLAINTS.len() + labs + ind
    }

    fn raw(&self, r: &PatientRecord, catalog: &LabCatalog) -> Vec<f64> {
        let mut x = r.triage.values.to_vec();
        x.extend((0..CHIEF_COMPLAINTS.len()).map(|c| (c == r.triage.chief_complaint as usize) as u8 as f64));
        let mut col = 0;
        for &g in &self.groups {
            let n = catalog.groups[g.index()].tests.len();
            match r.result(g) {
                Some(res) => x.extend_from_slice(&res.values),
                None => x.extend_from_slice(&self.fill[col..col + n]),
            }
            col += n;
        }
        if self.imputation == Imputation::DummyIndicator {
            x.extend(self.groups.iter().map(|&g| (!r.has_group(g)) as u8 as f64));
        }
        x
    }

    pub fn transform(&self, r: &PatientRecord, catalog: &LabCatalog) -> Vec<f64> {
        let mut x = self.raw(r, catalog);
        for (j, v) in x.iter_mut().enumerate() {
            *v = (*v - self.mean[j]) / self.scale[j];
        }
        x
    }
}

/// Class-weighted L2-regularized logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticModel {
    /// Full-batch gradient descent; positives weighted by `n_neg / n_pos`.
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let pos = y.iter().filter(|&&v| v).count();
        let neg = y.len() - pos;
        let wpos = if pos == 0 { 1.0 } else { neg.max(1) as f64 / pos as f64 };
        let total: f64 = y.iter().map(|&v| if v { wpos } else { 1.0 }).sum();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut gw = vec![0.0; d];
        for _ in 0..cfg.iterations {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(y) {
                let z = b + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let weight = if yi { wpos } else { 1.0 };
                let e = weight * (sigmoid(z) - yi as u8 as f64);
                gb += e;
                gw.iter_mut().zip(xi).for_each(|(g, v)| *g += e * v);
            }
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= cfg.lr * (g / total + cfg.l2 * *wj);
            }
            b -= cfg.lr * gb / total;
        }
        LogisticModel {
            weights: w,
            bias: b,
            threshold: 0.5,
        }
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Picks the threshold maximizing F1 over `scores`; ties go to the
    /// larger threshold.
    pub fn tune_threshold(&mut self, scores: &[f64], labels: &[bool]) {
        let mut cands: Vec<f64> = scores.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let mut best = (f64::NEG_INFINITY, 0.5);
        for &t in &cands {
            let c = ConfusionCounts::from_predictions(scores.iter().zip(labels).map(|(&s, &l)| (s >= t, l)));
            let f1 = MetricReport::new(c, 0.5, 0.0).f1;
            if f1 >= best.0 {
                best = (f1, t);
            }
        }
        self.threshold = best.1;
    }
}

/// A fitted baseline: test-split report plus per-patient traces.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub spec: BaselineSpec,
    pub report: MetricReport,
    pub traces: Vec<PatientTrace>,
}

/// Fits `spec` on `train` (thresholds tuned on `val`) and evaluates on `test`.
pub fn run_baseline(
    spec: BaselineSpec,
    train: &[PatientRecord],
    val: &[PatientRecord],
    test: &[PatientRecord],
    catalog: &LabCatalog,
    task: OutcomeTask,
    cfg: &LogisticConfig,
) -> Result<BaselineResult, EvalError> {
    if train.is_empty() {
        return Err(EvalError::Input("baseline training split is empty".into()));
    }
    let all: Vec<GroupId> = catalog.group_ids().collect();
    let top = vec![groups::CHEM, groups::CBC];
    let (scores_preds, costs): (Vec<(f64, bool)>, Vec<u32>) = match spec {
        BaselineSpec::MajorityClass => {
            let pos = train.iter().filter(|r| r.label(task)).count();
            let majority = 2 * pos > train.len();
            (vec![(majority as u8 as f64, majority); test.len()], vec![0; test.len()])
        }
        BaselineSpec::LogisticRegression(imp) => (
            fit_and_score(train, val, test, catalog, task, all, imp, cfg),
            test.iter().map(|r| r.panel_cost(catalog)).collect(),
        ),
        BaselineSpec::FullPanelPolicy => (
            fit_and_score(train, val, test, catalog, task, all, Imputation::DummyIndicator, cfg),
            test.iter().map(|r| r.panel_cost(catalog)).collect(),
        ),
        BaselineSpec::FixedTopPanelPolicy => {
            let cost = top.iter().map(|&g| catalog.cost(g)).sum();
            (
                fit_and_score(train, val, test, catalog, task, top.clone(), Imputation::Mean, cfg),
                vec![cost; test.len()],
            )
        }
    };
    let traces: Vec<PatientTrace> = test
        .iter()
        .zip(scores_preds.iter().zip(&costs))
        .map(|(r, (&(score, prediction), &cost))| PatientTrace {
            patient_id: r.id.clone(),
            label: r.label(task),
            prediction,
            score,
            cost,
            orders: match spec {
                BaselineSpec::MajorityClass => Vec::new(),
                BaselineSpec::FixedTopPanelPolicy => top.clone(),
                _ => r.panel(),
            },
        })
        .collect();
    let confusion = ConfusionCounts::from_predictions(traces.iter().map(|t| (t.prediction, t.label)));
    let scores: Vec<f64> = traces.iter().map(|t| t.score).collect();
    let labels: Vec<bool> = traces.iter().map(|t| t.label).collect();
    let mean_cost = costs.iter().map(|&c| c as f64).sum::<f64>() / test.len().max(1) as f64;
    Ok(BaselineResult {
        spec,
        report: MetricReport::new(confusion, auc(&scores, &labels), mean_cost),
        traces,
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_and_score(
    train: &[PatientRecord],
    val: &[PatientRecord],
    test: &[PatientRecord],
    catalog: &LabCatalog,
    task: OutcomeTask,
    groups: Vec<GroupId>,
    imp: Imputation,
    cfg: &LogisticConfig,
) -> Vec<(f64, bool)> {
    let fm = FeatureMap::fit(train, catalog, groups, imp);
    let x: Vec<Vec<f64>> = train.iter().map(|r| fm.transform(r, catalog)).collect();
    let y: Vec<bool> = train.iter().map(|r| r.label(task)).collect();
    let mut model = LogisticModel::fit(&x, &y, cfg);
    if !val.is_empty() {
        let vs: Vec<f64> = val.iter().map(|r| model.prob(&fm.transform(r, catalog))).collect();
        let vl: Vec<bool> = val.iter().map(|r| r.label(task)).collect();
        model.tune_threshold(&vs, &vl);
    }
    test.iter()
        .map(|r| {
            let p = model.prob(&fm.transform(r, catalog));
            (p, p >= model.threshold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{default_catalog, LabResult, TriageRecord};
    use proptest::prelude::*;

    fn patient(i: usize, label: bool, groups: &[GroupId], c: &LabCatalog, lab_shift: f64) -> PatientRecord {
        let mut values = [50.0, 80.0, 16.0, 120.0, 80.0, 37.0, 98.0, 3.0, 2.0];
        values[1] += (i % 7) as f64;
        PatientRecord {
            id: format!("p{i}"),
            triage: TriageRecord {
                values,
                chief_complaint: (i % 8) as u8,
            },
            observed: groups
                .iter()
                .map(|&g| {
                    let mut r = LabResult::zero_filled(g, c);
                    r.values.iter_mut().enumerate().for_each(|(t, v)| *v = lab_shift + t as f64 + (i % 3) as f64);
                    r
                })
                .collect(),
            y_critical: label,
            y_los: false,
            latent_state: None,
        }
    }

    /// Positives have CBC values shifted far from negatives: separable.
    fn separable(n: usize, offset: usize) -> Vec<PatientRecord> {
        let c = default_catalog();
        (0..n)
            .map(|i| {
                let label = i % 5 == 0;
                patient(i + offset, label, &[groups::CBC, groups::CHEM], &c, if label { 10.0 } else { 0.0 })
            })
            .collect()
    }

    #[test]
    fn majority_class_predicts_negative() {
        let c = default_catalog();
        let d = separable(100, 0);
        let r = run_baseline(BaselineSpec::MajorityClass, &d, &d, &d, &c, OutcomeTask::CriticalOutcome, &LogisticConfig::default()).unwrap();
        assert_eq!(r.report.f1, 0.0);
        assert_eq!(r.report.sensitivity, 0.0);
        assert_eq!(r.report.specificity, 1.0);
        assert_eq!(r.report.avg_time_cost, 0.0);
        assert_eq!(r.report.auc, 0.5);
    }

    #[test]
    fn logistic_regression_separates_separable_data() {
        let c = default_catalog();
        let (train, val, test) = (separable(200, 0), separable(60, 1000), separable(60, 2000));
        for imp in [Imputation::Mean, Imputation::Median, Imputation::Zero, Imputation::DummyIndicator] {
            let r = run_baseline(
                BaselineSpec::LogisticRegression(imp),
                &train,
                &val,
                &test,
                &c,
                OutcomeTask::CriticalOutcome,
                &LogisticConfig::default(),
            )
            .unwrap();
            assert_eq!(r.report.f1, 1.0, "{imp:?}");
            assert_eq!(r.report.auc, 1.0);
            assert_eq!(r.report.avg_time_cost, 90.0);
        }
    }

    #[test]
    fn fixed_top_panel_charges_ninety_minutes() {
        let c = default_catalog();
        let mut test = separable(30, 500);
        test[0].observed.clear();
        test[1].observed.push(LabResult::zero_filled(groups::LFTS, &c));
        let r = run_baseline(
            BaselineSpec::FixedTopPanelPolicy,
            &separable(100, 0),
            &[],
            &test,
            &c,
            OutcomeTask::CriticalOutcome,
            &LogisticConfig::default(),
        )
        .unwrap();
        assert_eq!(r.report.avg_time_cost, 90.0);
        assert!(r.traces.iter().all(|t| t.cost == 90));
    }

    #[test]
    fn full_panel_charges_observed_panel() {
        let c = default_catalog();
        let mut test = separable(10, 500);
        test[0].observed.push(LabResult::zero_filled(groups::TOX, &c));
        let r = run_baseline(BaselineSpec::FullPanelPolicy, &separable(50, 0), &[], &test, &c, OutcomeTask::CriticalOutcome, &LogisticConfig::default())
            .unwrap();
        assert_eq!(r.traces[0].cost, 90 + 70);
        assert_eq!(r.report.avg_time_cost, (90.0 * 10.0 + 70.0) / 10.0);
    }

    #[test]
    fn median_and_mean_fill_hand_values() {
        let c = default_catalog();
        let mut train: Vec<PatientRecord> = [1.0, 2.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut p = patient(0, false, &[groups::LACTATE], &c, 0.0);
                p.id = format!("t{i}");
                p.observed[0].values[0] = s;
                p
            })
            .collect();
        train.push(patient(9, true, &[], &c, 0.0));
        let mean = FeatureMap::fit(&train, &c, vec![groups::LACTATE], Imputation::Mean);
        let med = FeatureMap::fit(&train, &c, vec![groups::LACTATE], Imputation::Median);
        let zero = FeatureMap::fit(&train, &c, vec![groups::LACTATE], Imputation::Zero);
        assert!((mean.fill[0] - 13.0 / 3.0).abs() < 1e-12);
        assert_eq!(med.fill[0], 2.0);
        assert_eq!(zero.fill[0], 0.0);
        let dummy = FeatureMap::fit(&train, &c, vec![groups::LACTATE], Imputation::DummyIndicator);
        assert_eq!(dummy.dim(&c), zero.dim(&c) + 1);
    }

    #[test]
    fn threshold_tuning_maximizes_f1() {
        let mut m = LogisticModel {
            weights: vec![],
            bias: 0.0,
            threshold: 0.5,
        };
        m.tune_threshold(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]);
        assert_eq!(m.threshold, 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn imputation_never_sees_the_test_split(shift in -50.0f64..50.0, drop in 0usize..10) {
            let c = default_catalog();
            let train = separable(40, 0);
            for imp in [Imputation::Mean, Imputation::Median] {
                let base = FeatureMap::fit(&train, &c, c.group_ids().collect(), imp);
                let mut test = separable(10, 100);
                test[drop].observed.clear();
                test.iter_mut().flat_map(|r| r.observed.iter_mut()).for_each(|res| res.values.iter_mut().for_each(|v| *v += shift));
                let again = FeatureMap::fit(&train, &c, c.group_ids().collect(), imp);
                prop_assert_eq!(&base, &again);
                let _ = test.iter().map(|r| base.transform(r, &c)).count();
            }
        }
    }
}
