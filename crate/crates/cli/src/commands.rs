use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use edcopilot::domain::{default_catalog, ConfusionCounts, LabCatalog, LabResult, OutcomeTask, PatientRecord};
use edcopilot::encoder::EncoderParams;
use edcopilot::eval::{
    auc, cohort_report, cost_curve, emit_report, evaluate_policy, group_usage_histogram, read_report, read_table,
    run_baseline, write_table, BaselineSpec, CostCurveRow, LearningRow, LogisticConfig, MethodRow, PatientTrace,
    ReportBundle, DEFAULT_BUDGETS,
};
use edcopilot::rl::{
    pareto_front, read_sweep_table, sweep as run_sweep, train_rl as run_rl, write_sweep_table, ActionMode,
    HiddenStates, PolicyParams, RlConfig, SweepGrid,
};
use edcopilot::sft::{train_sft as run_sft, write_history, SftConfig};
use edcopilot::synthgen::{generate, read_cohort, split, write_cohort, GeneratorConfig, SplitSpec};
use edcopilot::MetricReport;
use edcopilot_service::{
    ActionView, AppState, ModelEntry, Registry, ServiceConfig, SystemClock, ENCODER_FILE, PARETO_FILE, POLICY_FILE,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{CliError, Common};

type Result<T> = std::result::Result<T, CliError>;

fn invalid(m: impl std::fmt::Display) -> CliError {
    CliError::Validation(m.to_string())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_split(data: &Path, name: &str, catalog: &LabCatalog) -> Result<Vec<PatientRecord>> {
    let path = data.join(format!("{name}.jsonl"));
    let loaded = read_cohort(&path, catalog).with_context(|| format!("reading {}", path.display()))?;
    Ok(loaded.cohort.patients)
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct GenFile {
    n_patients: Option<usize>,
    seed: Option<u64>,
    stratify_on: OutcomeTask,
    fractions: [f64; 3],
    generator: Option<GeneratorConfig>,
}

impl Default for GenFile {
    fn default() -> Self {
        GenFile {
            n_patients: None,
            seed: None,
            stratify_on: OutcomeTask::CriticalOutcome,
            fractions: [0.8, 0.1, 0.1],
            generator: None,
        }
    }
}

pub fn gen(c: &Common) -> Result<()> {
    let file: GenFile = load_config(c.config.as_deref())?;
    let catalog = default_catalog();
    let mut g = file.generator.unwrap_or_else(|| GeneratorConfig::default_for(&catalog));
    if let Some(n) = file.n_patients {
        g.n_patients = n;
    }
    if let Some(s) = c.seed.or(file.seed) {
        g.seed = s;
    }
    g.validate(&catalog).map_err(invalid)?;
    let [a, b, f] = file.fractions;
    if [a, b, f].iter().any(|x| !(0.0..=1.0).contains(x)) || (a + b + f - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("fractions {a}, {b}, {f} must lie in [0, 1] and sum to 1")));
    }
    if g.n_patients < 10 {
        return Err(invalid("n_patients must be at least 10 to split"));
    }
    let cohort = generate(&g, &catalog)?;
    let spec = SplitSpec {
        fractions: (a, b, f),
        seed: g.seed,
        stratify_on: file.stratify_on,
    };
    let (train, val, test) = split(&cohort, &spec)?;
    fs::create_dir_all(&c.out)?;
    write_cohort(&cohort, &c.out.join("cohort.jsonl"))?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        write_cohort(part, &c.out.join(format!("{name}.jsonl")))?;
    }
    fs::write(c.out.join("generator.toml"), toml::to_string(&g)?)?;
    let summary = json!({
        "patients": cohort.len(),
        "train": train.len(),
        "val": val.len(),
        "test": test.len(),
        "positive_rate_critical": cohort.positive_rate(OutcomeTask::CriticalOutcome),
        "positive_rate_los": cohort.positive_rate(OutcomeTask::LengthenedStay),
        "mean_groups": cohort.mean_groups(),
        "config_digest": cohort.config_digest,
        "catalog_hash": cohort.catalog_hash,
    });
    write_json(&c.out.join("summary.json"), &summary)?;
    log::info!("wrote {} patients to {}", cohort.len(), c.out.display());
    Ok(())
}

pub fn train_sft(c: &Common, data: &Path, train_limit: Option<usize>) -> Result<()> {
    let mut cfg: SftConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    let catalog = default_catalog();
    let mut train = read_split(data, "train", &catalog)?;
    let val = read_split(data, "val", &catalog)?;
    if let Some(n) = train_limit {
        train.truncate(n);
    }
    let out = run_sft(&cfg, &catalog, &train, &val)?;
    fs::create_dir_all(&c.out)?;
    out.params.save(&c.out.join(ENCODER_FILE))?;
    write_history(&out.history, &c.out.join("sft_history.jsonl"))?;
    fs::write(c.out.join("sft.toml"), toml::to_string(&cfg)?)?;
    let best = &out.history[out.best_epoch];
    log::info!(
        "best epoch {}: val f1 {:.4}, auc {:.4}",
        out.best_epoch,
        best.val_f1,
        best.val_auc
    );
    Ok(())
}

fn load_encoder(path: &Path, catalog: &LabCatalog) -> Result<EncoderParams<f32>> {
    EncoderParams::load(path, catalog).with_context(|| format!("loading {}", path.display())).map_err(Into::into)
}

pub fn train_rl(c: &Common, data: &Path, encoder_path: &Path) -> Result<()> {
    let mut cfg: RlConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    let catalog = default_catalog();
    let encoder = load_encoder(encoder_path, &catalog)?;
    let train = read_split(data, "train", &catalog)?;
    let val = read_split(data, "val", &catalog)?;
    let out = run_rl(&encoder, &catalog, &train, &val, &cfg)?;
    fs::create_dir_all(&c.out)?;
    out.policy.save(&c.out.join(POLICY_FILE), &catalog)?;
    fs::copy(encoder_path, c.out.join(ENCODER_FILE))?;
    let rows: Vec<LearningRow> = out.curve.iter().map(LearningRow::from).collect();
    write_table(&rows, &c.out.join("learning_curve.csv"))?;
    fs::write(c.out.join("rl.toml"), toml::to_string(&cfg)?)?;
    write_json(
        &c.out.join("rl_summary.json"),
        &json!({"best_update": out.best_update, "best_val": out.best_val}),
    )?;
    log::info!(
        "best update {}: val f1 {:.4}, avg cost {:.1} min",
        out.best_update,
        out.best_val.f1,
        out.best_val.avg_time_cost
    );
    Ok(())
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct SweepFile {
    grid: SweepGrid,
    rl: RlConfig,
}

impl Default for SweepFile {
    fn default() -> Self {
        SweepFile {
            grid: SweepGrid::coarse(),
            rl: RlConfig::default(),
        }
    }
}

pub fn sweep(c: &Common, data: &Path, encoder_path: &Path) -> Result<()> {
    let mut file: SweepFile = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        file.rl.seed = s;
    }
    file.rl.validate().map_err(invalid)?;
    if file.grid.alphas.is_empty() || file.grid.betas.is_empty() {
        return Err(invalid("sweep grid needs at least one alpha and one beta"));
    }
    let catalog = default_catalog();
    let encoder = load_encoder(encoder_path, &catalog)?;
    let train = read_split(data, "train", &catalog)?;
    let val = read_split(data, "val", &catalog)?;
    let res = run_sweep(&encoder, &catalog, &train, &val, &file.grid, &file.rl)?;
    let policies = c.out.join("policies");
    fs::create_dir_all(&policies)?;
    write_sweep_table(&res.rows, &c.out.join("sweep.csv"))?;
    write_sweep_table(&res.front, &c.out.join(PARETO_FILE))?;
    for (row, p) in res.rows.iter().zip(&res.policies) {
        p.save(&policies.join(format!("alpha{}_beta{}.edcp", row.alpha, row.beta)), &catalog)?;
    }
    log::info!("{} sweep points, {} on the Pareto front", res.rows.len(), res.front.len());
    Ok(())
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct EvalFile {
    task: OutcomeTask,
    mode: ActionMode,
    budgets: Vec<u32>,
    baselines: bool,
    logistic: LogisticConfig,
    /// Evaluate on the first this many test patients.
    test_limit: Option<usize>,
    memo_entries: usize,
}

impl Default for EvalFile {
    fn default() -> Self {
        EvalFile {
            task: OutcomeTask::CriticalOutcome,
            mode: ActionMode::Restricted,
            budgets: DEFAULT_BUDGETS.to_vec(),
            baselines: true,
            logistic: LogisticConfig::default(),
            test_limit: None,
            memo_entries: 400_000,
        }
    }
}

fn check_task(policy: &PolicyParams, task: OutcomeTask) -> Result<()> {
    match policy.meta.get("task").and_then(|t| t.as_str()) {
        Some(t) if t != task.as_str() => Err(invalid(format!(
            "policy was trained for {t}, config asks for {}",
            task.as_str()
        ))),
        _ => Ok(()),
    }
}

pub fn eval(c: &Common, data: &Path, model: &Path) -> Result<()> {
    let file: EvalFile = load_config(c.config.as_deref())?;
    if c.seed.is_some() {
        log::info!("eval is deterministic; --seed is ignored");
    }
    let catalog = default_catalog();
    let encoder = load_encoder(&model.join(ENCODER_FILE), &catalog)?;
    let mut policy = PolicyParams::load(&model.join(POLICY_FILE), &catalog)?;
    check_task(&policy, file.task)?;
    let train = read_split(data, "train", &catalog)?;
    let val = read_split(data, "val", &catalog)?;
    let mut test = read_split(data, "test", &catalog)?;
    if let Some(n) = file.test_limit {
        test.truncate(n);
    }
    let mut hidden = HiddenStates::new(&encoder, &catalog, &test, file.memo_entries)?;
    let ev = evaluate_policy(&mut policy, &test, Some(&mut hidden), &catalog, file.task, file.mode, None)?;
    let mut bundle = ReportBundle::default();
    bundle.methods.push(MethodRow::new("policy", &ev.report, ev.mean_groups()));
    let mut traces: Vec<(String, Vec<PatientTrace>)> = vec![("policy".into(), ev.traces.clone())];
    if file.baselines {
        for spec in BaselineSpec::all() {
            let r = run_baseline(spec, &train, &val, &test, &catalog, file.task, &file.logistic)?;
            let groups = r.traces.iter().map(|t| t.orders.len()).sum::<usize>() as f64 / r.traces.len().max(1) as f64;
            bundle.methods.push(MethodRow::new(spec.name(), &r.report, groups));
            traces.push((spec.name(), r.traces));
        }
    }
    let curve = cost_curve(&mut policy, &test, Some(&mut hidden), &catalog, file.task, file.mode, &file.budgets)?;
    bundle.cost_curve = curve.iter().map(|p| CostCurveRow::new("policy", p)).collect();
    let methods: Vec<(String, &[PatientTrace])> = traces.iter().map(|(n, t)| (n.clone(), t.as_slice())).collect();
    bundle.cohorts = cohort_report(&methods, &test, &catalog)?;
    bundle.set_group_usage(&group_usage_histogram(&ev, &test, &catalog)?);
    let lc = model.join("learning_curve.csv");
    if lc.exists() {
        bundle.learning_curve = read_table(&lc)?;
    }
    let sw = model.join("sweep.csv");
    if sw.exists() {
        bundle.sweep = read_sweep_table(&sw)?;
        bundle.pareto = pareto_front(&bundle.sweep);
    }
    emit_report(&bundle, &c.out)?;
    log::info!(
        "policy on {} test patients: f1 {:.4}, auc {:.4}, avg cost {:.1} min",
        test.len(),
        ev.report.f1,
        ev.report.auc,
        ev.report.avg_time_cost
    );
    Ok(())
}

pub fn plot_data(c: &Common, report: &Path) -> Result<()> {
    let bundle = read_report(report)?;
    emit_report(&bundle, &c.out)?;
    log::info!("wrote plot bundle to {}", c.out.join("plots.jsonl").display());
    Ok(())
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct ServeFile {
    addr: String,
    idle_minutes: u64,
}

impl Default for ServeFile {
    fn default() -> Self {
        ServeFile {
            addr: "127.0.0.1:8080".into(),
            idle_minutes: 60,
        }
    }
}

pub fn serve(c: &Common, models: Option<&Path>) -> Result<()> {
    let file: ServeFile = load_config(c.config.as_deref())?;
    let addr: std::net::SocketAddr = file.addr.parse().map_err(|e| invalid(format!("addr {}: {e}", file.addr)))?;
    let registry = match models {
        Some(root) => Registry::load_dir(root)?,
        None => Registry::from_env()?,
    };
    if registry.is_empty() {
        log::warn!("no models loaded; session requests will get 503");
    }
    let config = ServiceConfig {
        idle_minutes: file.idle_minutes,
        log_dir: Some(c.out.clone()),
    };
    let state = Arc::new(AppState::new(registry, config, Arc::new(SystemClock)));
    tokio::runtime::Runtime::new()?.block_on(edcopilot_service::serve(state, addr))?;
    Ok(())
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateFile {
    task: OutcomeTask,
    /// Split file stem under `--data`.
    split: String,
    limit: Option<usize>,
    budget_minutes: Option<u32>,
    /// Replay every session log and require byte-identical responses.
    check_replay: bool,
}

impl Default for SimulateFile {
    fn default() -> Self {
        SimulateFile {
            task: OutcomeTask::CriticalOutcome,
            split: "test".into(),
            limit: None,
            budget_minutes: None,
            check_replay: true,
        }
    }
}

#[derive(Debug, Serialize)]
struct SimulatedPatient {
    patient_id: String,
    session_id: String,
    label: bool,
    prediction: bool,
    probability: f64,
    accrued_cost: u32,
    orders: Vec<String>,
}

fn api(e: edcopilot_service::ApiError) -> CliError {
    CliError::Other(anyhow::anyhow!(e.message()))
}

pub fn simulate(c: &Common, data: &Path, model: &Path) -> Result<()> {
    let file: SimulateFile = load_config(c.config.as_deref())?;
    let catalog = default_catalog();
    let entry = ModelEntry::load(model, file.task, &catalog)?;
    check_task(&entry.policy, file.task)?;
    let mut patients = read_split(data, &file.split, &catalog)?;
    if let Some(n) = file.limit {
        patients.truncate(n);
    }
    let mut registry = Registry::default();
    registry.insert(entry);
    let logs: PathBuf = c.out.join("sessions");
    let config = ServiceConfig {
        idle_minutes: u64::MAX / 60,
        log_dir: Some(logs.clone()),
    };
    let state = AppState::new(registry, config, Arc::new(SystemClock));
    fs::create_dir_all(&c.out)?;
    let mut rows = Vec::with_capacity(patients.len());
    for r in &patients {
        let mut body = json!({
            "task": file.task.as_str(),
            "triage": {"values": r.triage.values, "chief_complaint": r.triage.chief_complaint},
        });
        if let Some(b) = file.budget_minutes {
            body["budget_minutes"] = json!(b);
        }
        let created = state.create_session(body.to_string().as_bytes()).map_err(api)?;
        let id = created.session_id;
        let mut top = created.suggestion.top_action;
        let mut orders = Vec::new();
        while let ActionView::Order { group_id, group, .. } = top {
            let g = edcopilot::GroupId(group_id);
            let result = r.result(g).cloned().unwrap_or_else(|| LabResult::zero_filled(g, &catalog));
            let body = json!({"group_id": group_id, "values": result.values});
            top = state.submit_results(&id, body.to_string().as_bytes()).map_err(api)?.suggestion.top_action;
            orders.push(group);
        }
        let d = state.diagnose(&id, b"{}").map_err(api)?;
        rows.push(SimulatedPatient {
            patient_id: r.id.clone(),
            session_id: id,
            label: r.label(file.task),
            prediction: d.prediction,
            probability: d.probability,
            accrued_cost: d.accrued_cost,
            orders,
        });
    }
    let lines: Vec<String> = rows.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
    fs::write(c.out.join("simulated.jsonl"), lines.join("\n") + "\n")?;
    let confusion = ConfusionCounts::from_predictions(rows.iter().map(|s| (s.prediction, s.label)));
    let scores: Vec<f64> = rows.iter().map(|s| s.probability).collect();
    let labels: Vec<bool> = rows.iter().map(|s| s.label).collect();
    let mean_cost = rows.iter().map(|s| s.accrued_cost as f64).sum::<f64>() / rows.len().max(1) as f64;
    let report = MetricReport::new(confusion, auc(&scores, &labels), mean_cost);
    let mut identical = 0;
    if file.check_replay {
        let fresh = {
            let mut reg = Registry::default();
            reg.insert(ModelEntry::load(model, file.task, &catalog)?);
            AppState::new(reg, ServiceConfig::default(), Arc::new(SystemClock))
        };
        for s in &rows {
            let rep = fresh.replay(&logs.join(format!("{}.jsonl", s.session_id)))?;
            identical += usize::from(rep.byte_identical());
        }
    }
    write_json(
        &c.out.join("summary.json"),
        &json!({
            "sessions": rows.len(),
            "report": report,
            "replay_checked": file.check_replay,
            "replay_identical": identical,
        }),
    )?;
    log::info!(
        "{} sessions: f1 {:.4}, avg cost {:.1} min",
        rows.len(),
        report.f1,
        report.avg_time_cost
    );
    if file.check_replay && identical != rows.len() {
        return Err(CliError::Other(anyhow::anyhow!(
            "{} of {} session replays differ",
            rows.len() - identical,
            rows.len()
        )));
    }
    Ok(())
}
