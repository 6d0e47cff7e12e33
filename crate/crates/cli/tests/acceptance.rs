//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edcopilot::domain::{
    default_catalog, groups, metrics_from_confusion, ConfusionCounts, GroupId, LabCatalog, OutcomeTask, PatientRecord,
};
use edcopilot::encoder::{check_gradients, grad, EncoderConfig, EncoderParams, Tape, Var, Vocab};
use edcopilot::eval::{auc, cost_curve, evaluate_policy, run_baseline, BaselineSpec, LogisticConfig};
use edcopilot::rl::{
    env_reset, env_step, episode_return_objective_equivalence, toy_agreement, train_rl, train_toy, Action,
    ActionMode, HiddenStates, PolicyConfig, PolicyParams, PpoConfig, RewardConfig, RlConfig, ToyMdp,
};
use edcopilot::sft::{record_loss_on_tape, train_sft, SftConfig};
use edcopilot::synthgen::{bayes_posterior, generate, split, GeneratorConfig, SplitSpec};
use edcopilot::MetricReport;
use edcopilot_service::{AppState, ManualClock, ModelEntry, Registry, ServiceConfig};
use serde_json::json;

const TASK: OutcomeTask = OutcomeTask::CriticalOutcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = Result<Outcome, String>;

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed.as_secs_f64() < limit_secs as f64
}

fn gradient_fidelity() -> Check {
    let t = Instant::now();
    let catalog = default_catalog();
    let mut g = GeneratorConfig::default_for(&catalog);
    g.n_patients = 100;
    let patients = generate(&g, &catalog).map_err(|e| e.to_string())?.patients;
    let vocab = Vocab::fit(&catalog, &patients, 8, 512).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        d_ff: 16,
        head_hidden: 8,
    };
    let p: EncoderParams<f64> = EncoderParams::init(cfg, vocab, 7).map_err(|e| e.to_string())?;
    let rec = patients.iter().find(|r| r.observed.len() >= 3).ok_or("no record with 3 groups")?;
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| {
        let (lab, out) = record_loss_on_tape(&p, tape, vars, rec, TASK, 10.0)
            .map_err(|e| edcopilot::encoder::EncoderError::Shape(e.to_string()))?;
        Ok(match lab {
            Some(l) => tape.sum(&[l, out]),
            None => out,
        })
    };
    let (value, _) = grad(&p.weights.tensors, loss).map_err(|e| e.to_string())?;
    // Central-difference step near cbrt(f64::EPSILON), balancing truncation and roundoff.
    let report = check_gradients(&p.weights.tensors, 1e-5, loss).map_err(|e| e.to_string())?;
    let worst = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = report.len() == p.weights.len() && worst < 1e-3 && value.is_finite() && within(elapsed, 60);
    Ok(outcome(
        pass,
        format!(
            "{} tensors, max rel error {worst:.2e} (< 1e-3), {:.1}s (< 60s)",
            report.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn shaped_reward_equivalence() -> Check {
    let t = Instant::now();
    let m = ToyMdp::canonical();
    let mut held = 0;
    let mut policies = 0;
    for alpha in [1.0, 15.0, 64.0] {
        for beta in [0.01, 0.1, 1.0] {
            let r = episode_return_objective_equivalence(&m, &RewardConfig::with(alpha, beta)).map_err(|e| e.to_string())?;
            policies = r.num_policies;
            held += usize::from(r.holds());
        }
    }
    let elapsed = t.elapsed();
    Ok(outcome(
        held == 9 && within(elapsed, 60),
        format!(
            "{held}/9 grid points with identical argmax sets over {policies} policies, {:.2}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    ))
}

fn toy_ppo_optimality() -> Check {
    let t = Instant::now();
    let m = ToyMdp::canonical();
    let cfg = RewardConfig::default();
    let (policy, curve) =
        train_toy(&m, &cfg, &PpoConfig::toy(), PolicyConfig::default(), 1).map_err(|e| e.to_string())?;
    let steps = curve.last().map_or(0, |u| u.timesteps);
    let a = toy_agreement(&policy, &m, &cfg);
    let elapsed = t.elapsed();
    Ok(outcome(
        steps == 20_000 && a.reachable_rate() >= 0.95 && within(elapsed, 300),
        format!(
            "{}/{} reachable states optimal ({:.0}% >= 95%) after {steps} steps, {:.1}s (< 300s)",
            a.reachable_matched,
            a.reachable_total,
            100.0 * a.reachable_rate(),
            elapsed.as_secs_f64()
        ),
    ))
}

/// Threshold maximizing F1 on `(scores, labels)`; ties keep the larger threshold.
fn f1_optimal_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (-1.0, 0.5);
    for &t in &cands {
        let c = ConfusionCounts::from_predictions(scores.iter().zip(labels).map(|(&s, &y)| (s >= t, y)));
        let f = metrics_from_confusion(&c).0;
        if f >= best.0 {
            best = (f, t);
        }
    }
    best.1
}

/// Artifacts of the end-to-end run reused by later criteria.
struct E2e {
    catalog: LabCatalog,
    train: Vec<PatientRecord>,
    val: Vec<PatientRecord>,
    test: Vec<PatientRecord>,
    encoder: EncoderParams<f32>,
    policy: PolicyParams,
    report: MetricReport,
}

const SFT_SUBSET: usize = 4_000;
const SFT_VAL: usize = 1_000;
const SFT_EPOCHS: usize = 4;

fn e2e_sft_config() -> SftConfig {
    SftConfig {
        epochs: SFT_EPOCHS,
        ..SftConfig::default()
    }
}

fn e2e_rl_config(alpha: f64, beta: f64) -> RlConfig {
    RlConfig {
        task: TASK,
        reward: RewardConfig::with(alpha, beta),
        ppo: PpoConfig {
            lr: 1e-3,
            total_timesteps: 300_000,
            ..PpoConfig::default()
        },
        eval_every: 5,
        val_limit: Some(600),
        ..RlConfig::default()
    }
}

fn evaluate(e: &E2e, policy: &PolicyParams) -> Result<(MetricReport, f64), String> {
    let mut p = policy.clone();
    let mut h = HiddenStates::new(&e.encoder, &e.catalog, &e.test, 400_000).map_err(|e| e.to_string())?;
    let ev = evaluate_policy(&mut p, &e.test, Some(&mut h), &e.catalog, TASK, ActionMode::Restricted, None)
        .map_err(|e| e.to_string())?;
    let groups = ev.mean_groups();
    Ok((ev.report, groups))
}

fn end_to_end(slot: &mut Option<E2e>) -> Check {
    let t = Instant::now();
    let catalog = default_catalog();
    let mut g = GeneratorConfig::default_for(&catalog);
    g.n_patients = 20_000;
    let cohort = generate(&g, &catalog).map_err(|e| e.to_string())?;
    let (train, val, test) = split(&cohort, &SplitSpec::new(0, TASK)).map_err(|e| e.to_string())?;
    let (train, val, test) = (train.patients, val.patients, test.patients);

    let labels = |ps: &[PatientRecord]| -> Vec<bool> { ps.iter().map(|p| p.label(TASK)).collect() };
    let posterior = |ps: &[PatientRecord]| -> Result<Vec<f64>, String> {
        ps.iter()
            .map(|p| bayes_posterior(p, p.observed.len(), &g, &catalog, TASK).map_err(|e| e.to_string()))
            .collect()
    };
    let threshold = f1_optimal_threshold(&posterior(&val)?, &labels(&val));
    let test_post = posterior(&test)?;
    let bayes = ConfusionCounts::from_predictions(test_post.iter().zip(labels(&test)).map(|(&s, y)| (s >= threshold, y)));
    let bayes_f1 = metrics_from_confusion(&bayes).0;

    let full = run_baseline(
        BaselineSpec::FullPanelPolicy,
        &train,
        &val,
        &test,
        &catalog,
        TASK,
        &LogisticConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let full_cost = full.report.avg_time_cost;

    let sft = train_sft(&e2e_sft_config(), &catalog, &train[..SFT_SUBSET], &val[..SFT_VAL]).map_err(|e| e.to_string())?;
    let encoder = sft.params;
    let rl = train_rl(&encoder, &catalog, &train, &val, &e2e_rl_config(15.0, 0.01)).map_err(|e| e.to_string())?;
    let mut e = E2e {
        catalog,
        train,
        val,
        test,
        encoder,
        policy: rl.policy,
        report: full.report,
    };
    let (report, groups) = evaluate(&e, &e.policy)?;
    e.report = report.clone();
    let elapsed = t.elapsed();
    let f1_ok = report.f1 >= bayes_f1 - 0.05;
    let cost_ok = report.avg_time_cost <= 0.6 * full_cost;
    let detail = format!(
        "policy F1 {:.4} vs Bayes full-information F1 {bayes_f1:.4} (need >= {:.4}); cost {:.1} min vs full panel {full_cost:.1} min (ratio {:.3} <= 0.6); {groups:.2} groups/patient; {:.1} min (< 30 min)",
        report.f1,
        bayes_f1 - 0.05,
        report.avg_time_cost,
        report.avg_time_cost / full_cost,
        elapsed.as_secs_f64() / 60.0
    );
    *slot = Some(e);
    Ok(outcome(f1_ok && cost_ok && within(elapsed, 30 * 60), detail))
}

fn cost_curve_monotonicity(e: Option<&E2e>) -> Check {
    let e = e.ok_or("end-to-end run did not produce a policy")?;
    let budgets = [0, 30, 90, 180, 360, 857];
    let mut p = e.policy.clone();
    let mut h = HiddenStates::new(&e.encoder, &e.catalog, &e.test, 400_000).map_err(|e| e.to_string())?;
    let curve = cost_curve(&mut p, &e.test, Some(&mut h), &e.catalog, TASK, ActionMode::Restricted, &budgets)
        .map_err(|e| e.to_string())?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..curve.len() {
        for j in i + 1..curve.len() {
            worst = worst.max(curve[i].f1 - curve[j].f1);
        }
    }
    let points: Vec<String> = curve.iter().map(|c| format!("{}:{:.3}", c.max_allowed_minutes, c.f1)).collect();
    Ok(outcome(
        worst <= 0.02,
        format!("F1 by budget [{}]; largest drop {:.4} (<= 0.02)", points.join(" "), worst.max(0.0)),
    ))
}

fn tradeoff_direction(e: Option<&E2e>) -> Check {
    let e = e.ok_or("end-to-end run did not produce a policy")?;
    let run = |alpha: f64, beta: f64| -> Result<MetricReport, String> {
        let out = train_rl(&e.encoder, &e.catalog, &e.train, &e.val, &e2e_rl_config(alpha, beta)).map_err(|e| e.to_string())?;
        Ok(evaluate(e, &out.policy)?.0)
    };
    let a1 = run(1.0, 0.01)?;
    let a64 = run(64.0, 0.01)?;
    let b1 = run(15.0, 1.0)?;
    let b001 = &e.report;
    let gap = |r: &MetricReport| r.sensitivity - r.specificity;
    let sens_ok = a64.sensitivity >= a1.sensitivity - 0.02;
    let gap_ok = gap(&a64) > gap(&a1);
    let cost_ok = b1.avg_time_cost < b001.avg_time_cost;
    Ok(outcome(
        sens_ok && gap_ok && cost_ok,
        format!(
            "alpha 1 -> 64: sensitivity {:.3} -> {:.3}, sens-spec gap {:.3} -> {:.3}; beta 0.01 -> 1: cost {:.1} -> {:.1} min",
            a1.sensitivity,
            a64.sensitivity,
            gap(&a1),
            gap(&a64),
            b001.avg_time_cost,
            b1.avg_time_cost
        ),
    ))
}

fn generator_calibration() -> Check {
    let catalog = default_catalog();
    let mut g = GeneratorConfig::default_for(&catalog);
    g.n_patients = 10_000;
    let c = generate(&g, &catalog).map_err(|e| e.to_string())?;
    let n = c.len() as f64;
    let z = |rate: f64, target: f64| (rate - target) / (target * (1.0 - target) / n).sqrt();
    let (rc, rl) = (c.positive_rate(OutcomeTask::CriticalOutcome), c.positive_rate(OutcomeTask::LengthenedStay));
    let (zc, zl) = (z(rc, 0.0967), z(rl, 0.0690));
    let mg = c.mean_groups();
    Ok(outcome(
        zc.abs() <= 4.0 && zl.abs() <= 4.0 && (4.4..=5.0).contains(&mg),
        format!(
            "critical {:.4} ({zc:+.2} sigma), lengthened stay {:.4} ({zl:+.2} sigma), {mg:.3} groups/patient in [4.4, 5.0]",
            rc, rl
        ),
    ))
}

fn metric_exactness() -> Check {
    let mut failures = Vec::new();
    let cases = [
        ((3, 1, 2, 4), (6.0 / 9.0, 3.0 / 5.0, 4.0 / 5.0)),
        ((0, 0, 0, 10), (0.0, 0.0, 1.0)),
        ((5, 0, 0, 5), (1.0, 1.0, 1.0)),
    ];
    for ((tp, fp, fn_, tn), want) in cases {
        let got = metrics_from_confusion(&ConfusionCounts::new(tp, fp, fn_, tn));
        if got != want {
            failures.push(format!("confusion ({tp},{fp},{fn_},{tn}) gave {got:?}"));
        }
    }
    let labels = [false, false, true, true, false, true];
    let ordered = [0.1, 0.2, 0.7, 0.8, 0.3, 0.9];
    let anti: Vec<f64> = ordered.iter().map(|s| 1.0 - s).collect();
    for (name, scores, want) in [
        ("ordered", ordered.to_vec(), 1.0),
        ("anti-ordered", anti, 0.0),
        ("tied", vec![0.4; 6], 0.5),
    ] {
        let got = auc(&scores, &labels);
        if got != want {
            failures.push(format!("auc {name} gave {got}"));
        }
    }
    let catalog = default_catalog();
    let mut g = GeneratorConfig::default_for(&catalog);
    g.n_patients = 200;
    let patients = generate(&g, &catalog).map_err(|e| e.to_string())?.patients;
    let mut episodes = 0;
    for (i, p) in patients.iter().enumerate() {
        let mut s = env_reset(p, None);
        let order: Vec<GroupId> = catalog.group_ids().filter(|g| (g.0 as usize + i) % 3 != 0).collect();
        for &gid in &order {
            env_step(&mut s, p, Action::Order(gid), ActionMode::Unrestricted, &catalog).map_err(|e| e.to_string())?;
        }
        let want: u32 = order.iter().map(|&g| catalog.groups[g.index()].time_cost).sum();
        if s.accrued_cost != want {
            failures.push(format!("patient {} accrued {} instead of {want}", p.id, s.accrued_cost));
        }
        episodes += 1;
    }
    let cbc_chem = catalog.cost(groups::CBC) + catalog.cost(groups::CHEM);
    if cbc_chem != 90 {
        failures.push(format!("CBC + CHEM costs {cbc_chem}"));
    }
    Ok(outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("3 confusion vectors, 3 AUC vectors and {episodes} cost-accounting episodes exact")
        } else {
            failures.join("; ")
        },
    ))
}

fn determinism_and_persistence() -> Check {
    let catalog = default_catalog();
    let mut g = GeneratorConfig::default_for(&catalog);
    g.n_patients = 400;
    let cohort = generate(&g, &catalog).map_err(|e| e.to_string())?;
    let (train, val, _) = split(&cohort, &SplitSpec::new(1, TASK)).map_err(|e| e.to_string())?;
    let sft_cfg = SftConfig {
        epochs: 2,
        batch_size: 16,
        encoder: EncoderConfig {
            d_model: 16,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 32,
            head_hidden: 16,
        },
        ..SftConfig::default()
    };
    let s1 = train_sft(&sft_cfg, &catalog, &train.patients[..120], &val.patients).map_err(|e| e.to_string())?;
    let s2 = train_sft(&sft_cfg, &catalog, &train.patients[..120], &val.patients).map_err(|e| e.to_string())?;
    let sft_same = s1.history == s2.history && s1.params == s2.params;
    let rl_cfg = RlConfig {
        ppo: PpoConfig {
            total_timesteps: 512,
            buffer_steps: 256,
            ..PpoConfig::default()
        },
        val_limit: Some(20),
        ..RlConfig::default()
    };
    let r1 = train_rl(&s1.params, &catalog, &train.patients, &val.patients, &rl_cfg).map_err(|e| e.to_string())?;
    let r2 = train_rl(&s1.params, &catalog, &train.patients, &val.patients, &rl_cfg).map_err(|e| e.to_string())?;
    let rl_same = r1.curve == r2.curve && r1.policy == r2.policy;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (enc_path, pol_path) = (dir.path().join("encoder.edcp"), dir.path().join("policy.edcp"));
    s1.params.save(&enc_path).map_err(|e| e.to_string())?;
    r1.policy.save(&pol_path, &catalog).map_err(|e| e.to_string())?;
    let enc = EncoderParams::load(&enc_path, &catalog).map_err(|e| e.to_string())?;
    let pol = PolicyParams::load(&pol_path, &catalog).map_err(|e| e.to_string())?;
    let bits = |ts: &[edcopilot::encoder::Tensor<f32>]| -> Vec<u32> {
        ts.iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect()
    };
    let round_trip = bits(&enc.weights.tensors) == bits(&s1.params.weights.tensors)
        && bits(&pol.weights.tensors) == bits(&r1.policy.weights.tensors)
        && enc.to_bytes() == std::fs::read(&enc_path).map_err(|e| e.to_string())?
        && pol.to_bytes(&catalog) == std::fs::read(&pol_path).map_err(|e| e.to_string())?;

    let logs = tempfile::tempdir().map_err(|e| e.to_string())?;
    let registry = || -> Result<Registry, String> {
        let mut reg = Registry::default();
        reg.insert(ModelEntry::new(TASK, catalog.clone(), enc.clone(), pol.clone(), Vec::new()).map_err(|e| e.to_string())?);
        Ok(reg)
    };
    let live = AppState::new(
        registry()?,
        ServiceConfig {
            log_dir: Some(logs.path().to_path_buf()),
            ..ServiceConfig::default()
        },
        Arc::new(ManualClock::new(0)),
    );
    let p = &val.patients[0];
    let body = json!({"task": TASK.as_str(), "triage": {"values": p.triage.values, "chief_complaint": p.triage.chief_complaint}});
    let id = live.create_session(body.to_string().as_bytes()).map_err(|e| e.message())?.session_id;
    for gid in [groups::CBC, groups::CHEM] {
        let values = vec![0.5; catalog.groups[gid.index()].tests.len()];
        let b = json!({"group_id": gid.0, "values": values});
        live.submit_results(&id, b.to_string().as_bytes()).map_err(|e| e.message())?;
    }
    let d = live.diagnose(&id, b"{}").map_err(|e| e.message())?;
    let fresh = AppState::new(registry()?, ServiceConfig::default(), Arc::new(ManualClock::new(99)));
    let replay = fresh.replay(&logs.path().join(format!("{id}.jsonl"))).map_err(|e| e.to_string())?;
    let replay_ok = replay.byte_identical() && replay.steps == 4 && d.accrued_cost == 90;

    Ok(outcome(
        sft_same && rl_same && round_trip && replay_ok,
        format!(
            "sft histories identical: {sft_same}; rl histories identical: {rl_same}; weights bit-exact: {round_trip}; replay {}/{} responses identical",
            replay.identical, replay.steps
        ),
    ))
}

fn report(name: &str, check: Check, failed: &mut usize) {
    match check {
        Ok(o) => {
            println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            *failed += usize::from(!o.pass);
        }
        Err(e) => {
            println!("FAIL {name}: error: {e}");
            *failed += 1;
        }
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let t = Instant::now();
    report("gradient_fidelity", gradient_fidelity(), &mut failed);
    report("shaped_reward_equivalence", shaped_reward_equivalence(), &mut failed);
    report("toy_ppo_optimality", toy_ppo_optimality(), &mut failed);
    report("generator_calibration", generator_calibration(), &mut failed);
    report("metric_exactness", metric_exactness(), &mut failed);
    report("determinism_and_persistence", determinism_and_persistence(), &mut failed);
    let mut e2e = None;
    report("end_to_end_cost_effectiveness", end_to_end(&mut e2e), &mut failed);
    report("cost_curve_monotonicity", cost_curve_monotonicity(e2e.as_ref()), &mut failed);
    report("tradeoff_direction", tradeoff_direction(e2e.as_ref()), &mut failed);
    println!(
        "acceptance: {} of 9 criteria passed in {:.1} min",
        9 - failed,
        t.elapsed().as_secs_f64() / 60.0
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
