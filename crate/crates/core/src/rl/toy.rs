//! A two-group MDP small enough to enumerate every deterministic policy.
//! Each group has one binary test; results are conditionally independent
//! given the label.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    GroupId, LabCatalog, LabGroup, LabResult, LabTest, NamingMode, PatientRecord, TriageRecord,
};

use super::env::{env_reset, env_step, legal_actions, reward, Action, ActionMode, EnvState, RewardConfig};
use super::policy::{PolicyConfig, PolicyParams};
use super::ppo::{train_ppo, Environment, Observation, PpoConfig, UpdateRecord};
use super::RlError;
use crate::util::stream_rng;

const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMdp {
    /// `P(y = 1)`.
    pub prior: f64,
    /// `P(result = 1 | y)` per group, indexed `[group][y]`.
    pub hit_rate: [[f64; 2]; 2],
    pub costs: [u32; 2],
}

/// Acquired `(group, result)` pairs in order.
pub type ToyState = Vec<(u8, bool)>;

/// Action per state, only for the states the policy can reach.
pub type ToyPolicy = BTreeMap<ToyState, Action>;

/// One joint draw of label and both results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyOutcome {
    pub y: bool,
    pub results: [bool; 2],
    pub prob: f64,
}

impl ToyMdp {
    pub fn canonical() -> Self {
        ToyMdp {
            prior: 0.06,
            hit_rate: [[0.3, 0.99], [0.05, 0.95]],
            costs: [10, 30],
        }
    }

    pub fn catalog(&self) -> LabCatalog {
        let names = [("Toy Panel A", "A", "Marker A"), ("Toy Panel B", "B", "Marker B")];
        LabCatalog {
            groups: names
                .iter()
                .enumerate()
                .map(|(i, (name, short, _))| LabGroup {
                    id: GroupId(i as u8),
                    name: name.to_string(),
                    short_name: short.to_string(),
                    tests: vec![i as u16],
                    time_cost: self.costs[i],
                })
                .collect(),
            tests: names
                .iter()
                .enumerate()
                .map(|(i, (_, _, test))| LabTest {
                    id: i as u16,
                    name: test.to_string(),
                    group_id: GroupId(i as u8),
                })
                .collect(),
            naming_mode: NamingMode::RawName,
            frequency_rank: vec![GroupId(0), GroupId(1)],
        }
    }

    pub fn outcomes(&self) -> Vec<ToyOutcome> {
        let mut out = Vec::with_capacity(8);
        for y in [false, true] {
            for a in [false, true] {
                for b in [false, true] {
                    let p = |g: usize, r: bool| {
                        let h = self.hit_rate[g][y as usize];
                        if r {
                            h
                        } else {
                            1.0 - h
                        }
                    };
                    let py = if y { self.prior } else { 1.0 - self.prior };
                    out.push(ToyOutcome {
                        y,
                        results: [a, b],
                        prob: py * p(0, a) * p(1, b),
                    });
                }
            }
        }
        out
    }

    /// A patient who received both groups with the outcome's results.
    pub fn record(&self, o: &ToyOutcome) -> PatientRecord {
        PatientRecord {
            id: format!("toy-{}{}{}", o.y as u8, o.results[0] as u8, o.results[1] as u8),
            triage: TriageRecord {
                values: [50.0, 80.0, 16.0, 120.0, 80.0, 36.8, 98.0, 3.0, 0.0],
                chief_complaint: 7,
            },
            observed: (0..2)
                .map(|g| LabResult {
                    group_id: GroupId(g as u8),
                    values: vec![o.results[g] as u8 as f64],
                })
                .collect(),
            y_critical: o.y,
            y_los: false,
            latent_state: None,
        }
    }

    /// `P(y = 1 | state)`.
    pub fn posterior(&self, state: &ToyState) -> f64 {
        let lik = |y: usize| {
            state.iter().fold(1.0, |acc, &(g, r)| {
                let h = self.hit_rate[g as usize][y];
                acc * if r { h } else { 1.0 - h }
            })
        };
        let pos = self.prior * lik(1);
        pos / (pos + (1.0 - self.prior) * lik(0))
    }

    /// All 13 information states.
    pub fn states() -> Vec<ToyState> {
        let mut out = vec![vec![]];
        for g in 0..2u8 {
            for r in [false, true] {
                out.push(vec![(g, r)]);
            }
        }
        for g in 0..2u8 {
            for r1 in [false, true] {
                for r2 in [false, true] {
                    out.push(vec![(g, r1), (1 - g, r2)]);
                }
            }
        }
        out
    }

    pub fn state_index(state: &ToyState) -> usize {
        Self::states().iter().position(|s| s == state).expect("a toy state")
    }
}

fn actions_at(state: &ToyState) -> Vec<Action> {
    let mut a: Vec<Action> = (0..2u8)
        .filter(|g| !state.iter().any(|&(h, _)| h == *g))
        .map(|g| Action::Order(GroupId(g)))
        .collect();
    a.extend([Action::Predict(true), Action::Predict(false)]);
    a
}

/// Every deterministic policy, each restricted to the states it reaches.
pub fn enumerate_policies() -> Vec<ToyPolicy> {
    fn expand(state: ToyState) -> Vec<ToyPolicy> {
        let mut out = Vec::new();
        for a in actions_at(&state) {
            match a {
                Action::Predict(_) => out.push(BTreeMap::from([(state.clone(), a)])),
                Action::Order(g) => {
                    let branch = |r: bool| {
                        let mut s = state.clone();
                        s.push((g.0, r));
                        expand(s)
                    };
                    let (neg, pos) = (branch(false), branch(true));
                    for p0 in &neg {
                        for p1 in &pos {
                            let mut p = p0.clone();
                            p.extend(p1.iter().map(|(k, v)| (k.clone(), *v)));
                            p.insert(state.clone(), a);
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }
    expand(Vec::new())
}

fn toy_state(state: &EnvState) -> ToyState {
    state
        .results
        .iter()
        .map(|r| (r.group_id.0, r.values[0] > 0.5))
        .collect()
}

/// Expected confusion rates and cost of a policy, from the outcome table alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyObjective {
    pub tp: f64,
    pub tn: f64,
    pub cost: f64,
}

impl ToyObjective {
    /// `TN + alpha * TP - beta * Cost`, with the true-negative and
    /// wrong-prediction payoffs taken from `cfg`.
    pub fn value(&self, cfg: &RewardConfig) -> f64 {
        let wrong = 1.0 - self.tp - self.tn;
        cfg.true_negative_reward * self.tn + cfg.alpha * self.tp + cfg.wrong_prediction_reward * wrong
            - cfg.beta * cfg.cost_unit.scale_f64(self.cost)
    }
}

pub fn objective(mdp: &ToyMdp, policy: &ToyPolicy) -> ToyObjective {
    let mut o = ToyObjective {
        tp: 0.0,
        tn: 0.0,
        cost: 0.0,
    };
    for out in mdp.outcomes() {
        let mut state: ToyState = Vec::new();
        let mut cost = 0u32;
        let pred = loop {
            match policy[&state] {
                Action::Order(g) => {
                    cost += mdp.costs[g.index()];
                    state.push((g.0, out.results[g.index()]));
                }
                Action::Predict(p) => break p,
            }
        };
        o.tp += out.prob * (pred && out.y) as u8 as f64;
        o.tn += out.prob * (!pred && !out.y) as u8 as f64;
        o.cost += out.prob * cost as f64;
    }
    o
}

/// Expected episode return, stepping the real environment on each outcome.
pub fn shaped_return(mdp: &ToyMdp, policy: &ToyPolicy, cfg: &RewardConfig) -> Result<f64, RlError> {
    let catalog = mdp.catalog();
    let mut total = 0.0;
    for out in mdp.outcomes() {
        let rec = mdp.record(&out);
        let mut s = env_reset(&rec, None);
        let mut ret = 0.0;
        while !s.terminated {
            let a = *policy
                .get(&toy_state(&s))
                .ok_or_else(|| RlError::Config("policy misses a reachable state".into()))?;
            env_step(&mut s, &rec, a, ActionMode::Restricted, &catalog)?;
            ret += reward(a, rec.y_critical, cfg, &catalog);
        }
        total += out.prob * ret;
    }
    Ok(total)
}

/// Optimal action values by backward induction over information states.
pub fn optimal_q(mdp: &ToyMdp, cfg: &RewardConfig) -> BTreeMap<ToyState, Vec<(Action, f64)>> {
    let catalog = mdp.catalog();
    let mut q: BTreeMap<ToyState, Vec<(Action, f64)>> = BTreeMap::new();
    let mut v: BTreeMap<ToyState, f64> = BTreeMap::new();
    let mut states = ToyMdp::states();
    states.sort_by_key(|s| std::cmp::Reverse(s.len()));
    for s in states {
        let p = mdp.posterior(&s);
        let qs: Vec<(Action, f64)> = actions_at(&s)
            .into_iter()
            .map(|a| {
                let value = match a {
                    Action::Predict(_) => {
                        p * reward(a, true, cfg, &catalog) + (1.0 - p) * reward(a, false, cfg, &catalog)
                    }
                    Action::Order(g) => {
                        let h = mdp.hit_rate[g.index()];
                        let p_hit = p * h[1] + (1.0 - p) * h[0];
                        let next = |r: bool| {
                            let mut n = s.clone();
                            n.push((g.0, r));
                            v[&n]
                        };
                        reward(a, false, cfg, &catalog) + p_hit * next(true) + (1.0 - p_hit) * next(false)
                    }
                };
                (a, value)
            })
            .collect();
        let best = qs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        v.insert(s.clone(), best);
        q.insert(s, qs);
    }
    q
}

/// Actions within tolerance of the optimum at each state.
pub fn optimal_actions(q: &BTreeMap<ToyState, Vec<(Action, f64)>>) -> BTreeMap<ToyState, Vec<Action>> {
    q.iter()
        .map(|(s, qs)| {
            let best = qs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let acts = qs.iter().filter(|x| x.1 >= best - TIE_TOL).map(|x| x.0).collect();
            (s.clone(), acts)
        })
        .collect()
}

/// States visited with positive probability by some optimal policy.
pub fn reachable_under_optimum(mdp: &ToyMdp, cfg: &RewardConfig) -> Vec<ToyState> {
    let best = optimal_actions(&optimal_q(mdp, cfg));
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    while let Some(s) = frontier.pop() {
        for a in &best[&s] {
            if let Action::Order(g) = a {
                for r in [false, true] {
                    let mut n = s.clone();
                    n.push((g.0, r));
                    frontier.push(n);
                }
            }
        }
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out.sort();
    out
}

fn argmax_set(values: &[f64]) -> Vec<usize> {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..values.len()).filter(|&i| values[i] >= best - TIE_TOL).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub alpha: f64,
    pub beta: f64,
    pub num_policies: usize,
    /// Policy indices maximizing `TN + alpha * TP - beta * Cost`.
    pub objective_argmax: Vec<usize>,
    /// Policy indices maximizing the expected shaped return.
    pub return_argmax: Vec<usize>,
    /// Policy indices that are greedy with respect to the optimal action values.
    pub dp_greedy: Vec<usize>,
    pub best_objective: f64,
    pub dp_value: f64,
}

impl EquivalenceReport {
    pub fn holds(&self) -> bool {
        self.objective_argmax == self.return_argmax
            && self.objective_argmax == self.dp_greedy
            && (self.best_objective - self.dp_value).abs() < 1e-9
    }
}

pub fn episode_return_objective_equivalence(
    mdp: &ToyMdp,
    cfg: &RewardConfig,
) -> Result<EquivalenceReport, RlError> {
    cfg.validate()?;
    let policies = enumerate_policies();
    let obj: Vec<f64> = policies.iter().map(|p| objective(mdp, p).value(cfg)).collect();
    let ret: Vec<f64> = policies
        .iter()
        .map(|p| shaped_return(mdp, p, cfg))
        .collect::<Result<_, _>>()?;
    let q = optimal_q(mdp, cfg);
    let best = optimal_actions(&q);
    let dp_greedy = (0..policies.len())
        .filter(|&i| policies[i].iter().all(|(s, a)| best[s].contains(a)))
        .collect();
    let dp_value = q[&Vec::new()].iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(EquivalenceReport {
        alpha: cfg.alpha,
        beta: cfg.beta,
        num_policies: policies.len(),
        best_objective: obj.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        objective_argmax: argmax_set(&obj),
        return_argmax: argmax_set(&ret),
        dp_greedy,
        dp_value,
    })
}

/// The toy MDP as a sampled environment with one-hot state features.
pub struct ToyEnv {
    pub mdp: ToyMdp,
    pub reward: RewardConfig,
    catalog: LabCatalog,
    current: Option<(PatientRecord, EnvState)>,
}

impl ToyEnv {
    pub fn new(mdp: ToyMdp, reward: RewardConfig) -> Self {
        let catalog = mdp.catalog();
        ToyEnv {
            mdp,
            reward,
            catalog,
            current: None,
        }
    }

    pub fn observation(&self, state: &ToyState) -> Observation {
        let mut features = vec![0.0f32; 13];
        features[ToyMdp::state_index(state)] = 1.0;
        let mut mask = vec![false; 4];
        for a in actions_at(state) {
            mask[a.index(2)] = true;
        }
        Observation { features, mask }
    }

    fn observe(&self, rec: &PatientRecord, s: &EnvState) -> Observation {
        let obs = self.observation(&toy_state(s));
        debug_assert_eq!(obs.mask, legal_actions(s, &rec.panel(), ActionMode::Restricted, &self.catalog));
        obs
    }
}

impl Environment for ToyEnv {
    fn num_actions(&self) -> usize {
        4
    }

    fn feature_dim(&self) -> usize {
        13
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Observation, RlError> {
        let y = rng.random::<f64>() < self.mdp.prior;
        let mut results = [false; 2];
        for (g, r) in results.iter_mut().enumerate() {
            *r = rng.random::<f64>() < self.mdp.hit_rate[g][y as usize];
        }
        let rec = self.mdp.record(&ToyOutcome { y, results, prob: 1.0 });
        let s = env_reset(&rec, None);
        let obs = self.observe(&rec, &s);
        self.current = Some((rec, s));
        Ok(obs)
    }

    fn step(&mut self, action: usize) -> Result<(f64, Option<Observation>), RlError> {
        let (rec, mut s) = self.current.take().ok_or(RlError::NoEpisode)?;
        let a = Action::from_index(action, 2).ok_or(RlError::NoEpisode)?;
        env_step(&mut s, &rec, a, ActionMode::Restricted, &self.catalog)?;
        let r = reward(a, rec.y_critical, &self.reward, &self.catalog);
        if s.terminated {
            return Ok((r, None));
        }
        let obs = self.observe(&rec, &s);
        self.current = Some((rec, s));
        Ok((r, Some(obs)))
    }
}

/// How often a policy's greedy action is optimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyAgreement {
    /// Over the states some optimal policy reaches.
    pub reachable_matched: usize,
    pub reachable_total: usize,
    /// Over all 13 information states.
    pub all_matched: usize,
    pub all_total: usize,
}

impl ToyAgreement {
    pub fn reachable_rate(&self) -> f64 {
        self.reachable_matched as f64 / self.reachable_total as f64
    }
}

pub fn toy_agreement(policy: &PolicyParams, mdp: &ToyMdp, cfg: &RewardConfig) -> ToyAgreement {
    let env = ToyEnv::new(mdp.clone(), *cfg);
    let best = optimal_actions(&optimal_q(mdp, cfg));
    let reach = reachable_under_optimum(mdp, cfg);
    let ok = |s: &ToyState| {
        let obs = env.observation(s);
        let a = Action::from_index(policy.greedy(&obs.features, &obs.mask), 2).expect("toy action");
        best[s].contains(&a)
    };
    let states = ToyMdp::states();
    ToyAgreement {
        reachable_matched: reach.iter().filter(|s| ok(s)).count(),
        reachable_total: reach.len(),
        all_matched: states.iter().filter(|s| ok(s)).count(),
        all_total: states.len(),
    }
}

/// PPO on the sampled toy environment.
pub fn train_toy(
    mdp: &ToyMdp,
    reward: &RewardConfig,
    ppo: &PpoConfig,
    policy: PolicyConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<UpdateRecord>), RlError> {
    let mut env = ToyEnv::new(mdp.clone(), *reward);
    let mut params = PolicyParams::init(policy, env.feature_dim(), env.num_actions(), seed);
    let mut rng = stream_rng(seed, 0x70F);
    let curve = train_ppo(&mut env, &mut params, ppo, &mut rng, |_, _| Ok(()))?;
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catalog_is_valid_and_outcomes_sum_to_one() {
        let m = ToyMdp::canonical();
        m.catalog().validate().unwrap();
        let total: f64 = m.outcomes().iter().map(|o| o.prob).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(ToyMdp::states().len(), 13);
    }

    #[test]
    fn policy_count_and_distinctness() {
        let ps = enumerate_policies();
        assert_eq!(ps.len(), 74);
        for (i, p) in ps.iter().enumerate() {
            assert!(ps[..i].iter().all(|q| q != p));
        }
    }

    #[test]
    fn free_information_picks_the_full_information_policy() {
        let m = ToyMdp::canonical();
        let cfg = RewardConfig::with(15.0, 0.0);
        let r = episode_return_objective_equivalence(&m, &cfg).unwrap();
        assert!(r.holds(), "{r:?}");
        let ps = enumerate_policies();
        let full = ps
            .iter()
            .position(|p| {
                p.iter().all(|(s, a)| match a {
                    Action::Predict(y) => s.len() == 2 && *y == (15.0 * m.posterior(s) > 1.0 - m.posterior(s)),
                    Action::Order(g) => s.is_empty() && g.0 == 0 || s.len() == 1,
                })
            })
            .unwrap();
        assert!(r.objective_argmax.contains(&full));
    }

    #[test]
    fn costly_information_with_no_alpha_predicts_negative_at_once() {
        let m = ToyMdp::canonical();
        let r = episode_return_objective_equivalence(&m, &RewardConfig::with(0.0, 100.0)).unwrap();
        assert!(r.holds());
        let ps = enumerate_policies();
        let want: Vec<usize> = (0..ps.len())
            .filter(|&i| ps[i] == BTreeMap::from([(vec![], Action::Predict(false))]))
            .collect();
        assert_eq!(r.objective_argmax, want);
    }

    #[test]
    fn default_optimum_orders_adaptively() {
        let m = ToyMdp::canonical();
        let cfg = RewardConfig::default();
        let r = episode_return_objective_equivalence(&m, &cfg).unwrap();
        assert!(r.holds(), "{r:?}");
        assert_eq!(r.objective_argmax.len(), 1);
        let reach = reachable_under_optimum(&m, &cfg);
        assert!(reach.len() > 3, "{reach:?}");
    }

    #[test]
    fn objective_and_return_agree_for_every_policy() {
        let m = ToyMdp::canonical();
        let cfg = RewardConfig::with(4.0, 0.1);
        for p in enumerate_policies() {
            let a = objective(&m, &p).value(&cfg);
            let b = shaped_return(&m, &p, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ppo_learns_the_optimal_toy_policy() {
        let m = ToyMdp::canonical();
        let cfg = RewardConfig::default();
        let (p, curve) = train_toy(&m, &cfg, &PpoConfig::toy(), PolicyConfig::default(), 1).unwrap();
        assert_eq!(curve.last().unwrap().timesteps, 20_000);
        let a = toy_agreement(&p, &m, &cfg);
        assert!(a.reachable_rate() >= 0.95, "{a:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn optimal_set_is_scale_invariant(alpha in 0.0f64..64.0, beta in 0.0f64..1.0, k in 0.01f64..100.0) {
            let m = ToyMdp::canonical();
            let base = RewardConfig::with(alpha, beta);
            let scaled = RewardConfig { alpha: k * alpha, beta: k * beta, true_negative_reward: k, ..base };
            let a = episode_return_objective_equivalence(&m, &base).unwrap();
            let b = episode_return_objective_equivalence(&m, &scaled).unwrap();
            prop_assert!(a.holds() && b.holds());
            prop_assert_eq!(a.objective_argmax, b.objective_argmax);
        }
    }
}
