use serde::{Deserialize, Serialize};

use crate::domain::{GroupId, LabCatalog, LabResult, PatientRecord};

use super::RlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Only groups the patient actually received may be ordered.
    Restricted,
    /// Any unacquired group may be ordered; unreceived ones come back zero-filled.
    Unrestricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Order(GroupId),
    Predict(bool),
}

impl Action {
    /// Orders occupy `0..k`, then positive, then negative.
    pub fn index(self, k: usize) -> usize {
        match self {
            Action::Order(g) => g.index(),
            Action::Predict(true) => k,
            Action::Predict(false) => k + 1,
        }
    }

    pub fn from_index(i: usize, k: usize) -> Option<Action> {
        match i {
            i if i < k => Some(Action::Order(GroupId(i as u8))),
            i if i == k => Some(Action::Predict(true)),
            i if i == k + 1 => Some(Action::Predict(false)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostUnit {
    #[default]
    Minutes,
    Hours,
}

impl CostUnit {
    pub fn scale(self, minutes: u32) -> f64 {
        self.scale_f64(minutes as f64)
    }

    pub fn scale_f64(self, minutes: f64) -> f64 {
        match self {
            CostUnit::Minutes => minutes,
            CostUnit::Hours => minutes / 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Reward for a true-positive prediction.
    pub alpha: f64,
    /// Penalty per cost unit of an order, applied as `-beta * c(a)`.
    pub beta: f64,
    pub wrong_prediction_reward: f64,
    pub true_negative_reward: f64,
    pub cost_unit: CostUnit,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 15.0,
            beta: 0.01,
            wrong_prediction_reward: 0.0,
            true_negative_reward: 1.0,
            cost_unit: CostUnit::Minutes,
        }
    }
}

impl RewardConfig {
    pub fn with(alpha: f64, beta: f64) -> Self {
        RewardConfig {
            alpha,
            beta,
            ..RewardConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let finite = [self.alpha, self.beta, self.wrong_prediction_reward, self.true_negative_reward]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(RlError::Config(format!(
                "alpha and beta must be finite and non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One patient's episode so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub patient_id: String,
    /// Results in acquisition order; zero-filled for unreceived groups.
    pub results: Vec<LabResult>,
    pub accrued_cost: u32,
    pub terminated: bool,
    pub step_count: usize,
    /// Orders that would push `accrued_cost` past this are illegal.
    pub budget: Option<u32>,
    pub prediction: Option<bool>,
}

impl EnvState {
    pub fn acquired(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.results.iter().map(|r| r.group_id)
    }

    pub fn has_acquired(&self, g: GroupId) -> bool {
        self.results.iter().any(|r| r.group_id == g)
    }

    /// Appends a result and pays for it; shared by the simulator and the live loop.
    pub fn push_result(&mut self, result: LabResult, catalog: &LabCatalog) {
        self.accrued_cost += catalog.cost(result.group_id);
        self.results.push(result);
        self.step_count += 1;
    }
}

pub fn env_reset(patient: &PatientRecord, budget: Option<u32>) -> EnvState {
    EnvState {
        patient_id: patient.id.clone(),
        results: Vec::new(),
        accrued_cost: 0,
        terminated: false,
        step_count: 0,
        budget,
        prediction: None,
    }
}

/// Legality of each action index (`K` orders, then Predict+, Predict-).
/// `received` is the patient's observed panel; it only matters in restricted mode.
pub fn legal_actions(
    state: &EnvState,
    received: &[GroupId],
    mode: ActionMode,
    catalog: &LabCatalog,
) -> Vec<bool> {
    let k = catalog.num_groups();
    let mut mask = vec![false; k + 2];
    if state.terminated {
        return mask;
    }
    for g in catalog.group_ids() {
        let available = match mode {
            ActionMode::Restricted => received.contains(&g),
            ActionMode::Unrestricted => true,
        };
        let affordable = state
            .budget
            .is_none_or(|b| state.accrued_cost + catalog.cost(g) <= b);
        mask[g.index()] = available && affordable && !state.has_acquired(g);
    }
    mask[k] = true;
    mask[k + 1] = true;
    mask
}

/// Applies `action`; returns the newly observed result for an order.
pub fn env_step(
    state: &mut EnvState,
    patient: &PatientRecord,
    action: Action,
    mode: ActionMode,
    catalog: &LabCatalog,
) -> Result<Option<LabResult>, RlError> {
    let k = catalog.num_groups();
    let mask = legal_actions(state, &patient.panel(), mode, catalog);
    if !mask.get(action.index(k)).copied().unwrap_or(false) {
        return Err(RlError::IllegalAction {
            action,
            patient: patient.id.clone(),
        });
    }
    match action {
        Action::Order(g) => {
            let result = match patient.result(g) {
                Some(r) => r.clone(),
                None => LabResult::zero_filled(g, catalog),
            };
            state.push_result(result.clone(), catalog);
            Ok(Some(result))
        }
        Action::Predict(p) => {
            state.terminated = true;
            state.prediction = Some(p);
            state.step_count += 1;
            Ok(None)
        }
    }
}

pub fn reward(action: Action, true_label: bool, cfg: &RewardConfig, catalog: &LabCatalog) -> f64 {
    match action {
        Action::Order(g) => -cfg.beta * cfg.cost_unit.scale(catalog.cost(g)),
        Action::Predict(p) => match (p, true_label) {
            (true, true) => cfg.alpha,
            (false, false) => cfg.true_negative_reward,
            _ => cfg.wrong_prediction_reward,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{default_catalog, groups};
    use crate::synthgen::{generate, GeneratorConfig};

    fn patients() -> (Vec<PatientRecord>, LabCatalog) {
        let c = default_catalog();
        let mut cfg = GeneratorConfig::default_for(&c);
        cfg.n_patients = 300;
        (generate(&cfg, &c).unwrap().patients, c)
    }

    fn orders(mask: &[bool], k: usize) -> Vec<usize> {
        (0..k).filter(|&i| mask[i]).collect()
    }

    #[test]
    fn action_indices_round_trip() {
        for i in 0..14 {
            assert_eq!(Action::from_index(i, 12).unwrap().index(12), i);
        }
        assert_eq!(Action::from_index(14, 12), None);
    }

    #[test]
    fn reset_is_pure_and_empty() {
        let (ps, _) = patients();
        let a = env_reset(&ps[0], None);
        assert_eq!(a, env_reset(&ps[0], None));
        assert_eq!(a.accrued_cost, 0);
        assert_eq!(a.acquired().count(), 0);
        assert!(!a.terminated);
    }

    #[test]
    fn restricted_mask_is_a_set_difference() {
        let (ps, c) = patients();
        let mut p = ps[0].clone();
        p.observed = vec![
            ps.iter().find_map(|r| r.result(groups::CBC)).unwrap().clone(),
            ps.iter().find_map(|r| r.result(groups::CHEM)).unwrap().clone(),
        ];
        let mut s = env_reset(&p, None);
        env_step(&mut s, &p, Action::Order(groups::CBC), ActionMode::Restricted, &c).unwrap();
        let m = legal_actions(&s, &p.panel(), ActionMode::Restricted, &c);
        assert_eq!(orders(&m, 12), vec![groups::CHEM.index()]);
        assert!(m[12] && m[13]);

        p.observed.clear();
        let m = legal_actions(&env_reset(&p, None), &[], ActionMode::Restricted, &c);
        assert_eq!(orders(&m, 12), Vec::<usize>::new());
        assert!(m[12] && m[13]);
    }

    #[test]
    fn unrestricted_exhaustion_and_zero_fill() {
        let (ps, c) = patients();
        let p = ps.iter().find(|r| !r.has_group(groups::TOX)).unwrap();
        let mut s = env_reset(p, None);
        let r = env_step(&mut s, p, Action::Order(groups::TOX), ActionMode::Unrestricted, &c)
            .unwrap()
            .unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!(s.accrued_cost, c.cost(groups::TOX));
        assert!(env_step(&mut s, p, Action::Order(groups::TOX), ActionMode::Restricted, &c).is_err());
        for g in c.group_ids().filter(|&g| g != groups::TOX) {
            env_step(&mut s, p, Action::Order(g), ActionMode::Unrestricted, &c).unwrap();
        }
        assert_eq!(s.accrued_cost, c.total_cost());
        assert_eq!(s.accrued_cost, 857);
        let m = legal_actions(&s, &p.panel(), ActionMode::Unrestricted, &c);
        assert_eq!(orders(&m, 12), Vec::<usize>::new());
    }

    #[test]
    fn costs_and_termination() {
        let (ps, c) = patients();
        let p = ps.iter().find(|r| r.has_group(groups::CBC)).unwrap();
        let mut s = env_reset(p, None);
        env_step(&mut s, p, Action::Order(groups::CBC), ActionMode::Restricted, &c).unwrap();
        assert_eq!(s.accrued_cost, 30);
        env_step(&mut s, p, Action::Predict(true), ActionMode::Restricted, &c).unwrap();
        assert!(s.terminated);
        assert_eq!(s.accrued_cost, 30);
        assert!(legal_actions(&s, &p.panel(), ActionMode::Restricted, &c).iter().all(|&x| !x));
        assert!(env_step(&mut s, p, Action::Predict(false), ActionMode::Restricted, &c).is_err());
    }

    #[test]
    fn budget_masks_unaffordable_orders() {
        let (ps, c) = patients();
        let p = &ps[0];
        let m = legal_actions(&env_reset(p, Some(0)), &p.panel(), ActionMode::Unrestricted, &c);
        assert_eq!(orders(&m, 12), Vec::<usize>::new());
        let m = legal_actions(&env_reset(p, Some(30)), &p.panel(), ActionMode::Unrestricted, &c);
        for g in c.group_ids() {
            assert_eq!(m[g.index()], c.cost(g) <= 30);
        }
    }

    #[test]
    fn reward_cases() {
        let c = default_catalog();
        let cfg = RewardConfig::default();
        assert!((reward(Action::Order(groups::CHEM), false, &cfg, &c) + 0.60).abs() < 1e-12);
        assert_eq!(reward(Action::Predict(true), true, &cfg, &c), 15.0);
        assert_eq!(reward(Action::Predict(false), false, &cfg, &c), 1.0);
        assert_eq!(reward(Action::Predict(true), false, &cfg, &c), 0.0);
        assert_eq!(reward(Action::Predict(false), true, &cfg, &c), 0.0);
        let hours = RewardConfig { cost_unit: CostUnit::Hours, ..cfg };
        assert!((reward(Action::Order(groups::CHEM), true, &hours, &c) + 0.01).abs() < 1e-12);
        assert!(RewardConfig::with(-1.0, 0.0).validate().is_err());
    }
}
