use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use edcopilot::domain::{
    GroupId, LabCatalog, LabResult, OutcomeTask, PatientRecord, TriageRecord, CHIEF_COMPLAINTS, NUM_TRIAGE_FEATURES,
    TRIAGE_FEATURES,
};
use edcopilot::encoder::EncoderCache;
use edcopilot::rl::{env_reset, env_step, legal_actions, Action, ActionMode, EnvState};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::registry::{ModelEntry, Registry};
use crate::{ApiError, FieldError, ServiceError};

/// Seconds since the Unix epoch; injectable so expiry can be tested.
pub trait Clock: Send + Sync {
    fn now_secs(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_secs(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock(AtomicU64::new(start))
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_secs(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    /// Sessions idle for longer than this expire.
    pub idle_minutes: u64,
    /// One append-only request log per session; `None` disables logging.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            idle_minutes: 60,
            log_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Diagnosed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionView {
    Order { group_id: u8, group: String, cost_minutes: u32 },
    Predict { positive: bool },
}

impl ActionView {
    fn new(a: Action, catalog: &LabCatalog) -> Self {
        match a {
            Action::Order(g) => ActionView::Order {
                group_id: g.0,
                group: catalog.groups[g.index()].short_name.clone(),
                cost_minutes: catalog.cost(g),
            },
            Action::Predict(p) => ActionView::Predict { positive: p },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub action: ActionView,
    pub probability: f64,
}

/// Ranked legal actions at the current state, with the outcome probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub step: usize,
    pub ranked: Vec<RankedAction>,
    pub top_action: ActionView,
    pub top_probability: f64,
    pub outcome_probability: f64,
    pub accrued_cost: u32,
    pub remaining_budget: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub group_id: u8,
    pub group: String,
    pub cost_minutes: u32,
    pub accrued_cost: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub prediction: bool,
    pub probability: f64,
    pub accrued_cost: u32,
    pub trace: Vec<TraceStep>,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub task: OutcomeTask,
    pub record: PatientRecord,
    pub state: EnvState,
    pub budget: Option<u32>,
    pub history: Vec<Suggestion>,
    pub trace: Vec<TraceStep>,
    pub created_at: u64,
    pub updated_at: u64,
    pub status: SessionStatus,
    pub diagnosis: Option<Diagnosis>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub task: OutcomeTask,
    pub status: SessionStatus,
    pub triage: TriageRecord,
    pub budget_minutes: Option<u32>,
    pub accrued_cost: u32,
    pub trace: Vec<TraceStep>,
    pub history: Vec<Suggestion>,
    pub diagnosis: Option<Diagnosis>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Created {
    pub session_id: String,
    pub suggestion: Suggestion,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Updated {
    pub suggestion: Suggestion,
}

/// Hidden state of the frozen encoder at the record's last group block.
fn hidden_state(model: &ModelEntry, record: &PatientRecord) -> Result<Vec<f32>, ServiceError> {
    let vocab = &model.encoder.vocab;
    let mut cache = EncoderCache::new(&model.encoder);
    cache.extend(&vocab.triage_block(&record.triage)?)?;
    for r in &record.observed {
        cache.extend(&vocab.group_block(r)?)?;
    }
    Ok(cache.last_hidden().to_vec())
}

fn softmax_over(logits: &[f32], mask: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(&l, _)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &ok)| if ok { (l as f64 - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn suggest(model: &ModelEntry, s: &Session) -> Result<Suggestion, ServiceError> {
    let catalog = &model.catalog;
    let hidden = hidden_state(model, &s.record)?;
    let mask = legal_actions(&s.state, &[], ActionMode::Unrestricted, catalog);
    let probs = softmax_over(&model.policy.logits(&hidden), &mask);
    let k = catalog.num_groups();
    let mut ranked: Vec<(usize, f64)> = (0..mask.len()).filter(|&i| mask[i]).map(|i| (i, probs[i])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let view = |i: usize| ActionView::new(Action::from_index(i, k).expect("valid action index"), catalog);
    let (top, top_p) = ranked[0];
    Ok(Suggestion {
        step: s.history.len(),
        ranked: ranked
            .iter()
            .map(|&(i, p)| RankedAction {
                action: view(i),
                probability: p,
            })
            .collect(),
        top_action: view(top),
        top_probability: top_p,
        outcome_probability: model.encoder.outcome_prob(&hidden) as f64,
        accrued_cost: s.state.accrued_cost,
        remaining_budget: s.budget.map(|b| b.saturating_sub(s.state.accrued_cost)),
    })
}

fn field(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

fn parse_body(body: &[u8]) -> Result<serde_json::Map<String, Value>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(serde_json::Map::new());
    }
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::unprocessable(vec![field("$", "expected a JSON object")])),
        Err(e) => Err(ApiError::unprocessable(vec![field("$", format!("invalid JSON: {e}"))])),
    }
}

struct CreateRequest {
    task: OutcomeTask,
    triage: TriageRecord,
    budget: Option<u32>,
}

fn parse_triage(v: Option<&Value>, errors: &mut Vec<FieldError>) -> Option<TriageRecord> {
    let Some(obj) = v.and_then(Value::as_object) else {
        errors.push(field("triage", "required object with `values` and `chief_complaint`"));
        return None;
    };
    let mut values = [0.0; NUM_TRIAGE_FEATURES];
    match obj.get("values").and_then(Value::as_array) {
        None => errors.push(field("triage.values", format!("required array of {NUM_TRIAGE_FEATURES} numbers"))),
        Some(arr) => {
            for (i, name) in TRIAGE_FEATURES.iter().enumerate() {
                match arr.get(i).map(Value::as_f64) {
                    None => errors.push(field(format!("triage.values[{i}]"), format!("missing {name}"))),
                    Some(None) => errors.push(field(format!("triage.values[{i}]"), format!("{name} must be a number"))),
                    Some(Some(x)) => values[i] = x,
                }
            }
            if arr.len() > NUM_TRIAGE_FEATURES {
                errors.push(field(
                    "triage.values",
                    format!("expected {NUM_TRIAGE_FEATURES} values, got {}", arr.len()),
                ));
            }
        }
    }
    let cc = match obj.get("chief_complaint") {
        Some(Value::Number(n)) => n.as_u64().filter(|&c| (c as usize) < CHIEF_COMPLAINTS.len()).map(|c| c as u8),
        Some(Value::String(s)) => CHIEF_COMPLAINTS.iter().position(|c| c == s).map(|c| c as u8),
        _ => None,
    };
    if cc.is_none() {
        errors.push(field(
            "triage.chief_complaint",
            format!("expected an index below {} or one of {CHIEF_COMPLAINTS:?}", CHIEF_COMPLAINTS.len()),
        ));
    }
    let triage = TriageRecord {
        values,
        chief_complaint: cc.unwrap_or(0),
    };
    if errors.is_empty() {
        if let Err(e) = triage.validate() {
            errors.push(field("triage", e.to_string()));
        }
    }
    Some(triage)
}

fn parse_create(body: &[u8]) -> Result<CreateRequest, ApiError> {
    let m = parse_body(body)?;
    let mut errors = Vec::new();
    let task = match m.get("task").and_then(Value::as_str).map(OutcomeTask::parse) {
        Some(Some(t)) => Some(t),
        Some(None) => {
            errors.push(field("task", "expected critical_outcome or lengthened_stay"));
            None
        }
        None => {
            errors.push(field("task", "required string"));
            None
        }
    };
    let triage = parse_triage(m.get("triage"), &mut errors);
    let budget = match m.get("budget_minutes") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_u64().and_then(|b| u32::try_from(b).ok()) {
            Some(b) => Some(b),
            None => {
                errors.push(field("budget_minutes", "expected a non-negative integer"));
                None
            }
        },
    };
    for k in m.keys() {
        if !["task", "triage", "budget_minutes"].contains(&k.as_str()) {
            errors.push(field(k.clone(), "unknown field"));
        }
    }
    match (task, triage) {
        (Some(task), Some(triage)) if errors.is_empty() => Ok(CreateRequest { task, triage, budget }),
        _ => Err(ApiError::unprocessable(errors)),
    }
}

fn parse_results(body: &[u8], catalog: &LabCatalog) -> Result<LabResult, ApiError> {
    let m = parse_body(body)?;
    let mut errors = Vec::new();
    let group = match m.get("group_id") {
        Some(Value::Number(n)) => n
            .as_u64()
            .filter(|&g| (g as usize) < catalog.num_groups())
            .map(|g| GroupId(g as u8)),
        Some(Value::String(s)) => catalog.group_by_short_name(s).map(|g| g.id),
        _ => None,
    };
    if group.is_none() {
        errors.push(field("group_id", "expected a catalog group index or short name"));
    }
    let values: Option<Vec<f64>> = m
        .get("values")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect());
    if values.is_none() {
        errors.push(field("values", "required array of numbers"));
    }
    if let (Some(g), Some(v)) = (group, &values) {
        let n = catalog.groups[g.index()].tests.len();
        if v.len() != n {
            errors.push(field(
                "values",
                format!("{} has {n} tests, got {} values", catalog.groups[g.index()].short_name, v.len()),
            ));
        }
    }
    match (group, values) {
        (Some(group_id), Some(values)) if errors.is_empty() => {
            let r = LabResult { group_id, values };
            r.validate(catalog)
                .map_err(|e| ApiError::unprocessable(vec![field("values", e.to_string())]))?;
            Ok(r)
        }
        _ => Err(ApiError::unprocessable(errors)),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    op: String,
    request: Value,
    response: String,
}

/// Shared service state: frozen models, live sessions and the clock.
pub struct AppState {
    pub registry: RwLock<Registry>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    pub clock: Arc<dyn Clock>,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(registry: Registry, config: ServiceConfig, clock: Arc<dyn Clock>) -> Self {
        AppState {
            registry: RwLock::new(registry),
            sessions: RwLock::new(HashMap::new()),
            clock,
            config,
        }
    }

    fn model(&self, task: OutcomeTask) -> Result<Arc<ModelEntry>, ApiError> {
        self.registry
            .read()
            .get(task)
            .ok_or_else(|| ApiError::unavailable(format!("no model loaded for {}", task.as_str())))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    fn idle_limit(&self) -> u64 {
        self.config.idle_minutes.saturating_mul(60)
    }

    fn effective_status(&self, s: &Session) -> SessionStatus {
        if s.status == SessionStatus::Active && self.clock.now_secs().saturating_sub(s.updated_at) > self.idle_limit() {
            SessionStatus::Expired
        } else {
            s.status
        }
    }

    /// Marks an idle session expired and rejects mutations of inactive ones.
    fn require_active(&self, s: &mut Session) -> Result<(), ApiError> {
        s.status = self.effective_status(s);
        match s.status {
            SessionStatus::Active => Ok(()),
            other => Err(ApiError::conflict(format!("session is {other:?}").to_lowercase())),
        }
    }

    fn log(&self, id: &str, op: &str, request: &[u8], response: &str) {
        let Some(dir) = &self.config.log_dir else {
            return;
        };
        let request = serde_json::from_slice(request).unwrap_or(Value::Null);
        let line = LogLine {
            op: op.into(),
            request,
            response: response.into(),
        };
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(dir)?;
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{id}.jsonl")))?;
            writeln!(f, "{}", serde_json::to_string(&line).map_err(std::io::Error::other)?)
        };
        if let Err(e) = write() {
            log::warn!("request log for session {id}: {e}");
        }
    }

    pub fn create_session(&self, body: &[u8]) -> Result<Created, ApiError> {
        let req = parse_create(body)?;
        let model = self.model(req.task)?;
        let now = self.clock.now_secs();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let record = PatientRecord {
            id: id.clone(),
            triage: req.triage,
            observed: Vec::new(),
            y_critical: false,
            y_los: false,
            latent_state: None,
        };
        let mut session = Session {
            id: id.clone(),
            task: req.task,
            state: env_reset(&record, req.budget),
            record,
            budget: req.budget,
            history: Vec::new(),
            trace: Vec::new(),
            created_at: now,
            updated_at: now,
            status: SessionStatus::Active,
            diagnosis: None,
        };
        let suggestion = suggest(&model, &session)?;
        session.history.push(suggestion.clone());
        self.sessions.write().insert(id.clone(), Arc::new(Mutex::new(session)));
        self.log(&id, "create", body, &serde_json::to_string(&suggestion).expect("suggestion serializes"));
        Ok(Created {
            session_id: id,
            suggestion,
        })
    }

    pub fn submit_results(&self, id: &str, body: &[u8]) -> Result<Updated, ApiError> {
        let handle = self.session(id)?;
        let mut s = handle.lock();
        self.require_active(&mut s)?;
        let model = self.model(s.task)?;
        let result = parse_results(body, &model.catalog)?;
        let g = result.group_id;
        let catalog = &model.catalog;
        if s.state.has_acquired(g) {
            return Err(ApiError::conflict(format!(
                "{} was already submitted",
                catalog.groups[g.index()].short_name
            )));
        }
        let mask = legal_actions(&s.state, &[], ActionMode::Unrestricted, catalog);
        if !mask[g.index()] {
            return Err(ApiError::conflict(format!(
                "{} exceeds the remaining budget",
                catalog.groups[g.index()].short_name
            )));
        }
        let mut next = s.clone();
        next.record.observed.push(result);
        env_step(&mut next.state, &next.record, Action::Order(g), ActionMode::Unrestricted, catalog)
            .map_err(|e| ApiError::conflict(e.to_string()))?;
        next.trace.push(TraceStep {
            group_id: g.0,
            group: catalog.groups[g.index()].short_name.clone(),
            cost_minutes: catalog.cost(g),
            accrued_cost: next.state.accrued_cost,
        });
        let suggestion = suggest(&model, &next)?;
        next.history.push(suggestion.clone());
        next.updated_at = self.clock.now_secs();
        *s = next;
        self.log(id, "results", body, &serde_json::to_string(&suggestion).expect("suggestion serializes"));
        Ok(Updated { suggestion })
    }

    pub fn diagnose(&self, id: &str, body: &[u8]) -> Result<Diagnosis, ApiError> {
        let handle = self.session(id)?;
        let mut s = handle.lock();
        self.require_active(&mut s)?;
        parse_body(body)?;
        let model = self.model(s.task)?;
        let current = s.history.last().cloned().ok_or_else(|| ApiError::conflict("session has no state"))?;
        let prediction = match current.top_action {
            ActionView::Predict { positive } => positive,
            ActionView::Order { .. } => current.outcome_probability >= 0.5,
        };
        let record = s.record.clone();
        env_step(&mut s.state, &record, Action::Predict(prediction), ActionMode::Unrestricted, &model.catalog)
            .map_err(|e| ApiError::conflict(e.to_string()))?;
        let d = Diagnosis {
            prediction,
            probability: current.outcome_probability,
            accrued_cost: s.state.accrued_cost,
            trace: s.trace.clone(),
            suggestions: s.history.clone(),
        };
        s.status = SessionStatus::Diagnosed;
        s.diagnosis = Some(d.clone());
        s.updated_at = self.clock.now_secs();
        self.log(id, "diagnose", body, &serde_json::to_string(&d).expect("diagnosis serializes"));
        Ok(d)
    }

    pub fn snapshot(&self, id: &str) -> Result<SessionSnapshot, ApiError> {
        let handle = self.session(id)?;
        let s = handle.lock();
        Ok(SessionSnapshot {
            session_id: s.id.clone(),
            task: s.task,
            status: self.effective_status(&s),
            triage: s.record.triage.clone(),
            budget_minutes: s.budget,
            accrued_cost: s.state.accrued_cost,
            trace: s.trace.clone(),
            history: s.history.clone(),
            diagnosis: s.diagnosis.clone(),
            created_at: s.created_at,
            updated_at: s.updated_at,
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    /// Re-executes a session's request log against the loaded models and
    /// compares every response byte for byte.
    pub fn replay(&self, log_path: &Path) -> Result<ReplayReport, ServiceError> {
        let file = std::fs::File::open(log_path)?;
        let mut id = None;
        let mut report = ReplayReport::default();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogLine = serde_json::from_str(&line).map_err(|e| ServiceError::Replay(e.to_string()))?;
            let body = serde_json::to_vec(&entry.request).map_err(|e| ServiceError::Replay(e.to_string()))?;
            let replay = |r: Result<String, ApiError>| r.map_err(|e| ServiceError::Replay(e.message()));
            let got = match (entry.op.as_str(), &id) {
                ("create", None) => replay(self.create_session(&body).map(|c| {
                    id = Some(c.session_id);
                    serde_json::to_string(&c.suggestion).expect("suggestion serializes")
                }))?,
                ("results", Some(sid)) => replay(
                    self.submit_results(sid, &body)
                        .map(|u| serde_json::to_string(&u.suggestion).expect("suggestion serializes")),
                )?,
                ("diagnose", Some(sid)) => {
                    replay(self.diagnose(sid, &body).map(|d| serde_json::to_string(&d).expect("diagnosis serializes")))?
                }
                (op, _) => return Err(ServiceError::Replay(format!("unexpected {op} entry"))),
            };
            report.steps += 1;
            if got.as_bytes() == entry.response.as_bytes() {
                report.identical += 1;
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub steps: usize,
    pub identical: usize,
}

impl ReplayReport {
    pub fn byte_identical(&self) -> bool {
        self.steps > 0 && self.steps == self.identical
    }
}
