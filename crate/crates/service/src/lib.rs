//! HTTP front end for the admission engine.
//!
//! Endpoints carry no authentication; identity is expected to be handled by
//! the surrounding deployment.

pub mod cli;

use acp_admission::contract::{process, ProcessError, UpdateOrdering};
use acp_admission::ledger::{record_outcome, write_event, EventType, LedgerChain, LedgerError, LedgerEvent, SigningKey};
use acp_admission::policy::{Capability, ContextFlag, HistoryFlag, PolicyConfig, ResourceClass};
use acp_admission::risk::{Decision, EvalRequest, EvalResult, FactorBreakdown, Rule};
use acp_admission::store::TraceStore;
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

/// Ledger plus the optional file it is mirrored to.
struct LedgerSink {
    chain: LedgerChain,
    file: Option<File>,
    persisted: usize,
}

impl LedgerSink {
    /// Starts an empty chain with its GENESIS event.
    fn ensure_genesis(&mut self, key: Option<&SigningKey>) -> Result<(), LedgerError> {
        if self.chain.is_empty() {
            self.chain.append_with_id("evt-000000", EventType::Genesis, now_s(), json!({}), key)?;
            self.flush_new()?;
        }
        Ok(())
    }

    fn flush_new(&mut self) -> Result<(), LedgerError> {
        if let Some(f) = &mut self.file {
            for e in &self.chain.events()[self.persisted..] {
                write_event(&mut *f, e)?;
            }
            f.flush()?;
        }
        self.persisted = self.chain.len();
        Ok(())
    }
}

pub struct AppState {
    policy: PolicyConfig,
    store: Arc<dyn TraceStore>,
    ordering: UpdateOrdering,
    signing_key: Option<SigningKey>,
    ledger: Mutex<LedgerSink>,
}

impl AppState {
    pub fn new(policy: PolicyConfig, store: Arc<dyn TraceStore>, ordering: UpdateOrdering) -> Self {
        Self {
            policy,
            store,
            ordering,
            signing_key: None,
            ledger: Mutex::new(LedgerSink { chain: LedgerChain::new(), file: None, persisted: 0 }),
        }
    }

    pub fn with_signing_key(mut self, key: SigningKey) -> Self {
        self.signing_key = Some(key);
        self
    }

    /// Mirrors the ledger to an NDJSON file. An existing file is loaded and
    /// must verify; new events are appended to it.
    pub fn with_ledger_file(self, path: &Path) -> anyhow::Result<Self> {
        let chain = if path.exists() {
            let events = acp_admission::ledger::read_ndjson(BufReader::new(File::open(path)?))?;
            let key = self.signing_key.as_ref().map(|k| k.verifying_key());
            let verdict = acp_admission::ledger::verify_chain(&events, key.as_ref());
            anyhow::ensure!(verdict.is_ok(), "existing ledger {} fails verification: {verdict:?}", path.display());
            LedgerChain::from_events(events)
        } else {
            LedgerChain::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        {
            let mut sink = self.ledger.lock().expect("ledger lock");
            sink.persisted = chain.len();
            sink.chain = chain;
            sink.file = Some(file);
            sink.ensure_genesis(self.signing_key.as_ref())?;
        }
        Ok(self)
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn ledger_events(&self) -> Vec<LedgerEvent> {
        self.ledger.lock().map(|s| s.chain.events().to_vec()).unwrap_or_default()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/acp/v1/admission", post(admission))
        .route("/admission", post(admission))
        .route("/acp/v1/conformance", get(conformance))
        .route("/acp/v1/audit/query", get(audit_query))
        .route("/health", get(health))
        .with_state(state)
}

fn now_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Admission request body. `timestamp` defaults to the server clock.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionRequestWire {
    pub agent_id: String,
    pub capability: Capability,
    pub resource: String,
    pub resource_class: ResourceClass,
    pub autonomy_level: u8,
    #[serde(default)]
    pub context_flags: BTreeSet<ContextFlag>,
    #[serde(default)]
    pub history_flags: BTreeSet<HistoryFlag>,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

impl AdmissionRequestWire {
    fn into_request(self) -> EvalRequest {
        EvalRequest {
            agent_id: self.agent_id,
            capability: self.capability,
            resource: self.resource,
            resource_class: self.resource_class,
            autonomy_level: self.autonomy_level,
            context_flags: self.context_flags,
            history_flags: self.history_flags,
            timestamp: self.timestamp.unwrap_or_else(now_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factors {
    pub base: u32,
    pub f_res: u32,
    pub f_ctx: u32,
    pub f_hist: u32,
    pub f_anom: u32,
    pub rules_fired: Vec<Rule>,
}

impl From<&FactorBreakdown> for Factors {
    fn from(b: &FactorBreakdown) -> Self {
        Self { base: b.base, f_res: b.f_res, f_ctx: b.f_ctx, f_hist: b.f_hist, f_anom: b.f_anom, rules_fired: b.rules_fired.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionResponseWire {
    pub decision: Decision,
    pub risk_score: u32,
    pub factors: Factors,
    pub reason: String,
    pub policy_hash: String,
    pub ledger_index: Option<usize>,
}

impl AdmissionResponseWire {
    fn new(r: &EvalResult, ledger_index: Option<usize>) -> Self {
        Self {
            decision: r.decision,
            risk_score: r.rs_final,
            factors: (&r.breakdown).into(),
            reason: r.reason.clone(),
            policy_hash: r.policy_hash.clone(),
            ledger_index,
        }
    }
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": code, "message": message.into()}))).into_response()
}

async fn admission(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let wire: AdmissionRequestWire = match serde_json::from_slice(&body) {
        Ok(w) => w,
        Err(e) => return error(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
    };
    let req = wire.into_request();

    let (result, mut status) = match process(&req, &*state.store, &state.policy, state.ordering) {
        Ok(out) => (Ok(out), StatusCode::OK),
        Err(ProcessError::Invalid(e)) => return error(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
        Err(ProcessError::Store(e)) => {
            tracing::error!(error = %e, agent = %req.agent_id, "store failure, failing closed");
            (Err(()), StatusCode::SERVICE_UNAVAILABLE)
        }
    };
    let outcome = result.unwrap_or_else(|()| acp_admission::contract::StepOutcome {
        result: EvalResult::fail_closed(&state.policy),
        cooldown_entered: false,
    });

    let ledger_index = match state.ledger.lock() {
        Ok(mut sink) => {
            let appended = sink.ensure_genesis(state.signing_key.as_ref()).and_then(|()| record_outcome(&mut sink.chain, &outcome, &req, state.signing_key.as_ref()));
            match appended.and_then(|i| sink.flush_new().map(|()| i)) {
                Ok(i) => Some(i),
                Err(e) => {
                    tracing::error!(error = %e, "ledger append failed, failing closed");
                    None
                }
            }
        }
        Err(_) => None,
    };
    if ledger_index.is_none() {
        status = StatusCode::INTERNAL_SERVER_ERROR;
        let r = EvalResult::fail_closed(&state.policy);
        return (status, Json(AdmissionResponseWire::new(&r, None))).into_response();
    }
    tracing::info!(
        agent = %req.agent_id,
        decision = %outcome.result.decision,
        rs = outcome.result.rs_final,
        cooldown_entered = outcome.cooldown_entered,
        "admission"
    );
    (status, Json(AdmissionResponseWire::new(&outcome.result, ledger_index))).into_response()
}

/// Documents this server implements, as reported by the conformance endpoint.
pub const IMPLEMENTED: [&str; 5] = [
    "risk-engine/RISK_2_0",
    "risk-engine/RISK_3_0",
    "trace-state/cooldown",
    "audit-ledger/sha256-chain+ed25519",
    "conformance/sequence-vectors",
];

async fn conformance(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "implemented": IMPLEMENTED,
        "engine_version": state.policy.engine_version,
        "policy_hash": state.policy.policy_hash(),
        "ordering": state.ordering,
        "ledger_signed": state.signing_key.is_some(),
        "authentication": "none",
        "declaration_date": time::OffsetDateTime::now_utc().date().to_string(),
    }))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    from: Option<usize>,
    to: Option<usize>,
}

async fn audit_query(State(state): State<Arc<AppState>>, Query(q): Query<RangeQuery>) -> Response {
    let Ok(mut sink) = state.ledger.lock() else {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "ledger_unavailable", "ledger lock poisoned");
    };
    if let Err(e) = sink.ensure_genesis(state.signing_key.as_ref()) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "ledger_unavailable", e.to_string());
    }
    let events = sink.chain.events();
    let (from, to) = (q.from.unwrap_or(0), q.to.unwrap_or(events.len()));
    if from > to || to > events.len() {
        return error(
            StatusCode::BAD_REQUEST,
            "out_of_range",
            format!("need 0 <= from <= to <= {}, got from={from} to={to}", events.len()),
        );
    }
    Json(&events[from..to]).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    if let Err(e) = state.store.cooldown_active("__health__", now_s()) {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "degraded", "component": "store", "error": e.to_string()})))
            .into_response();
    }
    if state.ledger.lock().is_err() {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "degraded", "component": "ledger"}))).into_response();
    }
    Json(json!({"status": "ok"})).into_response()
}
