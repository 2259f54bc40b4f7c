//! Hash-chained, optionally signed record of admission decisions.
//!
//! Each event hash is `SHA-256(canonical(event - {hash, signature}) || prev_hash)`
//! where `prev_hash` is appended as its 64 ASCII hex characters. Signatures are
//! Ed25519 over `SHA-256(canonical(event - {signature}))`, base64url without
//! padding, so signing is optional and never affects the chain.

use crate::canonical::{canonical_bytes, CanonicalError};
use crate::contract::StepOutcome;
use crate::risk::EvalRequest;
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use ed25519_dalek::{Signature, Signer, Verifier};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};

pub use ed25519_dalek::{SigningKey, VerifyingKey};

pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("event payload must be a JSON object")]
    PayloadNotObject,
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventType {
    Genesis,
    Authorization,
    RiskEvaluation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEvent {
    pub event_id: String,
    pub event_type: EventType,
    pub timestamp: u64,
    pub payload: Value,
    pub prev_hash: String,
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
}

impl LedgerEvent {
    fn body(&self) -> Value {
        json!({
            "event_id": self.event_id,
            "event_type": self.event_type,
            "timestamp": self.timestamp,
            "payload": self.payload,
            "prev_hash": self.prev_hash,
        })
    }

    /// Recomputes the chain hash from the event's own fields.
    pub fn compute_hash(&self) -> Result<String, LedgerError> {
        let mut h = Sha256::new();
        h.update(canonical_bytes(&self.body())?);
        h.update(self.prev_hash.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Digest covered by the signature: every field except `signature`.
    pub fn signing_digest(&self) -> Result<[u8; 32], LedgerError> {
        let mut v = self.body();
        v["hash"] = Value::String(self.hash.clone());
        Ok(Sha256::digest(canonical_bytes(&v)?).into())
    }

    fn sign(&mut self, key: &SigningKey) -> Result<(), LedgerError> {
        let sig = key.sign(&self.signing_digest()?);
        self.signature = Some(URL_SAFE_NO_PAD.encode(sig.to_bytes()));
        Ok(())
    }

    pub fn verify_signature(&self, key: &VerifyingKey) -> bool {
        let Some(encoded) = &self.signature else { return false };
        let Ok(bytes) = URL_SAFE_NO_PAD.decode(encoded) else { return false };
        let Ok(sig) = Signature::from_slice(&bytes) else { return false };
        match self.signing_digest() {
            Ok(d) => key.verify(&d, &sig).is_ok(),
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Broken { broken_at: usize, reason: String },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn broken_at(&self) -> Option<usize> {
        match self {
            Verdict::Ok => None,
            Verdict::Broken { broken_at, .. } => Some(*broken_at),
        }
    }

    fn broken(at: usize, reason: impl Into<String>) -> Self {
        Verdict::Broken { broken_at: at, reason: reason.into() }
    }
}

/// Expected end of a chain, held outside it. Truncating the tail of a hash
/// chain leaves a valid chain, so only a witness like this can detect it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHead {
    pub len: usize,
    pub hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerChain {
    events: Vec<LedgerEvent>,
}

impl LedgerChain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps events read from storage. Call [`verify_chain`] before trusting them.
    pub fn from_events(events: Vec<LedgerEvent>) -> Self {
        Self { events }
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<LedgerEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn head(&self) -> Option<ChainHead> {
        self.events.last().map(|e| ChainHead { len: self.events.len(), hash: e.hash.clone() })
    }

    pub fn last_hash(&self) -> &str {
        self.events.last().map_or(ZERO_HASH, |e| e.hash.as_str())
    }

    /// Appends an event with a sequential id (`evt-000001`, ...). An empty
    /// chain first receives a GENESIS event. Returns the new event's index.
    pub fn append(
        &mut self,
        event_type: EventType,
        timestamp: u64,
        payload: Value,
        key: Option<&SigningKey>,
    ) -> Result<usize, LedgerError> {
        let id = format!("evt-{:06}", self.events.len().max(1));
        self.append_with_id(id, event_type, timestamp, payload, key)
    }

    pub fn append_with_id(
        &mut self,
        event_id: impl Into<String>,
        event_type: EventType,
        timestamp: u64,
        payload: Value,
        key: Option<&SigningKey>,
    ) -> Result<usize, LedgerError> {
        if !payload.is_object() {
            return Err(LedgerError::PayloadNotObject);
        }
        if self.events.is_empty() && event_type != EventType::Genesis {
            self.push("evt-000000".into(), EventType::Genesis, timestamp, Value::Object(Map::new()), key)?;
        }
        self.push(event_id.into(), event_type, timestamp, payload, key)
    }

    fn push(
        &mut self,
        event_id: String,
        event_type: EventType,
        timestamp: u64,
        payload: Value,
        key: Option<&SigningKey>,
    ) -> Result<usize, LedgerError> {
        let mut event = LedgerEvent {
            event_id,
            event_type,
            timestamp,
            payload,
            prev_hash: self.last_hash().to_string(),
            hash: String::new(),
            signature: None,
        };
        event.hash = event.compute_hash()?;
        if let Some(k) = key {
            event.sign(k)?;
        }
        self.events.push(event);
        Ok(self.events.len() - 1)
    }

    /// Writes the chain as newline-delimited JSON.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), LedgerError> {
        for e in &self.events {
            write_event(&mut w, e)?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, LedgerError> {
        read_ndjson(r).map(Self::from_events)
    }
}

pub fn write_event<W: Write>(mut w: W, event: &LedgerEvent) -> Result<(), LedgerError> {
    serde_json::to_writer(&mut w, event).map_err(|e| LedgerError::Parse { line: 0, source: e })?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parses newline-delimited events; blank lines are skipped.
pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<LedgerEvent>, LedgerError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LedgerError::Parse { line: i + 1, source: e })?);
    }
    Ok(out)
}

/// Checks a full chain from GENESIS. Signatures are checked when `key` is given.
pub fn verify_chain(events: &[LedgerEvent], key: Option<&VerifyingKey>) -> Verdict {
    if let Some(first) = events.first() {
        if first.event_type != EventType::Genesis {
            return Verdict::broken(0, "first event is not GENESIS");
        }
    }
    verify_segment(events, ZERO_HASH, 0, key)
}

/// Checks a contiguous slice whose first element must link to `anchor`
/// (the hash of the event before it, or [`ZERO_HASH`] at the start).
/// Reported indices are offset by `first_index`.
pub fn verify_segment(events: &[LedgerEvent], anchor: &str, first_index: usize, key: Option<&VerifyingKey>) -> Verdict {
    let structural = check_links(events, anchor, first_index);
    let Some(key) = key else { return structural };
    let checked = structural.broken_at().map_or(events.len(), |b| b - first_index);
    match first_bad_signature(&events[..checked], key) {
        Some(i) => Verdict::broken(first_index + i, "missing or invalid signature"),
        None => structural,
    }
}

fn check_links(events: &[LedgerEvent], anchor: &str, first_index: usize) -> Verdict {
    let mut prev = anchor;
    for (i, e) in events.iter().enumerate() {
        let at = first_index + i;
        let is_start = at == 0;
        if is_start != (e.event_type == EventType::Genesis) {
            return Verdict::broken(at, "GENESIS must appear exactly once, at index 0");
        }
        if is_start != (e.prev_hash == ZERO_HASH) {
            return Verdict::broken(at, "zero prev_hash is reserved for GENESIS");
        }
        if e.prev_hash != prev {
            return Verdict::broken(at, "prev_hash does not match previous event");
        }
        match e.compute_hash() {
            Ok(h) if h == e.hash => {}
            Ok(_) => return Verdict::broken(at, "hash mismatch"),
            Err(err) => return Verdict::broken(at, format!("cannot canonicalize event: {err}")),
        }
        prev = &e.hash;
    }
    Verdict::Ok
}

/// Index of the first event whose signature is missing or invalid. Verifies
/// in one batch and only falls back to per-event checks to locate a failure.
fn first_bad_signature(events: &[LedgerEvent], key: &VerifyingKey) -> Option<usize> {
    let mut digests = Vec::with_capacity(events.len());
    let mut sigs = Vec::with_capacity(events.len());
    for e in events {
        let parsed = e.signature.as_deref().and_then(|s| URL_SAFE_NO_PAD.decode(s).ok()).and_then(|b| Signature::from_slice(&b).ok());
        match (parsed, e.signing_digest()) {
            (Some(sig), Ok(d)) => {
                sigs.push(sig);
                digests.push(d);
            }
            _ => break,
        }
    }
    let messages: Vec<&[u8]> = digests.iter().map(|d| &d[..]).collect();
    let keys = vec![*key; sigs.len()];
    if ed25519_dalek::verify_batch(&messages, &sigs, &keys).is_ok() {
        return (sigs.len() < events.len()).then_some(sigs.len());
    }
    (0..sigs.len()).find(|&i| key.verify(messages[i], &sigs[i]).is_err())
}

/// [`verify_chain`] plus a comparison against an externally held head.
pub fn verify_chain_against_head(events: &[LedgerEvent], key: Option<&VerifyingKey>, head: &ChainHead) -> Verdict {
    let v = verify_chain(events, key);
    if !v.is_ok() {
        return v;
    }
    if events.len() < head.len {
        return Verdict::broken(events.len(), format!("chain truncated: {} of {} events", events.len(), head.len));
    }
    if events[head.len - 1].hash != head.hash {
        return Verdict::broken(head.len - 1, "head hash mismatch");
    }
    Verdict::Ok
}

/// Ledger payload for one processed request.
pub fn outcome_payload(outcome: &StepOutcome, req: &EvalRequest) -> Value {
    let r = &outcome.result;
    json!({
        "agent_id": req.agent_id,
        "capability": req.capability.as_str(),
        "resource": req.resource,
        "resource_class": req.resource_class,
        "autonomy_level": req.autonomy_level,
        "decision": r.decision,
        "rs_final": r.rs_final,
        "breakdown": r.breakdown,
        "reason": r.reason,
        "policy_hash": r.policy_hash,
        "cooldown_entered": outcome.cooldown_entered,
    })
}

/// Appends one AUTHORIZATION event for a processed request. Returns its index.
pub fn record_outcome(
    chain: &mut LedgerChain,
    outcome: &StepOutcome,
    req: &EvalRequest,
    key: Option<&SigningKey>,
) -> Result<usize, LedgerError> {
    chain.append(EventType::Authorization, req.timestamp, outcome_payload(outcome, req), key)
}
