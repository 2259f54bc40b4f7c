//! The deterministic risk function.
//!
//! `RS = min(100, base + f_res + f_ctx + f_hist + f_anom)`, all integer.
//! Evaluation reads state through [`TraceStore`] but never writes it; state
//! updates are sequenced by [`crate::contract::process`].

use crate::canonical::sha256_hex;
use crate::policy::{lookup_base, Capability, ContextFlag, EngineVersion, HistoryFlag, PolicyConfig, ResourceClass};
use crate::store::{StoreError, Timestamp, TraceStore};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

pub const RS_MAX: u32 = 100;
pub const RULE1_BONUS: u32 = 20;
pub const RULE2_BONUS: u32 = 15;
pub const RULE3_BONUS: u32 = 15;

pub const REASON_FAIL_CLOSED: &str = "fail-closed";
pub const REASON_COOLDOWN: &str = "cooldown active";
pub const REASON_AUTONOMY_ZERO: &str = "autonomy level 0 is never approved";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("autonomy_level {0} is outside 0..=4")]
    AutonomyLevel(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid request: {0}")]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One admission attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub agent_id: String,
    pub capability: Capability,
    pub resource: String,
    pub resource_class: ResourceClass,
    pub autonomy_level: u8,
    #[serde(default)]
    pub context_flags: BTreeSet<ContextFlag>,
    #[serde(default)]
    pub history_flags: BTreeSet<HistoryFlag>,
    pub timestamp: Timestamp,
}

impl EvalRequest {
    /// Request at autonomy level 2 with no context or history flags.
    pub fn new(
        agent_id: impl Into<String>,
        capability: Capability,
        resource: impl Into<String>,
        resource_class: ResourceClass,
        timestamp: Timestamp,
    ) -> Self {
        Self {
            agent_id: agent_id.into(),
            capability,
            resource: resource.into(),
            resource_class,
            autonomy_level: 2,
            context_flags: BTreeSet::new(),
            history_flags: BTreeSet::new(),
            timestamp,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.agent_id.is_empty() {
            return Err(ValidationError::Empty("agent_id"));
        }
        if self.resource.is_empty() {
            return Err(ValidationError::Empty("resource"));
        }
        if self.autonomy_level > 4 {
            return Err(ValidationError::AutonomyLevel(self.autonomy_level));
        }
        Ok(())
    }

    pub fn pattern_key(&self) -> Result<PatternKey, ValidationError> {
        pattern_key(&self.agent_id, &self.capability, &self.resource)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Approved,
    Escalated,
    Denied,
    CooldownActive,
}

impl Decision {
    pub const ALL: [Decision; 4] = [Decision::Approved, Decision::Escalated, Decision::Denied, Decision::CooldownActive];

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Approved => "APPROVED",
            Decision::Escalated => "ESCALATED",
            Decision::Denied => "DENIED",
            Decision::CooldownActive => "COOLDOWN_ACTIVE",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Decision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Decision::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown decision {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "RULE1")]
    HighRate,
    #[serde(rename = "RULE2")]
    DenialHistory,
    #[serde(rename = "RULE3")]
    RepeatedPattern,
}

impl Rule {
    pub fn bonus(self) -> u32 {
        match self {
            Rule::HighRate => RULE1_BONUS,
            Rule::DenialHistory => RULE2_BONUS,
            Rule::RepeatedPattern => RULE3_BONUS,
        }
    }
}

/// Anomaly contribution and the rules that produced it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyFactor {
    pub f_anom: u32,
    pub rules_fired: Vec<Rule>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorBreakdown {
    pub base: u32,
    pub f_res: u32,
    pub f_ctx: u32,
    pub f_hist: u32,
    pub f_anom: u32,
    pub rules_fired: Vec<Rule>,
}

impl FactorBreakdown {
    pub fn sum(&self) -> u32 {
        self.base + self.f_res + self.f_ctx + self.f_hist + self.f_anom
    }

    pub fn rs(&self) -> u32 {
        self.sum().min(RS_MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub decision: Decision,
    pub rs_final: u32,
    pub breakdown: FactorBreakdown,
    pub reason: String,
    pub policy_hash: String,
}

impl EvalResult {
    pub fn fail_closed(policy: &PolicyConfig) -> Self {
        Self {
            decision: Decision::Denied,
            rs_final: 0,
            breakdown: FactorBreakdown::default(),
            reason: REASON_FAIL_CLOSED.to_string(),
            policy_hash: policy.policy_hash().to_string(),
        }
    }

    pub fn is_fail_closed(&self) -> bool {
        self.reason == REASON_FAIL_CLOSED
    }
}

/// SHA-256 of `agent_id|capability|resource`, lowercase hex. Identifies an
/// interaction context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatternKey(String);

impl PatternKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatternKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn pattern_key(agent_id: &str, capability: &Capability, resource: &str) -> Result<PatternKey, ValidationError> {
    if agent_id.is_empty() {
        return Err(ValidationError::Empty("agent_id"));
    }
    if resource.is_empty() {
        return Err(ValidationError::Empty("resource"));
    }
    let input = format!("{agent_id}|{}|{resource}", capability.as_str());
    Ok(PatternKey(sha256_hex(input.as_bytes())))
}

/// Rules 1-3. Issues exactly three store reads, in the order
/// rate count, denial count, pattern count.
pub fn compute_fanom(
    req: &EvalRequest,
    key: &PatternKey,
    store: &dyn TraceStore,
    policy: &PolicyConfig,
) -> Result<AnomalyFactor, StoreError> {
    let now = req.timestamp;
    let rate = match policy.engine_version {
        EngineVersion::Risk2 => store.count_requests(&req.agent_id, policy.rule1_window_s, now)?,
        EngineVersion::Risk3 => store.count_pattern(key, policy.rule1_window_s, now)?,
    };
    let denials = store.count_denials(&req.agent_id, policy.rule2_window_s, now)?;
    let repeats = store.count_pattern(key, policy.rule3_window_s, now)?;

    let mut rules_fired = Vec::new();
    if rate > u64::from(policy.rule1_threshold_n) {
        rules_fired.push(Rule::HighRate);
    }
    if denials >= u64::from(policy.rule2_threshold_x) {
        rules_fired.push(Rule::DenialHistory);
    }
    if repeats >= u64::from(policy.rule3_threshold_y) {
        rules_fired.push(Rule::RepeatedPattern);
    }
    let f_anom = rules_fired.iter().map(|r| r.bonus()).sum();
    Ok(AnomalyFactor { f_anom, rules_fired })
}

/// Threshold mapping. Level 0 and levels without thresholds deny.
pub fn decide(rs: u32, autonomy_level: u8, policy: &PolicyConfig) -> Decision {
    match policy.thresholds(autonomy_level) {
        Some(t) if rs <= t.approved_max => Decision::Approved,
        Some(t) if rs <= t.escalated_max => Decision::Escalated,
        _ => Decision::Denied,
    }
}

/// Evaluates a request, failing closed on store errors. Only an invalid
/// request produces `Err`.
pub fn evaluate(req: &EvalRequest, store: &dyn TraceStore, policy: &PolicyConfig) -> Result<EvalResult, ValidationError> {
    match try_evaluate(req, store, policy) {
        Ok(r) => Ok(r),
        Err(EvalError::Invalid(e)) => Err(e),
        Err(EvalError::Store(_)) => Ok(EvalResult::fail_closed(policy)),
    }
}

/// Evaluates a request, surfacing store errors to the caller.
pub fn try_evaluate(req: &EvalRequest, store: &dyn TraceStore, policy: &PolicyConfig) -> Result<EvalResult, EvalError> {
    req.validate()?;
    evaluate_validated(req, &req.pattern_key()?, store, policy)
}

pub(crate) fn evaluate_validated(
    req: &EvalRequest,
    key: &PatternKey,
    store: &dyn TraceStore,
    policy: &PolicyConfig,
) -> Result<EvalResult, EvalError> {
    let policy_hash = policy.policy_hash().to_string();
    if store.cooldown_active(&req.agent_id, req.timestamp)? {
        return Ok(EvalResult {
            decision: Decision::CooldownActive,
            rs_final: 0,
            breakdown: FactorBreakdown::default(),
            reason: REASON_COOLDOWN.to_string(),
            policy_hash,
        });
    }

    let anomaly = compute_fanom(req, key, store, policy)?;
    let breakdown = FactorBreakdown {
        base: lookup_base(policy, &req.capability),
        f_res: policy.resource_scores.get(&req.resource_class).copied().unwrap_or(0),
        f_ctx: req.context_flags.iter().filter_map(|f| policy.ctx_weights.get(f)).sum(),
        f_hist: req.history_flags.iter().filter_map(|f| policy.hist_weights.get(f)).sum(),
        f_anom: anomaly.f_anom,
        rules_fired: anomaly.rules_fired,
    };
    let rs_final = breakdown.rs();
    let (decision, reason) = if req.autonomy_level == 0 {
        (Decision::Denied, REASON_AUTONOMY_ZERO.to_string())
    } else {
        let d = decide(rs_final, req.autonomy_level, policy);
        (d, format!("rs {rs_final} at autonomy level {}", req.autonomy_level))
    };
    Ok(EvalResult { decision, rs_final, breakdown, reason, policy_hash })
}

/// True once the agent has at least `cooldown_trigger_denials` denials inside
/// the trigger window.
pub fn should_enter_cooldown(
    agent_id: &str,
    now: Timestamp,
    store: &dyn TraceStore,
    policy: &PolicyConfig,
) -> Result<bool, StoreError> {
    let n = store.count_denials(agent_id, policy.cooldown_trigger_window_s, now)?;
    Ok(n >= u64::from(policy.cooldown_trigger_denials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{default_policy, PolicyParams};
    use crate::store::{make_instrumented, FaultInjectingStore, InMemoryStore, NullStore};

    const T: Timestamp = 1_700_000_000;

    fn req(cap: &str, class: ResourceClass) -> EvalRequest {
        EvalRequest::new("agent-1", cap.parse().unwrap(), "res-1", class, T)
    }

    /// Store returning fixed counter values, for driving the rules directly.
    struct Fixed {
        requests: u64,
        denials: u64,
        pattern_short: u64,
        pattern_long: u64,
    }

    impl TraceStore for Fixed {
        fn count_requests(&self, _: &str, _: u64, _: Timestamp) -> Result<u64, StoreError> {
            Ok(self.requests)
        }
        fn count_denials(&self, _: &str, _: u64, _: Timestamp) -> Result<u64, StoreError> {
            Ok(self.denials)
        }
        fn count_pattern(&self, _: &PatternKey, w: u64, _: Timestamp) -> Result<u64, StoreError> {
            Ok(if w <= 60 { self.pattern_short } else { self.pattern_long })
        }
        fn cooldown_active(&self, _: &str, _: Timestamp) -> Result<bool, StoreError> {
            Ok(false)
        }
        fn add_request(&self, _: &str, _: Timestamp) -> Result<(), StoreError> {
            Ok(())
        }
        fn add_denial(&self, _: &str, _: Timestamp) -> Result<(), StoreError> {
            Ok(())
        }
        fn add_pattern(&self, _: &PatternKey, _: Timestamp) -> Result<(), StoreError> {
            Ok(())
        }
        fn set_cooldown(&self, _: &str, _: Timestamp) -> Result<(), StoreError> {
            Ok(())
        }
    }

    #[test]
    fn pattern_key_golden() {
        let k = pattern_key("a1", &"acp:cap:data.read".parse().unwrap(), "r1").unwrap();
        // sha256(b"a1|acp:cap:data.read|r1"), computed with Python hashlib and sha256sum.
        assert_eq!(k.as_str(), "10b6ff7426d80e8ccb53828f7dd514d534c3a9fe2bbb1ebcb204f7f65cac60fd");
    }

    #[test]
    fn pattern_key_properties() {
        let cap: Capability = "acp:cap:financial.transfer".parse().unwrap();
        let a = pattern_key("a1", &cap, "accounts/sensitive-000").unwrap();
        assert_eq!(a, pattern_key("a1", &cap, "accounts/sensitive-000").unwrap());
        assert_ne!(a, pattern_key("a1", &cap, "accounts/sensitive-001").unwrap());
        // Bare and prefixed spellings name the same context.
        assert_eq!(a, pattern_key("a1", &"financial.transfer".parse().unwrap(), "accounts/sensitive-000").unwrap());
        assert_eq!(pattern_key("", &cap, "r"), Err(ValidationError::Empty("agent_id")));
        assert_eq!(pattern_key("a", &cap, ""), Err(ValidationError::Empty("resource")));
    }

    #[test]
    fn fanom_clean_state() {
        let r = req("data.read", ResourceClass::Public);
        let f = compute_fanom(&r, &r.pattern_key().unwrap(), &NullStore, &default_policy()).unwrap();
        assert_eq!(f, AnomalyFactor::default());
    }

    #[test]
    fn fanom_rule1_agent_scoped() {
        let r = req("financial.transfer", ResourceClass::Sensitive);
        let s = Fixed { requests: 11, denials: 0, pattern_short: 0, pattern_long: 0 };
        let f = compute_fanom(&r, &r.pattern_key().unwrap(), &s, &default_policy()).unwrap();
        assert_eq!(f, AnomalyFactor { f_anom: 20, rules_fired: vec![Rule::HighRate] });

        // Exactly N does not fire.
        let s = Fixed { requests: 10, ..s };
        assert_eq!(compute_fanom(&r, &r.pattern_key().unwrap(), &s, &default_policy()).unwrap().f_anom, 0);
    }

    #[test]
    fn fanom_risk3_context_scoped() {
        let p = default_policy().with_engine_version(EngineVersion::Risk3);
        let r = req("financial.transfer", ResourceClass::Sensitive);
        let s = Fixed { requests: 0, denials: 0, pattern_short: 11, pattern_long: 11 };
        let f = compute_fanom(&r, &r.pattern_key().unwrap(), &s, &p).unwrap();
        assert_eq!(f, AnomalyFactor { f_anom: 35, rules_fired: vec![Rule::HighRate, Rule::RepeatedPattern] });

        // Agent-wide request volume no longer matters under 3.0.
        let s = Fixed { requests: 500, denials: 0, pattern_short: 0, pattern_long: 0 };
        assert_eq!(compute_fanom(&r, &r.pattern_key().unwrap(), &s, &p).unwrap().f_anom, 0);
    }

    #[test]
    fn fanom_all_rules_no_cap() {
        let r = req("data.read", ResourceClass::Public);
        let s = Fixed { requests: 11, denials: 3, pattern_short: 3, pattern_long: 3 };
        let f = compute_fanom(&r, &r.pattern_key().unwrap(), &s, &default_policy()).unwrap();
        assert_eq!(f.f_anom, 50);
        assert_eq!(f.rules_fired, vec![Rule::HighRate, Rule::DenialHistory, Rule::RepeatedPattern]);
    }

    #[test]
    fn evaluate_clean_state_examples() {
        let p = default_policy();
        let cases = [
            ("financial.transfer", ResourceClass::Restricted, 80, Decision::Denied),
            ("data.read", ResourceClass::Public, 0, Decision::Approved),
            ("financial.transfer", ResourceClass::Sensitive, 50, Decision::Escalated),
            ("financial.transfer", ResourceClass::Public, 35, Decision::Approved),
            ("admin.configure", ResourceClass::Restricted, 100, Decision::Denied),
        ];
        for (cap, class, rs, decision) in cases {
            let out = evaluate(&req(cap, class), &InMemoryStore::new(), &p).unwrap();
            assert_eq!((out.rs_final, out.decision), (rs, decision), "{cap}/{class:?}");
            assert_eq!(out.policy_hash, p.policy_hash());
        }
    }

    #[test]
    fn context_and_history_weights() {
        let mut params = PolicyParams::default();
        params.hist_weights.insert(HistoryFlag::RecentDenial, 20);
        let p = PolicyConfig::new(params).unwrap();
        let mut r = req("data.write", ResourceClass::Public);
        r.context_flags = [ContextFlag::ExternalIp, ContextFlag::OffHours, ContextFlag::GeoOutside].into();
        r.history_flags = [HistoryFlag::RecentDenial].into();
        let out = evaluate(&r, &NullStore, &p).unwrap();
        assert_eq!(out.breakdown.f_ctx, 35);
        assert_eq!(out.breakdown.f_hist, 20);
        assert_eq!(out.rs_final, 10 + 35 + 20);
        assert_eq!(out.decision, Decision::Escalated);
    }

    #[test]
    fn cooldown_short_circuits() {
        let store = make_instrumented(InMemoryStore::new());
        store.inner().set_cooldown("agent-1", T + 600).unwrap();
        let out = evaluate(&req("data.read", ResourceClass::Public), &store, &default_policy()).unwrap();
        assert_eq!(out.decision, Decision::CooldownActive);
        assert_eq!(out.rs_final, 0);
        assert_eq!(out.breakdown, FactorBreakdown::default());
        let c = store.counts();
        assert_eq!((c.cooldown_active, c.reads()), (1, 1));
    }

    #[test]
    fn full_path_reads_four_times() {
        for version in [EngineVersion::Risk2, EngineVersion::Risk3] {
            let store = make_instrumented(InMemoryStore::new());
            let p = default_policy().with_engine_version(version);
            evaluate(&req("data.read", ResourceClass::Public), &store, &p).unwrap();
            let c = store.counts();
            assert_eq!(c.reads(), 4);
            assert_eq!(c.writes(), 0);
            assert_eq!((c.cooldown_active, c.count_denials), (1, 1));
            match version {
                EngineVersion::Risk2 => assert_eq!((c.count_requests, c.count_pattern), (1, 1)),
                EngineVersion::Risk3 => assert_eq!((c.count_requests, c.count_pattern), (0, 2)),
            }
        }
    }

    #[test]
    fn decide_boundaries() {
        let p = default_policy();
        assert_eq!(decide(39, 2, &p), Decision::Approved);
        assert_eq!(decide(40, 2, &p), Decision::Escalated);
        assert_eq!(decide(69, 2, &p), Decision::Escalated);
        assert_eq!(decide(70, 2, &p), Decision::Denied);
        assert_eq!(decide(0, 0, &p), Decision::Denied);
        assert_eq!(decide(0, 1, &p), Decision::Approved);
    }

    #[test]
    fn autonomy_zero_denied_with_rs() {
        let mut r = req("data.read", ResourceClass::Public);
        r.autonomy_level = 0;
        let out = evaluate(&r, &NullStore, &default_policy()).unwrap();
        assert_eq!((out.decision, out.rs_final), (Decision::Denied, 0));
        assert_eq!(out.reason, REASON_AUTONOMY_ZERO);
    }

    #[test]
    fn invalid_requests() {
        let p = default_policy();
        let mut r = req("data.read", ResourceClass::Public);
        r.agent_id.clear();
        assert_eq!(evaluate(&r, &NullStore, &p), Err(ValidationError::Empty("agent_id")));
        let mut r = req("data.read", ResourceClass::Public);
        r.autonomy_level = 5;
        assert_eq!(evaluate(&r, &NullStore, &p), Err(ValidationError::AutonomyLevel(5)));
    }

    #[test]
    fn store_failure_fails_closed() {
        let store = FaultInjectingStore::new(InMemoryStore::new());
        store.set_failing(true);
        let p = default_policy();
        let out = evaluate(&req("data.read", ResourceClass::Public), &store, &p).unwrap();
        assert_eq!(out.decision, Decision::Denied);
        assert!(out.is_fail_closed());
        assert!(matches!(try_evaluate(&req("data.read", ResourceClass::Public), &store, &p), Err(EvalError::Store(_))));
    }

    #[test]
    fn cooldown_trigger() {
        let p = default_policy();
        let s = InMemoryStore::new();
        s.add_denial("a", T).unwrap();
        s.add_denial("a", T).unwrap();
        assert!(!should_enter_cooldown("a", T, &s, &p).unwrap());
        s.add_denial("a", T).unwrap();
        assert!(should_enter_cooldown("a", T, &s, &p).unwrap());

        // Three denials all older than the 600 s window.
        let s = InMemoryStore::new();
        let stamps = [T - 601, T - 700, T - 6000];
        for t in stamps {
            s.add_denial("a", t).unwrap();
        }
        let brute = stamps.iter().filter(|&&t| t > T - 600 && t <= T).count();
        assert_eq!(brute, 0);
        assert!(!should_enter_cooldown("a", T, &s, &p).unwrap());
    }

    #[test]
    fn serde_shapes() {
        assert_eq!(serde_json::to_string(&Decision::CooldownActive).unwrap(), "\"COOLDOWN_ACTIVE\"");
        assert_eq!(serde_json::to_string(&Rule::RepeatedPattern).unwrap(), "\"RULE3\"");
        assert_eq!("escalated".parse::<Decision>().unwrap(), Decision::Escalated);
    }
}
