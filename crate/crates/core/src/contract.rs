//! Sequencing of evaluation and state updates for a single request.

use crate::policy::PolicyConfig;
use crate::risk::{evaluate_validated, should_enter_cooldown, Decision, EvalError, EvalRequest, EvalResult, ValidationError};
use crate::store::{StoreError, TraceStore};
use serde::{Deserialize, Serialize};

/// Whether the current attempt is visible to its own evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateOrdering {
    /// Evaluate on prior state, then record. Step n sees n-1 prior patterns.
    #[default]
    EvaluateThenUpdate,
    /// Record request and pattern first, then evaluate.
    UpdateThenEvaluate,
}

impl std::str::FromStr for UpdateOrdering {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "EVALUATE_THEN_UPDATE" => Ok(Self::EvaluateThenUpdate),
            "UPDATE_THEN_EVALUATE" => Ok(Self::UpdateThenEvaluate),
            other => Err(format!("unknown ordering {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub result: EvalResult,
    pub cooldown_entered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProcessError {
    #[error("invalid request: {0}")]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<EvalError> for ProcessError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Invalid(v) => ProcessError::Invalid(v),
            EvalError::Store(s) => ProcessError::Store(s),
        }
    }
}

/// Runs one request through the engine and applies the resulting state updates:
///
/// 1. `add_request` and `add_pattern` always (before or after evaluation,
///    depending on `ordering`), including for cooldown-blocked attempts;
/// 2. on a DENIED decision, `add_denial`, then `set_cooldown` once the trigger
///    threshold is reached.
///
/// Invalid requests are rejected before any store access. A store failure
/// aborts the step; writes already made are not rolled back.
pub fn process(
    req: &EvalRequest,
    store: &dyn TraceStore,
    policy: &PolicyConfig,
    ordering: UpdateOrdering,
) -> Result<StepOutcome, ProcessError> {
    req.validate()?;
    let key = req.pattern_key()?;
    let now = req.timestamp;

    let result = match ordering {
        UpdateOrdering::EvaluateThenUpdate => {
            let r = evaluate_validated(req, &key, store, policy)?;
            store.add_request(&req.agent_id, now)?;
            store.add_pattern(&key, now)?;
            r
        }
        UpdateOrdering::UpdateThenEvaluate => {
            store.add_request(&req.agent_id, now)?;
            store.add_pattern(&key, now)?;
            evaluate_validated(req, &key, store, policy)?
        }
    };

    let mut cooldown_entered = false;
    if result.decision == Decision::Denied {
        store.add_denial(&req.agent_id, now)?;
        if should_enter_cooldown(&req.agent_id, now, store, policy)? {
            store.set_cooldown(&req.agent_id, now + policy.cooldown_period_s)?;
            cooldown_entered = true;
        }
    }
    Ok(StepOutcome { result, cooldown_entered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{default_policy, ResourceClass};
    use crate::risk::evaluate;
    use crate::store::{make_instrumented, FaultInjectingStore, InMemoryStore};

    const T: u64 = 1_700_000_000;

    fn high(at: u64) -> EvalRequest {
        EvalRequest::new("a", "financial.transfer".parse().unwrap(), "acct", ResourceClass::Restricted, at)
    }

    #[test]
    fn third_denial_enters_cooldown() {
        let s = InMemoryStore::new();
        let p = default_policy();
        let mut entered = vec![];
        for i in 0..3 {
            let o = process(&high(T + i * 100), &s, &p, UpdateOrdering::EvaluateThenUpdate).unwrap();
            assert_eq!(o.result.decision, Decision::Denied);
            entered.push(o.cooldown_entered);
        }
        assert_eq!(entered, [false, false, true]);
        assert_eq!(s.cooldown_until("a"), Some(T + 200 + 600));
    }

    #[test]
    fn denials_outside_window_do_not_trigger() {
        let s = InMemoryStore::new();
        let p = default_policy();
        for at in [T, T + 400, T + 800] {
            let o = process(&high(at), &s, &p, UpdateOrdering::EvaluateThenUpdate).unwrap();
            assert!(!o.cooldown_entered);
        }
    }

    #[test]
    fn blocked_step_does_not_add_denial() {
        let s = make_instrumented(InMemoryStore::new());
        let p = default_policy();
        s.inner().set_cooldown("a", T + 600).unwrap();
        let o = process(&high(T), &s, &p, UpdateOrdering::EvaluateThenUpdate).unwrap();
        assert_eq!(o.result.decision, Decision::CooldownActive);
        assert!(!o.cooldown_entered);
        let c = s.counts();
        assert_eq!((c.add_request, c.add_pattern, c.add_denial), (1, 1, 0));
        assert_eq!(s.inner().totals().denials, 0);
    }

    #[test]
    fn first_request_matches_pure_evaluate() {
        let p = default_policy();
        let r = EvalRequest::new("a", "data.read".parse().unwrap(), "r", ResourceClass::Public, T);
        let pure = evaluate(&r, &InMemoryStore::new(), &p).unwrap();
        let etu = process(&r, &InMemoryStore::new(), &p, UpdateOrdering::EvaluateThenUpdate).unwrap();
        assert_eq!(etu.result, pure);

        // With counters at 1 the defaults fire nothing, so the result is the same.
        let ute = process(&r, &InMemoryStore::new(), &p, UpdateOrdering::UpdateThenEvaluate).unwrap();
        assert_eq!(ute.result, pure);
    }

    #[test]
    fn orderings_differ_in_visibility() {
        // Y = 1: the pattern rule fires on the very first request only when the
        // current attempt is recorded first.
        let p = default_policy()
            .with_overrides(&serde_json::from_str(r#"{"rule3_threshold_y":1}"#).unwrap())
            .unwrap();
        let r = EvalRequest::new("a", "data.read".parse().unwrap(), "r", ResourceClass::Public, T);
        let etu = process(&r, &InMemoryStore::new(), &p, UpdateOrdering::EvaluateThenUpdate).unwrap();
        let ute = process(&r, &InMemoryStore::new(), &p, UpdateOrdering::UpdateThenEvaluate).unwrap();
        assert_eq!(etu.result.breakdown.f_anom, 0);
        assert_eq!(ute.result.breakdown.f_anom, 15);
    }

    #[test]
    fn invalid_request_touches_nothing() {
        let s = make_instrumented(InMemoryStore::new());
        let mut r = high(T);
        r.resource.clear();
        assert!(matches!(
            process(&r, &s, &default_policy(), UpdateOrdering::EvaluateThenUpdate),
            Err(ProcessError::Invalid(_))
        ));
        assert_eq!(s.counts().reads() + s.counts().writes(), 0);
    }

    #[test]
    fn store_failure_is_an_error() {
        let s = FaultInjectingStore::new(InMemoryStore::new());
        s.fail_writes();
        let out = process(&high(T), &s, &default_policy(), UpdateOrdering::EvaluateThenUpdate);
        assert!(matches!(out, Err(ProcessError::Store(_))));
    }

    #[test]
    fn ordering_parse() {
        assert_eq!("update-then-evaluate".parse::<UpdateOrdering>().unwrap(), UpdateOrdering::UpdateThenEvaluate);
        assert_eq!(
            serde_json::to_string(&UpdateOrdering::EvaluateThenUpdate).unwrap(),
            "\"EVALUATE_THEN_UPDATE\""
        );
    }
}
