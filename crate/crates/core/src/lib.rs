//! Risk-adaptive admission control for agent capability requests.
//!
//! A request is scored from its capability, resource class, context and
//! history flags, plus anomaly rules over a shared [`store::TraceStore`].
//! The score maps to APPROVED, ESCALATED or DENIED by autonomy level, repeated
//! denials place the agent in cooldown, and every decision can be appended to
//! a hash-chained [`ledger::LedgerChain`].

pub mod canonical;
pub mod conformance;
pub mod contract;
pub mod harness;
pub mod ledger;
pub mod policy;
pub mod risk;
pub mod store;

pub use contract::{process, ProcessError, StepOutcome, UpdateOrdering};
pub use ledger::{verify_chain, EventType, LedgerChain, LedgerEvent, Verdict};
pub use policy::{default_policy, Capability, EngineVersion, PolicyConfig, PolicyOverrides, PolicyParams, ResourceClass};
pub use risk::{evaluate, Decision, EvalRequest, EvalResult, FactorBreakdown, Rule};
pub use store::{InMemoryStore, TraceStore};
