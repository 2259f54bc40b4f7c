//! Reproducible adversarial and performance experiments.
//!
//! Every experiment except EXP3B runs on a fixed clock and is deterministic:
//! counts, trajectories and ledger hashes are identical across runs.

use crate::contract::{process, ProcessError, StepOutcome, UpdateOrdering};
use crate::ledger::{record_outcome, LedgerChain, LedgerError};
use crate::policy::{default_policy, Capability, EngineVersion, PolicyConfig, PolicyError, PolicyOverrides, ResourceClass};
use crate::risk::{try_evaluate, Decision, EvalError, EvalRequest, EvalResult, Rule};
use crate::store::{make_instrumented, DelayedStore, InMemoryStore, NullStore, TraceStore};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Fixed clock used by deterministic experiments.
pub const T0: u64 = 1_700_000_000;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "EXP1")]
    Exp1,
    #[serde(rename = "EXP2")]
    Exp2,
    #[serde(rename = "EXP3B")]
    Exp3b,
    #[serde(rename = "EXP4")]
    Exp4,
    #[serde(rename = "EXP5")]
    Exp5,
    #[serde(rename = "EXP6")]
    Exp6,
    #[serde(rename = "EXP7")]
    Exp7,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::Exp1,
        ExperimentId::Exp2,
        ExperimentId::Exp3b,
        ExperimentId::Exp4,
        ExperimentId::Exp5,
        ExperimentId::Exp6,
        ExperimentId::Exp7,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Exp1 => "EXP1",
            ExperimentId::Exp2 => "EXP2",
            ExperimentId::Exp3b => "EXP3B",
            ExperimentId::Exp4 => "EXP4",
            ExperimentId::Exp5 => "EXP5",
            ExperimentId::Exp6 => "EXP6",
            ExperimentId::Exp7 => "EXP7",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == up)
            .ok_or_else(|| format!("unknown experiment {s:?}; expected one of EXP1, EXP2, EXP3B, EXP4, EXP5, EXP6, EXP7"))
    }
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let up = s.to_ascii_uppercase().replace('-', "_");
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == up)
                    .ok_or_else(|| {
                        let all: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
                        format!("unknown value {s:?}; expected one of {}", all.join(", "))
                    })
            }
        }
    };
}

string_enum!(ClockMode { Fixed => "FIXED", Real => "REAL" });
string_enum!(Exp4Case {
    Baseline => "BASELINE",
    Sequential => "SEQUENTIAL",
    Concurrent => "CONCURRENT",
    NearIdentical => "NEAR_IDENTICAL",
});
string_enum!(Exp7Scenario { Clean => "CLEAN", Mixing => "MIXING", SameContextBurst => "SAME_CONTEXT_BURST" });

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub index: usize,
    pub decision: Decision,
    pub rs: u32,
    pub f_anom: u32,
    pub rules_fired: Vec<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl TrajectoryPoint {
    fn new(index: usize, r: &EvalResult, label: Option<String>) -> Self {
        Self {
            index,
            decision: r.decision,
            rs: r.rs_final,
            f_anom: r.breakdown.f_anom,
            rules_fired: r.breakdown.rules_fired.clone(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delay_us: u64,
    pub requests: u64,
    pub throughput_rps: f64,
    pub mean_latency_us: f64,
}

/// Store calls and mean wall time of the cooldown short-circuit versus a full
/// evaluation against the same in-memory store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastPathReport {
    pub iterations: u64,
    pub full_reads: u64,
    pub cooldown_reads: u64,
    pub full_mean_ns: f64,
    pub cooldown_mean_ns: f64,
}

impl FastPathReport {
    pub fn pass(&self) -> bool {
        self.full_reads == 4 && self.cooldown_reads == 1 && self.cooldown_mean_ns < self.full_mean_ns
    }
}

pub type DecisionCounts = BTreeMap<Decision, u64>;

fn zero_counts() -> DecisionCounts {
    Decision::ALL.into_iter().map(|d| (d, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: ExperimentId,
    pub scenario: String,
    pub clock_mode: ClockMode,
    pub decision_counts: DecisionCounts,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Named positions; request numbers are 1-based unless the name says otherwise.
    pub milestones: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub probes: BTreeMap<String, TrajectoryPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stateless_counts: Option<DecisionCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput_rps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_latency_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_path: Option<FastPathReport>,
    pub ledger_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_head: Option<String>,
    pub pass: bool,
}

impl ExperimentReport {
    fn new(id: ExperimentId, scenario: impl Into<String>, clock_mode: ClockMode) -> Self {
        Self {
            experiment_id: id,
            scenario: scenario.into(),
            clock_mode,
            decision_counts: zero_counts(),
            trajectory: Vec::new(),
            milestones: BTreeMap::new(),
            probes: BTreeMap::new(),
            stateless_counts: None,
            throughput_rps: None,
            mean_latency_us: None,
            sweep: Vec::new(),
            fast_path: None,
            ledger_len: 0,
            ledger_head: None,
            pass: false,
        }
    }

    pub fn count(&self, d: Decision) -> u64 {
        self.decision_counts.get(&d).copied().unwrap_or(0)
    }

    /// `[APPROVED, ESCALATED, DENIED, COOLDOWN_ACTIVE]`.
    pub fn counts(&self) -> [u64; 4] {
        Decision::ALL.map(|d| self.count(d))
    }

    pub fn total(&self) -> u64 {
        self.decision_counts.values().sum()
    }

    pub fn rs_sequence(&self) -> Vec<u32> {
        self.trajectory.iter().map(|p| p.rs).collect()
    }

    pub fn decisions(&self) -> Vec<Decision> {
        self.trajectory.iter().map(|p| p.decision).collect()
    }

    fn first(&self, d: Decision) -> Option<u64> {
        self.trajectory.iter().find(|p| p.decision == d).map(|p| p.index as u64 + 1)
    }
}

/// Sequential driver: one store, one ledger, one trajectory.
struct Run<'a> {
    store: &'a dyn TraceStore,
    policy: &'a PolicyConfig,
    ordering: UpdateOrdering,
    ledger: LedgerChain,
    report: ExperimentReport,
}

impl<'a> Run<'a> {
    fn new(report: ExperimentReport, store: &'a dyn TraceStore, policy: &'a PolicyConfig, ordering: UpdateOrdering) -> Self {
        Self { store, policy, ordering, ledger: LedgerChain::new(), report }
    }

    fn step(&mut self, req: &EvalRequest, label: Option<String>) -> Result<StepOutcome, HarnessError> {
        let out = process(req, self.store, self.policy, self.ordering)?;
        record_outcome(&mut self.ledger, &out, req, None)?;
        let index = self.report.trajectory.len();
        self.report.trajectory.push(TrajectoryPoint::new(index, &out.result, label));
        *self.report.decision_counts.entry(out.result.decision).or_default() += 1;
        Ok(out)
    }

    fn finish(mut self) -> ExperimentReport {
        self.report.ledger_len = self.ledger.len();
        self.report.ledger_head = self.ledger.head().map(|h| h.hash);
        self.report
    }
}

fn cap(s: &str) -> Capability {
    Capability::parse(s).expect("static capability")
}

fn request(agent: &str, capability: &str, resource: &str, class: ResourceClass, at: u64) -> EvalRequest {
    EvalRequest::new(agent, cap(capability), resource, class, at)
}

fn high_risk(agent: &str, at: u64) -> EvalRequest {
    request(agent, "financial.transfer", "treasury", ResourceClass::Restricted, at)
}

/// Cooldown evasion: one agent alternates high-risk (even indices) and
/// low-risk (odd indices) requests, one second apart.
pub fn run_exp1(total: usize) -> Result<ExperimentReport, HarnessError> {
    let policy = default_policy();
    let store = InMemoryStore::new();
    let agent = "agent-evader";
    let mut run = Run::new(
        ExperimentReport::new(ExperimentId::Exp1, "ALTERNATING", ClockMode::Fixed),
        &store,
        &policy,
        UpdateOrdering::EvaluateThenUpdate,
    );
    let mut denial_counter_monotone = true;
    let mut last_denials = 0;
    for i in 0..total {
        let at = T0 + i as u64;
        let req = if i % 2 == 0 {
            high_risk(agent, at)
        } else {
            request(agent, "data.read", "balances", ResourceClass::Public, at)
        };
        run.step(&req, None)?;
        let d = store.count_denials(agent, policy.rule2_window_s, at).expect("in-memory store");
        denial_counter_monotone &= d >= last_denials;
        last_denials = d;
    }
    let mut r = run.finish();
    let first_block = r.trajectory.iter().position(|p| p.decision == Decision::CooldownActive);
    if let Some(i) = first_block {
        r.milestones.insert("processed_before_first_block".into(), i as u64);
    }
    let expected: Vec<Decision> = (0..total)
        .map(|i| match i {
            0..=4 if i % 2 == 0 => Decision::Denied,
            0..=4 => Decision::Approved,
            _ => Decision::CooldownActive,
        })
        .collect();
    r.pass = r.decisions() == expected
        && denial_counter_monotone
        && r.trajectory.first().is_none_or(|p| p.rs == 80);
    Ok(r)
}

/// Free denials across `agents` agents, each sending `per_agent` high-risk
/// requests, interleaved round-robin.
pub fn run_exp2(agents: usize, per_agent: usize) -> Result<ExperimentReport, HarnessError> {
    if agents == 0 {
        return Err(HarnessError::Params("agents must be at least 1".into()));
    }
    let policy = default_policy();
    let store = InMemoryStore::new();
    let names: Vec<String> = (0..agents).map(|a| format!("agent-{a:04}")).collect();
    let mut run = Run::new(
        ExperimentReport::new(ExperimentId::Exp2, format!("N={agents}"), ClockMode::Fixed),
        &store,
        &policy,
        UpdateOrdering::EvaluateThenUpdate,
    );
    let mut per_agent_decisions: Vec<Vec<Decision>> = vec![Vec::with_capacity(per_agent); agents];
    for round in 0..per_agent {
        for (a, name) in names.iter().enumerate() {
            let out = run.step(&high_risk(name, T0 + round as u64), Some(name.clone()))?;
            per_agent_decisions[a].push(out.result.decision);
        }
    }
    let mut r = run.finish();
    let free = per_agent.min(3);
    let expected: Vec<Decision> =
        (0..per_agent).map(|i| if i < free { Decision::Denied } else { Decision::CooldownActive }).collect();
    let uniform = per_agent_decisions.iter().all(|d| *d == expected);
    r.milestones.insert("agents".into(), agents as u64);
    if uniform {
        r.milestones.insert("denials_before_block_per_agent".into(), free as u64);
    }
    r.pass = uniform
        && r.count(Decision::Denied) == (free * agents) as u64
        && r.count(Decision::CooldownActive) == ((per_agent - free) * agents) as u64;
    Ok(r)
}

fn now_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(T0, |d| d.as_secs())
}

/// Workload for the latency experiments: approved reads over a small
/// resource set, one agent per worker.
fn worker_request(worker: usize, i: usize, at: u64) -> EvalRequest {
    request(&format!("worker-{worker:02}"), "data.read", &format!("doc-{}", i % 16), ResourceClass::Public, at)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadParams {
    pub workers: usize,
    pub requests_per_worker: usize,
    /// Untimed requests run through the undelayed store first.
    pub warmup: usize,
}

impl Default for LoadParams {
    fn default() -> Self {
        Self { workers: 10, requests_per_worker: 100, warmup: 1_000 }
    }
}

/// Throughput and mean evaluation latency with a fixed delay injected before
/// every store call. The timed phase runs evaluations only (four reads each)
/// on a store pre-populated by the warm-up.
pub fn run_exp3b(delay: Duration, load: LoadParams) -> Result<ExperimentReport, HarnessError> {
    if load.workers == 0 || load.requests_per_worker == 0 {
        return Err(HarnessError::Params("workers and requests_per_worker must be positive".into()));
    }
    let policy = default_policy();
    let store = DelayedStore::new(InMemoryStore::new(), delay);
    let start_s = now_s();
    for i in 0..load.warmup {
        process(&worker_request(i % load.workers, i, start_s), store.inner(), &policy, UpdateOrdering::EvaluateThenUpdate)?;
    }

    let counts = Mutex::new(zero_counts());
    let latency_total = Mutex::new(Duration::ZERO);
    let started = Instant::now();
    std::thread::scope(|s| -> Result<(), HarnessError> {
        let handles: Vec<_> = (0..load.workers)
            .map(|w| {
                let (store, policy, counts, latency_total) = (&store, &policy, &counts, &latency_total);
                s.spawn(move || -> Result<(), HarnessError> {
                    let mut local = zero_counts();
                    let mut spent = Duration::ZERO;
                    for i in 0..load.requests_per_worker {
                        let req = worker_request(w, i, now_s());
                        let t = Instant::now();
                        let r = try_evaluate(&req, store, policy)?;
                        spent += t.elapsed();
                        *local.entry(r.decision).or_default() += 1;
                    }
                    let mut c = counts.lock();
                    for (d, n) in local {
                        *c.entry(d).or_default() += n;
                    }
                    *latency_total.lock() += spent;
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    let elapsed = started.elapsed().as_secs_f64();
    let requests = (load.workers * load.requests_per_worker) as u64;

    let mut r = ExperimentReport::new(ExperimentId::Exp3b, format!("DELAY_US={}", delay.as_micros()), ClockMode::Real);
    r.decision_counts = counts.into_inner();
    r.throughput_rps = Some(requests as f64 / elapsed);
    r.mean_latency_us = Some(latency_total.into_inner().as_secs_f64() * 1e6 / requests as f64);
    r.pass = r.count(Decision::Approved) == requests;
    Ok(r)
}

pub const DEFAULT_DELAYS_US: [u64; 4] = [0, 250, 1_000, 5_000];

/// Allowed relative deviation of measured latency from four times the delay.
pub const LATENCY_TOLERANCE: f64 = 0.30;

/// Runs [`run_exp3b`] for each delay plus the fast-path probe. Passes when
/// throughput strictly decreases along the sweep, the largest delay (if at
/// least 1 ms) shows latency within ±30% of four times the delay, and the
/// fast-path probe passes.
pub fn run_exp3b_sweep(delays_us: &[u64], load: LoadParams) -> Result<ExperimentReport, HarnessError> {
    let mut sweep = Vec::with_capacity(delays_us.len());
    let mut all_approved = true;
    for &d in delays_us {
        let r = run_exp3b(Duration::from_micros(d), load)?;
        all_approved &= r.pass;
        sweep.push(SweepPoint {
            delay_us: d,
            requests: r.total(),
            throughput_rps: r.throughput_rps.unwrap_or(0.0),
            mean_latency_us: r.mean_latency_us.unwrap_or(0.0),
        });
    }
    let decreasing = sweep.windows(2).all(|w| w[0].throughput_rps > w[1].throughput_rps);
    let latency_ok = match sweep.iter().max_by_key(|p| p.delay_us) {
        Some(p) if p.delay_us >= 1_000 => {
            let target = 4.0 * p.delay_us as f64;
            (p.mean_latency_us - target).abs() <= LATENCY_TOLERANCE * target
        }
        _ => true,
    };
    let fast = probe_fast_path(20_000)?;

    let mut r = ExperimentReport::new(ExperimentId::Exp3b, "SWEEP", ClockMode::Real);
    r.pass = all_approved && decreasing && latency_ok && fast.pass();
    r.decision_counts.insert(Decision::Approved, sweep.iter().map(|p| p.requests).sum());
    r.sweep = sweep;
    r.fast_path = Some(fast);
    Ok(r)
}

/// Compares the cooldown short-circuit with a full evaluation on one store.
pub fn probe_fast_path(iterations: usize) -> Result<FastPathReport, HarnessError> {
    let policy = default_policy();
    let store = make_instrumented(InMemoryStore::new());
    let blocked = high_risk("agent-blocked", T0);
    let active = request("agent-active", "data.write", "ledger", ResourceClass::Sensitive, T0);
    for i in 0..20 {
        process(&request("agent-active", "data.write", &format!("r{i}"), ResourceClass::Sensitive, T0), store.inner(), &policy, UpdateOrdering::EvaluateThenUpdate)?;
        process(&high_risk("agent-blocked", T0), store.inner(), &policy, UpdateOrdering::EvaluateThenUpdate)?;
    }

    let reads_for = |req: &EvalRequest, expect: Decision| -> Result<u64, HarnessError> {
        store.reset();
        let d = try_evaluate(req, &store, &policy)?.decision;
        if (d == Decision::CooldownActive) != (expect == Decision::CooldownActive) {
            return Err(HarnessError::Params(format!("probe setup produced {d}")));
        }
        Ok(store.counts().reads())
    };
    let cooldown_reads = reads_for(&blocked, Decision::CooldownActive)?;
    let full_reads = reads_for(&active, Decision::Approved)?;

    // Interleaved batches so drift affects both paths alike.
    let inner = store.inner();
    let (mut full, mut short) = (Duration::ZERO, Duration::ZERO);
    let batch = 500.min(iterations.max(1));
    let mut done = 0;
    while done < iterations {
        let n = batch.min(iterations - done);
        let t = Instant::now();
        for _ in 0..n {
            std::hint::black_box(try_evaluate(std::hint::black_box(&active), inner, &policy)?);
        }
        full += t.elapsed();
        let t = Instant::now();
        for _ in 0..n {
            std::hint::black_box(try_evaluate(std::hint::black_box(&blocked), inner, &policy)?);
        }
        short += t.elapsed();
        done += n;
    }
    let per = |d: Duration| d.as_nanos() as f64 / iterations.max(1) as f64;
    Ok(FastPathReport {
        iterations: iterations as u64,
        full_reads,
        cooldown_reads,
        full_mean_ns: per(full),
        cooldown_mean_ns: per(short),
    })
}

/// Policy used by the replay experiment: financial.transfer base 40.
pub fn exp4_policy() -> PolicyConfig {
    let o = PolicyOverrides {
        capability_base: Some(BTreeMap::from([("financial.transfer".to_string(), 40)])),
        ..PolicyOverrides::default()
    };
    default_policy().with_overrides(&o).expect("valid override")
}

fn replayed(at: u64) -> EvalRequest {
    request("agent-replay", "financial.transfer", "acct-778", ResourceClass::Sensitive, at)
}

/// Token replay. `parallel` only affects CONCURRENT: when false, each
/// request's evaluate-and-update runs under one lock.
pub fn run_exp4(case: Exp4Case, parallel: bool) -> Result<ExperimentReport, HarnessError> {
    let policy = exp4_policy();
    let store = InMemoryStore::new();
    let ordering = UpdateOrdering::EvaluateThenUpdate;
    let scenario = match (case, parallel) {
        (Exp4Case::Concurrent, true) => "CONCURRENT_PARALLEL".to_string(),
        _ => case.as_str().to_string(),
    };
    let report = ExperimentReport::new(ExperimentId::Exp4, scenario, ClockMode::Fixed);
    use Decision::*;

    if case == Exp4Case::Concurrent {
        return run_exp4_concurrent(report, &store, &policy, parallel);
    }
    let mut run = Run::new(report, &store, &policy, ordering);
    for i in 0..10u64 {
        let at = T0 + i;
        let req = match case {
            Exp4Case::Baseline => request("agent-replay", "data.read", &format!("invoice-{i}"), ResourceClass::Public, at),
            Exp4Case::Sequential => replayed(at),
            Exp4Case::NearIdentical => {
                request("agent-replay", "financial.transfer", &format!("acct-778-{i}"), ResourceClass::Sensitive, at)
            }
            Exp4Case::Concurrent => unreachable!(),
        };
        run.step(&req, None)?;
    }
    let mut r = run.finish();
    if let Some(p) = r.trajectory.iter().find(|p| p.rules_fired.contains(&Rule::RepeatedPattern)) {
        r.milestones.insert("rule3_first_fires".into(), p.index as u64 + 1);
    }
    r.pass = match case {
        Exp4Case::Baseline => {
            r.counts()[1..] == [0, 0, 0] && r.trajectory.iter().all(|p| p.f_anom == 0)
        }
        Exp4Case::Sequential => {
            let blocked_rs: Vec<u32> = r.trajectory[6..].iter().map(|p| p.rs).collect();
            r.rs_sequence()[..6] == [55, 55, 55, 70, 70, 70]
                && r.decisions() == [Escalated, Escalated, Escalated, Denied, Denied, Denied, CooldownActive, CooldownActive, CooldownActive, CooldownActive]
                && blocked_rs.iter().all(|&rs| rs == 0)
        }
        Exp4Case::NearIdentical => r.trajectory.iter().all(|p| p.decision == Escalated && p.rs == 55),
        Exp4Case::Concurrent => unreachable!(),
    };
    Ok(r)
}

const EXP4_WORKERS: usize = 5;
const EXP4_PER_WORKER: usize = 4;

fn run_exp4_concurrent(
    mut report: ExperimentReport,
    store: &InMemoryStore,
    policy: &PolicyConfig,
    parallel: bool,
) -> Result<ExperimentReport, HarnessError> {
    let shared = Mutex::new((LedgerChain::new(), Vec::<TrajectoryPoint>::new()));
    let req = replayed(T0);
    std::thread::scope(|s| -> Result<(), HarnessError> {
        let handles: Vec<_> = (0..EXP4_WORKERS)
            .map(|_| {
                let (shared, req) = (&shared, &req);
                s.spawn(move || -> Result<(), HarnessError> {
                    for _ in 0..EXP4_PER_WORKER {
                        if parallel {
                            let out = process(req, store, policy, UpdateOrdering::EvaluateThenUpdate)?;
                            let mut g = shared.lock();
                            record_outcome(&mut g.0, &out, req, None)?;
                            let i = g.1.len();
                            g.1.push(TrajectoryPoint::new(i, &out.result, None));
                        } else {
                            let mut g = shared.lock();
                            let out = process(req, store, policy, UpdateOrdering::EvaluateThenUpdate)?;
                            record_outcome(&mut g.0, &out, req, None)?;
                            let i = g.1.len();
                            g.1.push(TrajectoryPoint::new(i, &out.result, None));
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    let (ledger, trajectory) = shared.into_inner();
    for p in &trajectory {
        *report.decision_counts.entry(p.decision).or_default() += 1;
    }
    report.trajectory = trajectory;
    report.ledger_len = ledger.len();
    report.ledger_head = ledger.head().map(|h| h.hash);
    report.milestones.insert("workers".into(), EXP4_WORKERS as u64);
    let total = (EXP4_WORKERS * EXP4_PER_WORKER) as u64;
    report.pass = if parallel {
        report.total() == total && report.count(Decision::CooldownActive) >= 14
    } else {
        report.counts() == [0, 3, 3, 14]
    };
    Ok(report)
}

/// Paired stateful/stateless run of 500 identical financial.transfer/public
/// requests at one fixed timestamp, recording each attempt before evaluation.
pub fn run_exp5() -> Result<ExperimentReport, HarnessError> {
    const N: usize = 500;
    let policy = default_policy();
    let store = InMemoryStore::new();
    let req = request("agent-payments", "financial.transfer", "vendor-001", ResourceClass::Public, T0);
    let mut run = Run::new(
        ExperimentReport::new(ExperimentId::Exp5, "STATEFUL", ClockMode::Fixed),
        &store,
        &policy,
        UpdateOrdering::UpdateThenEvaluate,
    );
    for _ in 0..N {
        run.step(&req, None)?;
    }
    let mut r = run.finish();

    let mut stateless = zero_counts();
    for _ in 0..N {
        let out = process(&req, &NullStore, &policy, UpdateOrdering::UpdateThenEvaluate)?;
        *stateless.entry(out.result.decision).or_default() += 1;
    }
    for (name, d) in [
        ("first_escalated", Decision::Escalated),
        ("first_denied", Decision::Denied),
        ("cooldown_from", Decision::CooldownActive),
    ] {
        if let Some(i) = r.first(d) {
            r.milestones.insert(name.into(), i);
        }
    }
    let milestones_ok = [("first_escalated", 3), ("first_denied", 11), ("cooldown_from", 14)]
        .iter()
        .all(|(k, v)| r.milestones.get(*k) == Some(v));
    r.pass = r.counts() == [2, 8, 3, 487]
        && milestones_ok
        && r.trajectory.first().map(|p| p.rs) == Some(35)
        && stateless.get(&Decision::Approved) == Some(&(N as u64));
    r.stateless_counts = Some(stateless);
    Ok(r)
}

fn policy_for(version: EngineVersion) -> PolicyConfig {
    default_policy().with_engine_version(version)
}

fn phase2(at: u64) -> EvalRequest {
    request("agent-mixed", "financial.transfer", "payee-9", ResourceClass::Sensitive, at)
}

fn prime(i: usize, at: u64) -> EvalRequest {
    request("agent-mixed", "data.read", &format!("catalog-{i}"), ResourceClass::Public, at)
}

fn single(req: &EvalRequest, policy: &PolicyConfig, ordering: UpdateOrdering) -> Result<EvalResult, HarnessError> {
    Ok(process(req, &InMemoryStore::new(), policy, ordering)?.result)
}

/// Phase-2 result after `primes` unrelated reads on the same store.
fn mixed(primes: usize, policy: &PolicyConfig, ordering: UpdateOrdering) -> Result<EvalResult, HarnessError> {
    let store = InMemoryStore::new();
    for i in 0..primes {
        process(&prime(i, T0), &store, policy, ordering)?;
    }
    Ok(process(&phase2(T0), &store, policy, ordering)?.result)
}

/// State mixing: `primes` low-risk reads, then one financial.transfer on the
/// same agent-scoped counters, compared against a clean-store control.
pub fn run_exp6(version: EngineVersion, primes: usize) -> Result<ExperimentReport, HarnessError> {
    let policy = policy_for(version);
    let store = InMemoryStore::new();
    let ordering = UpdateOrdering::UpdateThenEvaluate;
    let mut run = Run::new(ExperimentReport::new(ExperimentId::Exp6, version.as_str(), ClockMode::Fixed), &store, &policy, ordering);
    for i in 0..primes {
        run.step(&prime(i, T0), Some("prime".into()))?;
    }
    run.step(&phase2(T0), Some("phase2".into()))?;
    let mut r = run.finish();

    let control = single(&phase2(T0), &policy, ordering)?;
    r.probes.insert("control".into(), TrajectoryPoint::new(0, &control, Some("control".into())));
    let p2 = r.trajectory.last().cloned().expect("phase 2 ran");
    r.probes.insert("phase2".into(), p2.clone());

    // Smallest priming count at which the penalty fires when the attempt is
    // not yet counted at evaluation time.
    let mut threshold = None;
    for n in 0..=4 * policy.rule1_threshold_n as usize + 4 {
        if mixed(n, &policy, UpdateOrdering::EvaluateThenUpdate)?.rs_final > control.rs_final {
            threshold = Some(n as u64);
            break;
        }
    }
    if let Some(n) = threshold {
        r.milestones.insert("contamination_threshold_primes".into(), n);
    }

    let control_ok = control.rs_final == 50 && control.decision == Decision::Escalated;
    r.pass = control_ok
        && match version {
            EngineVersion::Risk2 if primes == 11 => {
                p2.rs == 70
                    && p2.decision == Decision::Denied
                    && p2.f_anom == 20
                    && p2.rules_fired == [Rule::HighRate]
                    && threshold == Some(u64::from(policy.rule1_threshold_n) + 1)
            }
            EngineVersion::Risk2 => true,
            EngineVersion::Risk3 => p2.rs == control.rs_final && p2.decision == control.decision && threshold.is_none(),
        };
    Ok(r)
}

/// Expected (rs, decision) for each cell of the context-scoping table.
pub fn exp7_expected(scenario: Exp7Scenario, version: EngineVersion) -> (u32, Decision) {
    match (scenario, version) {
        (Exp7Scenario::Clean, _) => (50, Decision::Escalated),
        (Exp7Scenario::Mixing, EngineVersion::Risk2) => (70, Decision::Denied),
        (Exp7Scenario::Mixing, EngineVersion::Risk3) => (50, Decision::Escalated),
        (Exp7Scenario::SameContextBurst, _) => (85, Decision::Denied),
    }
}

/// One cell of the context-scoping table; the reported request is the last.
pub fn run_exp7(scenario: Exp7Scenario, version: EngineVersion) -> Result<ExperimentReport, HarnessError> {
    let policy = policy_for(version);
    let store = InMemoryStore::new();
    let mut run = Run::new(
        ExperimentReport::new(ExperimentId::Exp7, format!("{scenario}/{version}"), ClockMode::Fixed),
        &store,
        &policy,
        UpdateOrdering::UpdateThenEvaluate,
    );
    match scenario {
        Exp7Scenario::Clean => {
            run.step(&phase2(T0), None)?;
        }
        Exp7Scenario::Mixing => {
            for i in 0..11 {
                run.step(&prime(i, T0), Some("prime".into()))?;
            }
            run.step(&phase2(T0), None)?;
        }
        Exp7Scenario::SameContextBurst => {
            for _ in 0..11 {
                run.step(&phase2(T0), None)?;
            }
        }
    }
    let mut r = run.finish();
    let last = r.trajectory.last().cloned().expect("at least one request");
    r.pass = (last.rs, last.decision) == exp7_expected(scenario, version);
    r.probes.insert("reported".into(), last);
    Ok(r)
}

/// Per-experiment knobs; unset values take the defaults used by the tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentParams {
    pub total: usize,
    pub agents: Vec<usize>,
    pub per_agent: usize,
    pub delays_us: Vec<u64>,
    pub load: LoadParams,
    pub case: Option<Exp4Case>,
    pub parallel: bool,
    pub version: Option<EngineVersion>,
    pub scenario: Option<Exp7Scenario>,
    pub primes: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            total: 500,
            agents: vec![1, 10, 100],
            per_agent: 10,
            delays_us: DEFAULT_DELAYS_US.to_vec(),
            load: LoadParams::default(),
            case: None,
            parallel: false,
            version: None,
            scenario: None,
            primes: 11,
        }
    }
}

const VERSIONS: [EngineVersion; 2] = [EngineVersion::Risk2, EngineVersion::Risk3];

/// Runs an experiment. Experiments with several cases return one report per
/// case unless `params` selects one.
pub fn run_experiment(id: ExperimentId, params: &ExperimentParams) -> Result<Vec<ExperimentReport>, HarnessError> {
    let versions: Vec<EngineVersion> = params.version.map_or(VERSIONS.to_vec(), |v| vec![v]);
    match id {
        ExperimentId::Exp1 => Ok(vec![run_exp1(params.total)?]),
        ExperimentId::Exp2 => params.agents.iter().map(|&n| run_exp2(n, params.per_agent)).collect(),
        ExperimentId::Exp3b => Ok(vec![run_exp3b_sweep(&params.delays_us, params.load)?]),
        ExperimentId::Exp4 => {
            let cases = params.case.map_or(Exp4Case::ALL.to_vec(), |c| vec![c]);
            cases.into_iter().map(|c| run_exp4(c, params.parallel)).collect()
        }
        ExperimentId::Exp5 => Ok(vec![run_exp5()?]),
        ExperimentId::Exp6 => versions.iter().map(|&v| run_exp6(v, params.primes)).collect(),
        ExperimentId::Exp7 => {
            let scenarios = params.scenario.map_or(Exp7Scenario::ALL.to_vec(), |s| vec![s]);
            let mut out = Vec::new();
            for s in scenarios {
                for &v in &versions {
                    out.push(run_exp7(s, v)?);
                }
            }
            Ok(out)
        }
    }
}

string_enum!(ReportFormat { Json => "JSON", Csv => "CSV" });

pub const CSV_HEADER: [&str; 6] = ["experiment_id", "approved", "escalated", "denied", "cooldown", "pass"];

/// JSON (one object, or an array for several reports) or CSV (one row per report).
pub fn write_reports<W: Write>(reports: &[ExperimentReport], w: W, format: ReportFormat) -> Result<(), HarnessError> {
    match format {
        ReportFormat::Json => {
            let mut w = w;
            if let [one] = reports {
                serde_json::to_writer_pretty(&mut w, one)?;
            } else {
                serde_json::to_writer_pretty(&mut w, reports)?;
            }
            w.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(CSV_HEADER)?;
            for r in reports {
                let [a, e, d, c] = r.counts();
                csv.write_record([
                    r.experiment_id.as_str().to_string(),
                    a.to_string(),
                    e.to_string(),
                    d.to_string(),
                    c.to_string(),
                    r.pass.to_string(),
                ])?;
            }
            csv.flush()?;
        }
    }
    Ok(())
}

pub fn emit_report(report: &ExperimentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<(), HarnessError> {
    emit_reports(std::slice::from_ref(report), path, format)
}

pub fn emit_reports(reports: &[ExperimentReport], path: impl AsRef<Path>, format: ReportFormat) -> Result<(), HarnessError> {
    let f = std::fs::File::create(path)?;
    write_reports(reports, std::io::BufWriter::new(f), format)
}
