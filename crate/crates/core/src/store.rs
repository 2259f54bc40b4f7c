//! The state backend contract consulted by the risk engine, plus reference
//! implementations.
//!
//! Every count is taken over the half-open window `(now - window, now]`.
//! Writes only ever add history; nothing removes it.

use crate::risk::PatternKey;
use parking_lot::Mutex;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// Seconds since the Unix epoch.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("state backend unavailable: {0}")]
    Unavailable(String),
}

pub trait TraceStore: Send + Sync {
    fn count_requests(&self, agent_id: &str, window_s: u64, now: Timestamp) -> Result<u64, StoreError>;
    fn count_denials(&self, agent_id: &str, window_s: u64, now: Timestamp) -> Result<u64, StoreError>;
    fn count_pattern(&self, key: &PatternKey, window_s: u64, now: Timestamp) -> Result<u64, StoreError>;
    fn cooldown_active(&self, agent_id: &str, now: Timestamp) -> Result<bool, StoreError>;

    fn add_request(&self, agent_id: &str, at: Timestamp) -> Result<(), StoreError>;
    fn add_denial(&self, agent_id: &str, at: Timestamp) -> Result<(), StoreError>;
    fn add_pattern(&self, key: &PatternKey, at: Timestamp) -> Result<(), StoreError>;
    fn set_cooldown(&self, agent_id: &str, until: Timestamp) -> Result<(), StoreError>;
}

impl<T: TraceStore + ?Sized> TraceStore for Arc<T> {
    fn count_requests(&self, a: &str, w: u64, now: Timestamp) -> Result<u64, StoreError> {
        (**self).count_requests(a, w, now)
    }
    fn count_denials(&self, a: &str, w: u64, now: Timestamp) -> Result<u64, StoreError> {
        (**self).count_denials(a, w, now)
    }
    fn count_pattern(&self, k: &PatternKey, w: u64, now: Timestamp) -> Result<u64, StoreError> {
        (**self).count_pattern(k, w, now)
    }
    fn cooldown_active(&self, a: &str, now: Timestamp) -> Result<bool, StoreError> {
        (**self).cooldown_active(a, now)
    }
    fn add_request(&self, a: &str, at: Timestamp) -> Result<(), StoreError> {
        (**self).add_request(a, at)
    }
    fn add_denial(&self, a: &str, at: Timestamp) -> Result<(), StoreError> {
        (**self).add_denial(a, at)
    }
    fn add_pattern(&self, k: &PatternKey, at: Timestamp) -> Result<(), StoreError> {
        (**self).add_pattern(k, at)
    }
    fn set_cooldown(&self, a: &str, until: Timestamp) -> Result<(), StoreError> {
        (**self).set_cooldown(a, until)
    }
}

/// True when `t` lies in `(now - window, now]`.
#[inline]
pub fn in_window(t: Timestamp, window_s: u64, now: Timestamp) -> bool {
    t <= now && t + window_s > now
}

fn count_in(list: Option<&Vec<Timestamp>>, window_s: u64, now: Timestamp) -> u64 {
    list.map_or(0, |ts| ts.iter().filter(|&&t| in_window(t, window_s, now)).count() as u64)
}

#[derive(Debug, Default)]
struct Tables {
    requests: HashMap<String, Vec<Timestamp>>,
    denials: HashMap<String, Vec<Timestamp>>,
    patterns: HashMap<PatternKey, Vec<Timestamp>>,
    cooldowns: HashMap<String, Timestamp>,
}

/// Process-local store: unsorted per-subject timestamp lists behind one mutex.
/// Counts are linear scans.
#[derive(Debug, Default)]
pub struct InMemoryStore {
    tables: Mutex<Tables>,
}

/// Total number of entries ever written to an [`InMemoryStore`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreTotals {
    pub requests: u64,
    pub denials: u64,
    pub patterns: u64,
    pub cooldowns: u64,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn totals(&self) -> StoreTotals {
        let t = self.tables.lock();
        let sum = |m: &HashMap<_, Vec<Timestamp>>| m.values().map(|v| v.len() as u64).sum();
        StoreTotals {
            requests: sum(&t.requests),
            denials: sum(&t.denials),
            patterns: t.patterns.values().map(|v| v.len() as u64).sum(),
            cooldowns: t.cooldowns.len() as u64,
        }
    }

    pub fn cooldown_until(&self, agent_id: &str) -> Option<Timestamp> {
        self.tables.lock().cooldowns.get(agent_id).copied()
    }
}

impl TraceStore for InMemoryStore {
    fn count_requests(&self, agent_id: &str, window_s: u64, now: Timestamp) -> Result<u64, StoreError> {
        Ok(count_in(self.tables.lock().requests.get(agent_id), window_s, now))
    }

    fn count_denials(&self, agent_id: &str, window_s: u64, now: Timestamp) -> Result<u64, StoreError> {
        Ok(count_in(self.tables.lock().denials.get(agent_id), window_s, now))
    }

    fn count_pattern(&self, key: &PatternKey, window_s: u64, now: Timestamp) -> Result<u64, StoreError> {
        Ok(count_in(self.tables.lock().patterns.get(key), window_s, now))
    }

    fn cooldown_active(&self, agent_id: &str, now: Timestamp) -> Result<bool, StoreError> {
        Ok(self.tables.lock().cooldowns.get(agent_id).is_some_and(|&until| until > now))
    }

    fn add_request(&self, agent_id: &str, at: Timestamp) -> Result<(), StoreError> {
        self.tables.lock().requests.entry(agent_id.to_string()).or_default().push(at);
        Ok(())
    }

    fn add_denial(&self, agent_id: &str, at: Timestamp) -> Result<(), StoreError> {
        self.tables.lock().denials.entry(agent_id.to_string()).or_default().push(at);
        Ok(())
    }

    fn add_pattern(&self, key: &PatternKey, at: Timestamp) -> Result<(), StoreError> {
        self.tables.lock().patterns.entry(key.clone()).or_default().push(at);
        Ok(())
    }

    fn set_cooldown(&self, agent_id: &str, until: Timestamp) -> Result<(), StoreError> {
        let mut t = self.tables.lock();
        let slot = t.cooldowns.entry(agent_id.to_string()).or_insert(until);
        *slot = (*slot).max(until);
        Ok(())
    }
}

/// Reports an empty history for every query and discards writes.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullStore;

impl TraceStore for NullStore {
    fn count_requests(&self, _: &str, _: u64, _: Timestamp) -> Result<u64, StoreError> {
        Ok(0)
    }
    fn count_denials(&self, _: &str, _: u64, _: Timestamp) -> Result<u64, StoreError> {
        Ok(0)
    }
    fn count_pattern(&self, _: &PatternKey, _: u64, _: Timestamp) -> Result<u64, StoreError> {
        Ok(0)
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

/// Sleeps for a fixed duration before every contract call, then delegates.
#[derive(Debug)]
pub struct DelayedStore<S> {
    inner: S,
    delay: Duration,
}

impl<S: TraceStore> DelayedStore<S> {
    pub fn new(inner: S, delay_per_call: Duration) -> Self {
        Self { inner, delay: delay_per_call }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn delay_per_call(&self) -> Duration {
        self.delay
    }
}

macro_rules! delegate_all {
    ($ty:ident, $before:ident) => {
        impl<S: TraceStore> TraceStore for $ty<S> {
            fn count_requests(&self, a: &str, w: u64, now: Timestamp) -> Result<u64, StoreError> {
                self.$before(Call::CountRequests)?;
                self.inner.count_requests(a, w, now)
            }
            fn count_denials(&self, a: &str, w: u64, now: Timestamp) -> Result<u64, StoreError> {
                self.$before(Call::CountDenials)?;
                self.inner.count_denials(a, w, now)
            }
            fn count_pattern(&self, k: &PatternKey, w: u64, now: Timestamp) -> Result<u64, StoreError> {
                self.$before(Call::CountPattern)?;
                self.inner.count_pattern(k, w, now)
            }
            fn cooldown_active(&self, a: &str, now: Timestamp) -> Result<bool, StoreError> {
                self.$before(Call::CooldownActive)?;
                self.inner.cooldown_active(a, now)
            }
            fn add_request(&self, a: &str, at: Timestamp) -> Result<(), StoreError> {
                self.$before(Call::AddRequest)?;
                self.inner.add_request(a, at)
            }
            fn add_denial(&self, a: &str, at: Timestamp) -> Result<(), StoreError> {
                self.$before(Call::AddDenial)?;
                self.inner.add_denial(a, at)
            }
            fn add_pattern(&self, k: &PatternKey, at: Timestamp) -> Result<(), StoreError> {
                self.$before(Call::AddPattern)?;
                self.inner.add_pattern(k, at)
            }
            fn set_cooldown(&self, a: &str, until: Timestamp) -> Result<(), StoreError> {
                self.$before(Call::SetCooldown)?;
                self.inner.set_cooldown(a, until)
            }
        }
    };
}

/// Contract methods, used by the wrapper stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Call {
    CountRequests,
    CountDenials,
    CountPattern,
    CooldownActive,
    AddRequest,
    AddDenial,
    AddPattern,
    SetCooldown,
}

impl Call {
    pub fn is_read(self) -> bool {
        matches!(self, Call::CountRequests | Call::CountDenials | Call::CountPattern | Call::CooldownActive)
    }
}

impl<S> DelayedStore<S> {
    fn delay_call(&self, _: Call) -> Result<(), StoreError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(())
    }
}

delegate_all!(DelayedStore, delay_call);

/// Per-method call counts observed by an [`InstrumentedStore`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub cooldown_active: u64,
    pub count_requests: u64,
    pub count_denials: u64,
    pub count_pattern: u64,
    pub add_request: u64,
    pub add_denial: u64,
    pub add_pattern: u64,
    pub set_cooldown: u64,
}

impl CallCounts {
    pub fn reads(&self) -> u64 {
        self.cooldown_active + self.count_requests + self.count_denials + self.count_pattern
    }

    pub fn writes(&self) -> u64 {
        self.add_request + self.add_denial + self.add_pattern + self.set_cooldown
    }
}

/// Delegates every call and counts it per method.
#[derive(Debug, Default)]
pub struct InstrumentedStore<S> {
    inner: S,
    counters: [AtomicU64; 8],
}

pub fn make_instrumented<S: TraceStore>(inner: S) -> InstrumentedStore<S> {
    InstrumentedStore::new(inner)
}

impl<S: TraceStore> InstrumentedStore<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, counters: Default::default() }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn counts(&self) -> CallCounts {
        let c = |i: usize| self.counters[i].load(Ordering::SeqCst);
        CallCounts {
            count_requests: c(0),
            count_denials: c(1),
            count_pattern: c(2),
            cooldown_active: c(3),
            add_request: c(4),
            add_denial: c(5),
            add_pattern: c(6),
            set_cooldown: c(7),
        }
    }

    pub fn reset(&self) {
        for c in &self.counters {
            c.store(0, Ordering::SeqCst);
        }
    }
}

impl<S> InstrumentedStore<S> {
    fn record(&self, call: Call) -> Result<(), StoreError> {
        self.counters[call as usize].fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}

delegate_all!(InstrumentedStore, record);

/// Wrapper whose calls fail on demand. Used to exercise fail-closed paths.
#[derive(Debug, Default)]
pub struct FaultInjectingStore<S> {
    inner: S,
    failing: AtomicBool,
    fail_writes_only: AtomicBool,
}

impl<S: TraceStore> FaultInjectingStore<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, failing: AtomicBool::new(false), fail_writes_only: AtomicBool::new(false) }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    /// Makes every call fail (`true`) or pass through (`false`).
    pub fn set_failing(&self, failing: bool) {
        self.fail_writes_only.store(false, Ordering::SeqCst);
        self.failing.store(failing, Ordering::SeqCst);
    }

    /// Makes only write calls fail.
    pub fn fail_writes(&self) {
        self.fail_writes_only.store(true, Ordering::SeqCst);
        self.failing.store(true, Ordering::SeqCst);
    }
}

impl<S> FaultInjectingStore<S> {
    fn check(&self, call: Call) -> Result<(), StoreError> {
        if self.failing.load(Ordering::SeqCst) && !(call.is_read() && self.fail_writes_only.load(Ordering::SeqCst)) {
            return Err(StoreError::Unavailable(format!("injected fault on {call:?}")));
        }
        Ok(())
    }
}

delegate_all!(FaultInjectingStore, check);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::pattern_key;
    use proptest::prelude::*;

    #[test]
    fn window_is_half_open() {
        let s = InMemoryStore::new();
        s.add_request("a", 100).unwrap();
        assert_eq!(s.count_requests("a", 60, 100).unwrap(), 1);

        let s = InMemoryStore::new();
        s.add_request("a", 39).unwrap();
        s.add_request("a", 40).unwrap();
        s.add_request("a", 41).unwrap();
        s.add_request("a", 101).unwrap();
        // Only t in (40, 100] counts.
        assert_eq!(s.count_requests("a", 60, 100).unwrap(), 1);
    }

    #[test]
    fn window_larger_than_now() {
        let s = InMemoryStore::new();
        s.add_denial("a", 0).unwrap();
        s.add_denial("a", 5).unwrap();
        assert_eq!(s.count_denials("a", 86_400, 10).unwrap(), 2);
    }

    #[test]
    fn cooldown_expiry() {
        let s = InMemoryStore::new();
        assert!(!s.cooldown_active("a", 0).unwrap());
        s.set_cooldown("a", 700).unwrap();
        assert!(s.cooldown_active("a", 699).unwrap());
        assert!(!s.cooldown_active("a", 700).unwrap());
        s.set_cooldown("a", 650).unwrap();
        assert_eq!(s.cooldown_until("a"), Some(700));
        assert!(!s.cooldown_active("b", 0).unwrap());
    }

    #[test]
    fn null_store_forgets() {
        let s = NullStore;
        let k = pattern_key("a", &"x.y".parse().unwrap(), "r").unwrap();
        for t in 0..10 {
            s.add_request("a", t).unwrap();
            s.add_denial("a", t).unwrap();
            s.add_pattern(&k, t).unwrap();
            s.set_cooldown("a", t + 1000).unwrap();
        }
        assert_eq!(s.count_denials("a", 600, 9).unwrap(), 0);
        assert_eq!(s.count_requests("a", 600, 9).unwrap(), 0);
        assert_eq!(s.count_pattern(&k, 600, 9).unwrap(), 0);
        assert!(!s.cooldown_active("a", 9).unwrap());
    }

    #[test]
    fn instrumented_starts_at_zero() {
        let s = make_instrumented(InMemoryStore::new());
        assert_eq!(s.counts(), CallCounts::default());
        s.add_request("a", 1).unwrap();
        s.count_requests("a", 10, 1).unwrap();
        let c = s.counts();
        assert_eq!((c.add_request, c.count_requests, c.reads(), c.writes()), (1, 1, 1, 1));
        s.reset();
        assert_eq!(s.counts(), CallCounts::default());
    }

    #[test]
    fn fault_injection() {
        let s = FaultInjectingStore::new(InMemoryStore::new());
        s.add_request("a", 1).unwrap();
        s.set_failing(true);
        assert!(s.count_requests("a", 10, 1).is_err());
        s.fail_writes();
        assert_eq!(s.count_requests("a", 10, 1).unwrap(), 1);
        assert!(s.add_request("a", 2).is_err());
        s.set_failing(false);
        assert!(s.add_request("a", 2).is_ok());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Req(u8, u64),
        Den(u8, u64),
        Pat(u8, u64),
        Cool(u8, u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..3, 0u64..200).prop_map(|(a, t)| Op::Req(a, t)),
            (0u8..3, 0u64..200).prop_map(|(a, t)| Op::Den(a, t)),
            (0u8..3, 0u64..200).prop_map(|(a, t)| Op::Pat(a, t)),
            (0u8..3, 0u64..400).prop_map(|(a, t)| Op::Cool(a, t)),
        ]
    }

    fn apply(s: &dyn TraceStore, op: &Op) {
        let agent = |a: u8| format!("agent-{a}");
        let key = |a: u8| pattern_key(&agent(a), &"d.x".parse().unwrap(), "r").unwrap();
        match *op {
            Op::Req(a, t) => s.add_request(&agent(a), t).unwrap(),
            Op::Den(a, t) => s.add_denial(&agent(a), t).unwrap(),
            Op::Pat(a, t) => s.add_pattern(&key(a), t).unwrap(),
            Op::Cool(a, t) => s.set_cooldown(&agent(a), t).unwrap(),
        }
    }

    fn snapshot(s: &dyn TraceStore, agent: u8, w: u64, now: u64) -> (u64, u64, u64, bool) {
        let name = format!("agent-{agent}");
        let key = pattern_key(&name, &"d.x".parse().unwrap(), "r").unwrap();
        (
            s.count_requests(&name, w, now).unwrap(),
            s.count_denials(&name, w, now).unwrap(),
            s.count_pattern(&key, w, now).unwrap(),
            s.cooldown_active(&name, now).unwrap(),
        )
    }

    proptest! {
        #[test]
        fn counts_never_shrink(ops in prop::collection::vec(op(), 1..60), w in 1u64..120, now in 0u64..220) {
            let s = InMemoryStore::new();
            let mut prev = [(0, 0, 0); 3];
            for o in &ops {
                apply(&s, o);
                for a in 0..3u8 {
                    let (r, d, p, _) = snapshot(&s, a, w, now);
                    let cur = (r, d, p);
                    prop_assert!(cur.0 >= prev[a as usize].0 && cur.1 >= prev[a as usize].1 && cur.2 >= prev[a as usize].2);
                    prev[a as usize] = cur;
                }
            }
        }

        #[test]
        fn counts_match_brute_force(ts in prop::collection::vec(0u64..200, 0..40), w in 1u64..120, now in 0u64..220) {
            let s = InMemoryStore::new();
            for &t in &ts { s.add_request("a", t).unwrap(); }
            let expected = ts.iter().filter(|&&t| t > now.saturating_sub(w) || (now < w && t <= now)).filter(|&&t| t <= now).count() as u64;
            prop_assert_eq!(s.count_requests("a", w, now).unwrap(), expected);
        }

        #[test]
        fn agents_are_isolated(ops in prop::collection::vec(op(), 0..60), w in 1u64..120, now in 0u64..220) {
            // Writes for agents 1 and 2 never change agent 0's reads.
            let only_a: Vec<Op> = ops.iter().filter(|o| matches!(o, Op::Req(0, _) | Op::Den(0, _) | Op::Pat(0, _) | Op::Cool(0, _))).cloned().collect();
            let s_all = InMemoryStore::new();
            let s_a = InMemoryStore::new();
            for o in &ops { apply(&s_all, o); }
            for o in &only_a { apply(&s_a, o); }
            prop_assert_eq!(snapshot(&s_all, 0, w, now), snapshot(&s_a, 0, w, now));
        }

        #[test]
        fn delayed_store_is_transparent(ops in prop::collection::vec(op(), 0..40), w in 1u64..120, now in 0u64..220) {
            let plain = InMemoryStore::new();
            let delayed = DelayedStore::new(InMemoryStore::new(), Duration::ZERO);
            for o in &ops { apply(&plain, o); apply(&delayed, o); }
            for a in 0..3u8 {
                prop_assert_eq!(snapshot(&plain, a, w, now), snapshot(&delayed, a, w, now));
            }
        }
    }

    #[test]
    fn delayed_store_waits() {
        let s = DelayedStore::new(InMemoryStore::new(), Duration::from_millis(2));
        let start = std::time::Instant::now();
        s.count_requests("a", 10, 10).unwrap();
        s.add_request("a", 10).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(4));
        assert_eq!(s.inner().count_requests("a", 10, 10).unwrap(), 1);
    }
}
