use acp_admission::canonical::{canonical_bytes, sha256_hex};
use acp_admission::conformance::{bundled_suite, load_suite, run_suite};
use acp_admission::contract::{process, UpdateOrdering};
use acp_admission::ledger::{read_ndjson, record_outcome, verify_chain, LedgerChain, SigningKey};
use acp_admission::policy::{default_policy, Capability, ContextFlag, EngineVersion, HistoryFlag, PolicyConfig, ResourceClass};
use acp_admission::risk::{evaluate, Decision, EvalRequest, Rule, REASON_FAIL_CLOSED, RS_MAX};
use acp_admission::store::{in_window, FaultInjectingStore, InMemoryStore, NullStore};
use proptest::prelude::*;
use proptest::sample::subsequence;
use std::collections::BTreeSet;

const CAPS: [&str; 8] = [
    "data.read",
    "data.write",
    "financial.transfer",
    "financial.payment",
    "admin.users",
    "ops.deploy",
    "acp:cap:data.read",
    "unknown.verb",
];
const CLASSES: [ResourceClass; 3] = [ResourceClass::Public, ResourceClass::Sensitive, ResourceClass::Restricted];
const CTX: [ContextFlag; 4] = [ContextFlag::ExternalIp, ContextFlag::OffHours, ContextFlag::GeoOutside, ContextFlag::UntrustedDevice];
const HIST: [HistoryFlag; 2] = [HistoryFlag::RecentDenial, HistoryFlag::AnomalousFrequency];

fn request() -> impl Strategy<Value = EvalRequest> {
    (
        prop::sample::select(&CAPS[..]),
        0..4usize,
        prop::sample::select(&CLASSES[..]),
        0u8..=4,
        subsequence(CTX.to_vec(), 0..=4),
        subsequence(HIST.to_vec(), 0..=2),
        0u64..100_000,
    )
        .prop_map(|(cap, res, class, level, ctx, hist, ts)| {
            let mut r = EvalRequest::new("agent", Capability::parse(cap).unwrap(), format!("r{res}"), class, ts);
            r.autonomy_level = level;
            r.context_flags = ctx.into_iter().collect();
            r.history_flags = hist.into_iter().collect();
            r
        })
}

fn trace() -> impl Strategy<Value = Vec<EvalRequest>> {
    prop::collection::vec((request(), prop::sample::select(vec![0u64, 0, 1, 10, 200, 700])), 1..40).prop_map(|steps| {
        let mut t = 1_000_000;
        steps
            .into_iter()
            .map(|(mut r, dt)| {
                t += dt;
                r.timestamp = t;
                r
            })
            .collect()
    })
}

fn version() -> impl Strategy<Value = PolicyConfig> {
    prop::sample::select(vec![EngineVersion::Risk2, EngineVersion::Risk3])
        .prop_map(|v| default_policy().with_engine_version(v))
}

fn ordering() -> impl Strategy<Value = UpdateOrdering> {
    prop::sample::select(vec![UpdateOrdering::EvaluateThenUpdate, UpdateOrdering::UpdateThenEvaluate])
}

proptest! {
    #[test]
    fn score_is_clamped_sum_of_factors(tr in trace(), policy in version(), ord in ordering()) {
        let store = InMemoryStore::new();
        for req in &tr {
            let out = process(req, &store, &policy, ord).unwrap();
            let r = &out.result;
            if r.decision == Decision::CooldownActive {
                prop_assert_eq!(r.rs_final, 0);
                continue;
            }
            let b = &r.breakdown;
            prop_assert!(r.rs_final <= RS_MAX);
            prop_assert_eq!(r.rs_final, b.sum().min(RS_MAX));
            prop_assert_eq!(b.f_anom, b.rules_fired.iter().map(|x: &Rule| x.bonus()).sum::<u32>());
            prop_assert_eq!(&r.policy_hash, policy.policy_hash());
        }
    }

    #[test]
    fn stateless_store_never_fires_rules(req in request(), policy in version()) {
        let r = evaluate(&req, &NullStore, &policy).unwrap();
        prop_assert_eq!(r.breakdown.f_anom, 0);
        prop_assert!(r.breakdown.rules_fired.is_empty());
    }

    #[test]
    fn extra_flags_never_lower_the_score(req in request(), ctx in subsequence(CTX.to_vec(), 0..=4), hist in subsequence(HIST.to_vec(), 0..=2)) {
        let policy = default_policy();
        let before = evaluate(&req, &NullStore, &policy).unwrap().rs_final;
        let mut more = req.clone();
        more.context_flags.extend(ctx);
        more.history_flags.extend(hist);
        prop_assert!(evaluate(&more, &NullStore, &policy).unwrap().rs_final >= before);
    }

    #[test]
    fn autonomy_zero_is_never_approved(mut req in request(), tr in trace()) {
        let policy = default_policy();
        let store = InMemoryStore::new();
        for r in &tr {
            process(r, &store, &policy, UpdateOrdering::EvaluateThenUpdate).unwrap();
        }
        req.autonomy_level = 0;
        req.timestamp = tr.last().unwrap().timestamp;
        prop_assert_ne!(evaluate(&req, &store, &policy).unwrap().decision, Decision::Approved);
    }

    #[test]
    fn store_failure_fails_closed(req in request(), policy in version()) {
        let store = FaultInjectingStore::new(InMemoryStore::new());
        store.set_failing(true);
        let r = evaluate(&req, &store, &policy).unwrap();
        prop_assert_eq!(r.decision, Decision::Denied);
        prop_assert_eq!(r.reason.as_str(), REASON_FAIL_CLOSED);
    }

    #[test]
    fn windows_are_half_open(t in 0u64..1_000_000, w in 1u64..100_000, now in 0u64..1_000_000) {
        prop_assert_eq!(in_window(t, w, now), t <= now && t + w > now);
    }

    #[test]
    fn ledger_ndjson_round_trip(tr in trace(), signed in any::<bool>()) {
        let key = SigningKey::from_bytes(&[3u8; 32]);
        let key = signed.then_some(&key);
        let policy = default_policy();
        let store = InMemoryStore::new();
        let mut chain = LedgerChain::new();
        for req in &tr {
            let out = process(req, &store, &policy, UpdateOrdering::EvaluateThenUpdate).unwrap();
            record_outcome(&mut chain, &out, req, key).unwrap();
        }
        let mut buf = Vec::new();
        chain.write_ndjson(&mut buf).unwrap();
        let back = read_ndjson(&buf[..]).unwrap();
        prop_assert_eq!(&back, chain.events());
        prop_assert!(verify_chain(&back, key.map(|k| k.verifying_key()).as_ref()).is_ok());
    }

    #[test]
    fn canonical_form_ignores_formatting(map in prop::collection::btree_map("[a-z]{1,6}", any::<i64>(), 0..8)) {
        let compact = serde_json::to_string(&map).unwrap();
        let pretty = serde_json::to_string_pretty(&map).unwrap();
        let a = canonical_bytes(&serde_json::from_str(&compact).unwrap()).unwrap();
        let b = canonical_bytes(&serde_json::from_str(&pretty).unwrap()).unwrap();
        prop_assert_eq!(sha256_hex(&a), sha256_hex(&b));
    }
}

#[test]
fn policy_json_round_trip_keeps_hash() {
    for v in [EngineVersion::Risk2, EngineVersion::Risk3] {
        let p = default_policy().with_engine_version(v);
        let text = serde_json::to_string_pretty(&p.to_json()).unwrap();
        assert_eq!(PolicyConfig::from_json(&text).unwrap().policy_hash(), p.policy_hash());
    }
    assert_ne!(
        default_policy().policy_hash(),
        default_policy().with_engine_version(EngineVersion::Risk3).policy_hash()
    );
}

#[test]
fn vector_directory_matches_bundled_suite() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/vectors/sequence");
    let from_disk = load_suite(dir).unwrap();
    let bundled = bundled_suite();
    let ids = |s: &[_]| s.iter().map(|v: &acp_admission::conformance::SequenceVector| v.vector_id.clone()).collect::<BTreeSet<_>>();
    assert_eq!(ids(&from_disk), ids(&bundled));
    assert!(run_suite(&from_disk, &default_policy(), true).unwrap().all_passed());
}
