//! Policy tables for the risk function.
//!
//! [`PolicyParams`] holds every tunable value; [`PolicyConfig`] is the sealed,
//! validated form carrying the derived `policy_hash`. The engine only ever
//! sees a `PolicyConfig`, so the hash always matches the tables in use.

use crate::canonical::{sha256_hex, to_canonical_bytes};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::path::Path;

pub const CAPABILITY_PREFIX: &str = "acp:cap:";
/// Key in `capability_base` used when no other pattern matches.
pub const FALLBACK_KEY: &str = "*";

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid capability {0:?}: expected [acp:cap:]<domain>.<action>")]
    InvalidCapability(String),
    #[error("invalid capability pattern {0:?}")]
    InvalidPattern(String),
    #[error("capability_base must contain the fallback entry \"*\"")]
    MissingFallback,
    #[error("window {0} must be strictly positive")]
    ZeroWindow(&'static str),
    #[error("thresholds for autonomy level {level} violate 0 <= approved_max < escalated_max <= 99")]
    BadThresholds { level: u8 },
    #[error("autonomy level {0} is outside 1..=4 or cannot carry thresholds")]
    BadAutonomyLevel(u8),
    #[error("missing thresholds for autonomy level {0}")]
    MissingThresholds(u8),
    #[error("cooldown_trigger_denials must be at least 1")]
    ZeroCooldownTrigger,
    #[error("policy document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("policy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("canonicalization: {0}")]
    Canonical(#[from] crate::canonical::CanonicalError),
}

/// An action capability, `acp:cap:<domain>.<action>`. The bare `<domain>.<action>`
/// spelling is accepted and normalized to the prefixed form.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Capability(String);

impl Capability {
    pub fn parse(raw: &str) -> Result<Self, PolicyError> {
        let tail = raw.strip_prefix(CAPABILITY_PREFIX).unwrap_or(raw);
        let mut parts = tail.split('.');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(d), Some(a), None) if valid_segment(d) && valid_segment(a) => {
                Ok(Self(format!("{CAPABILITY_PREFIX}{tail}")))
            }
            _ => Err(PolicyError::InvalidCapability(raw.to_string())),
        }
    }

    /// Full `acp:cap:` form.
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The `<domain>.<action>` tail.
    pub fn tail(&self) -> &str {
        &self.0[CAPABILITY_PREFIX.len()..]
    }

    pub fn domain(&self) -> &str {
        self.tail().split_once('.').map(|(d, _)| d).unwrap_or_default()
    }

    pub fn action(&self) -> &str {
        self.tail().split_once('.').map(|(_, a)| a).unwrap_or_default()
    }
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s != "*" && !s.chars().any(|c| c.is_whitespace() || c == ':')
}

impl TryFrom<String> for Capability {
    type Error = PolicyError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Capability::parse(&value)
    }
}

impl std::str::FromStr for Capability {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::parse(s)
    }
}

impl From<Capability> for String {
    fn from(c: Capability) -> String {
        c.0
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Capability({})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceClass {
    Public,
    Sensitive,
    Restricted,
}

impl ResourceClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ResourceClass::Public => "public",
            ResourceClass::Sensitive => "sensitive",
            ResourceClass::Restricted => "restricted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextFlag {
    ExternalIp,
    OffHours,
    GeoOutside,
    UntrustedDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryFlag {
    RecentDenial,
    AnomalousFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngineVersion {
    #[serde(rename = "RISK_2_0")]
    Risk2,
    #[serde(rename = "RISK_3_0")]
    Risk3,
}

impl EngineVersion {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineVersion::Risk2 => "RISK_2_0",
            EngineVersion::Risk3 => "RISK_3_0",
        }
    }
}

impl fmt::Display for EngineVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EngineVersion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace(['-', '.'], "_").as_str() {
            "RISK_2_0" | "2" | "2_0" => Ok(EngineVersion::Risk2),
            "RISK_3_0" | "3" | "3_0" => Ok(EngineVersion::Risk3),
            other => Err(format!("unknown engine version {other:?}")),
        }
    }
}

/// Decision boundaries for one autonomy level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub approved_max: u32,
    pub escalated_max: u32,
}

impl Thresholds {
    pub const fn new(approved_max: u32, escalated_max: u32) -> Self {
        Self { approved_max, escalated_max }
    }

    fn is_valid(&self) -> bool {
        self.approved_max < self.escalated_max && self.escalated_max <= 99
    }
}

/// All user-settable policy fields. Serializes to the policy file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    /// Capability pattern → base score. Patterns are `domain.action`,
    /// `domain.*`, `*.action`, or the fallback `*`.
    pub capability_base: BTreeMap<String, u32>,
    pub resource_scores: BTreeMap<ResourceClass, u32>,
    pub ctx_weights: BTreeMap<ContextFlag, u32>,
    pub hist_weights: BTreeMap<HistoryFlag, u32>,
    pub rule1_threshold_n: u32,
    pub rule1_window_s: u64,
    pub rule2_threshold_x: u32,
    pub rule2_window_s: u64,
    pub rule3_threshold_y: u32,
    pub rule3_window_s: u64,
    pub cooldown_trigger_denials: u32,
    pub cooldown_trigger_window_s: u64,
    pub cooldown_period_s: u64,
    /// Keyed by autonomy level 1..=4. Level 0 never has thresholds.
    pub thresholds_by_autonomy: BTreeMap<u8, Thresholds>,
    pub engine_version: EngineVersion,
}

impl Default for PolicyParams {
    fn default() -> Self {
        let capability_base = [
            ("*.read", 0),
            ("*.write", 10),
            ("financial.payment", 35),
            ("financial.transfer", 35),
            ("admin.*", 60),
            (FALLBACK_KEY, 20),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let level2 = Thresholds::new(39, 69);
        Self {
            capability_base,
            resource_scores: BTreeMap::from([
                (ResourceClass::Public, 0),
                (ResourceClass::Sensitive, 15),
                (ResourceClass::Restricted, 45),
            ]),
            ctx_weights: BTreeMap::from([
                (ContextFlag::ExternalIp, 20),
                (ContextFlag::OffHours, 15),
                (ContextFlag::GeoOutside, 0),
                (ContextFlag::UntrustedDevice, 0),
            ]),
            hist_weights: BTreeMap::from([
                (HistoryFlag::RecentDenial, 0),
                (HistoryFlag::AnomalousFrequency, 0),
            ]),
            rule1_threshold_n: 10,
            rule1_window_s: 60,
            rule2_threshold_x: 3,
            rule2_window_s: 86_400,
            rule3_threshold_y: 3,
            rule3_window_s: 300,
            cooldown_trigger_denials: 3,
            cooldown_trigger_window_s: 600,
            cooldown_period_s: 600,
            thresholds_by_autonomy: (1..=4).map(|l| (l, level2)).collect(),
            engine_version: EngineVersion::Risk2,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        for pattern in self.capability_base.keys() {
            Pattern::parse(pattern)?;
        }
        if !self.capability_base.contains_key(FALLBACK_KEY) {
            return Err(PolicyError::MissingFallback);
        }
        for (name, w) in [
            ("rule1_window_s", self.rule1_window_s),
            ("rule2_window_s", self.rule2_window_s),
            ("rule3_window_s", self.rule3_window_s),
            ("cooldown_trigger_window_s", self.cooldown_trigger_window_s),
            ("cooldown_period_s", self.cooldown_period_s),
        ] {
            if w == 0 {
                return Err(PolicyError::ZeroWindow(name));
            }
        }
        if self.cooldown_trigger_denials == 0 {
            return Err(PolicyError::ZeroCooldownTrigger);
        }
        for (&level, t) in &self.thresholds_by_autonomy {
            if !(1..=4).contains(&level) {
                return Err(PolicyError::BadAutonomyLevel(level));
            }
            if !t.is_valid() {
                return Err(PolicyError::BadThresholds { level });
            }
        }
        for level in 1..=4u8 {
            if !self.thresholds_by_autonomy.contains_key(&level) {
                return Err(PolicyError::MissingThresholds(level));
            }
        }
        Ok(())
    }

    /// Applies a partial override: scalars replace, map entries merge.
    pub fn apply(&mut self, o: &PolicyOverrides) {
        if let Some(m) = &o.capability_base {
            self.capability_base.extend(m.iter().map(|(k, v)| (k.clone(), *v)));
        }
        if let Some(m) = &o.resource_scores {
            self.resource_scores.extend(m.iter().map(|(k, v)| (*k, *v)));
        }
        if let Some(m) = &o.ctx_weights {
            self.ctx_weights.extend(m.iter().map(|(k, v)| (*k, *v)));
        }
        if let Some(m) = &o.hist_weights {
            self.hist_weights.extend(m.iter().map(|(k, v)| (*k, *v)));
        }
        if let Some(m) = &o.thresholds_by_autonomy {
            self.thresholds_by_autonomy.extend(m.iter().map(|(k, v)| (*k, *v)));
        }
        macro_rules! scalar {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { self.$f = v; } )* };
        }
        scalar!(
            rule1_threshold_n,
            rule1_window_s,
            rule2_threshold_x,
            rule2_window_s,
            rule3_threshold_y,
            rule3_window_s,
            cooldown_trigger_denials,
            cooldown_trigger_window_s,
            cooldown_period_s,
            engine_version
        );
    }
}

/// Partial policy, as carried by sequence vectors and experiment configs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability_base: Option<BTreeMap<String, u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_scores: Option<BTreeMap<ResourceClass, u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctx_weights: Option<BTreeMap<ContextFlag, u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hist_weights: Option<BTreeMap<HistoryFlag, u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule1_threshold_n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule1_window_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule2_threshold_x: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule2_window_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule3_threshold_y: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule3_window_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_trigger_denials: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_trigger_window_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_period_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds_by_autonomy: Option<BTreeMap<u8, Thresholds>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_version: Option<EngineVersion>,
}

impl PolicyOverrides {
    pub fn is_empty(&self) -> bool {
        *self == PolicyOverrides::default()
    }
}

/// A validated policy together with its content hash. Immutable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyConfig {
    params: PolicyParams,
    policy_hash: String,
}

impl PolicyConfig {
    pub fn new(params: PolicyParams) -> Result<Self, PolicyError> {
        params.validate()?;
        let policy_hash = compute_policy_hash(&params)?;
        Ok(Self { params, policy_hash })
    }

    pub fn policy_hash(&self) -> &str {
        &self.policy_hash
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Copy of this policy with `overrides` applied and the hash recomputed.
    pub fn with_overrides(&self, overrides: &PolicyOverrides) -> Result<Self, PolicyError> {
        let mut params = self.params.clone();
        params.apply(overrides);
        Self::new(params)
    }

    pub fn with_engine_version(&self, version: EngineVersion) -> Self {
        let mut params = self.params.clone();
        params.engine_version = version;
        Self::new(params).expect("engine version does not affect validity")
    }

    /// Parses a policy document. A supplied `policy_hash` is discarded and
    /// recomputed; any other unknown key is rejected.
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let mut doc: serde_json::Value = serde_json::from_str(text)?;
        if let Some(obj) = doc.as_object_mut() {
            obj.remove("policy_hash");
        }
        Self::new(serde_json::from_value(doc)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Policy document including the derived hash.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.params).expect("policy serializes");
        v.as_object_mut()
            .expect("object")
            .insert("policy_hash".into(), self.policy_hash.clone().into());
        v
    }

    pub fn thresholds(&self, level: u8) -> Option<Thresholds> {
        if level == 0 {
            return None;
        }
        self.params.thresholds_by_autonomy.get(&level).copied()
    }
}

impl Deref for PolicyConfig {
    type Target = PolicyParams;
    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        default_policy()
    }
}

pub fn default_policy() -> PolicyConfig {
    PolicyConfig::new(PolicyParams::default()).expect("defaults are valid")
}

/// SHA-256 over the canonical JSON form of every policy field except the hash itself.
pub fn compute_policy_hash(params: &PolicyParams) -> Result<String, PolicyError> {
    Ok(sha256_hex(&to_canonical_bytes(params)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pattern<'a> {
    Exact(&'a str, &'a str),
    Domain(&'a str),
    Action(&'a str),
    Fallback,
}

impl<'a> Pattern<'a> {
    fn parse(raw: &'a str) -> Result<Self, PolicyError> {
        let p = raw.strip_prefix(CAPABILITY_PREFIX).unwrap_or(raw);
        if p == FALLBACK_KEY {
            return Ok(Pattern::Fallback);
        }
        let bad = || PolicyError::InvalidPattern(raw.to_string());
        let (d, a) = p.split_once('.').ok_or_else(bad)?;
        if a.contains('.') {
            return Err(bad());
        }
        match (d, a) {
            ("*", "*") => Err(bad()),
            ("*", a) if valid_segment(a) => Ok(Pattern::Action(a)),
            (d, "*") if valid_segment(d) => Ok(Pattern::Domain(d)),
            (d, a) if valid_segment(d) && valid_segment(a) => Ok(Pattern::Exact(d, a)),
            _ => Err(bad()),
        }
    }

    /// Match rank; higher is more specific. `None` when the pattern does not apply.
    fn rank(&self, cap: &Capability) -> Option<(u8, usize)> {
        match *self {
            Pattern::Exact(d, a) if d == cap.domain() && a == cap.action() => Some((2, d.len() + a.len())),
            Pattern::Domain(d) if d == cap.domain() => Some((1, d.len())),
            Pattern::Action(a) if a == cap.action() => Some((1, a.len())),
            Pattern::Fallback => Some((0, 0)),
            _ => None,
        }
    }
}

/// Base score B(c): the most specific matching pattern wins, with longer literal
/// text breaking ties and the higher score breaking exact ties.
pub fn lookup_base(policy: &PolicyParams, cap: &Capability) -> u32 {
    policy
        .capability_base
        .iter()
        .filter_map(|(k, &v)| Pattern::parse(k).ok()?.rank(cap).map(|r| (r, v)))
        .max()
        .map(|(_, v)| v)
        .unwrap_or(0)
}
