//! Declarative multi-step sequence vectors and their runner.

use crate::contract::{process, ProcessError, UpdateOrdering};
use crate::policy::{Capability, ContextFlag, HistoryFlag, PolicyConfig, PolicyError, PolicyOverrides, ResourceClass};
use crate::risk::{Decision, EvalRequest};
use crate::store::InMemoryStore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

/// Fixed clock origin; step timestamps are `EPOCH0 + timestamp_offset_s`.
pub const EPOCH0: u64 = 1_700_000_000;

#[derive(Debug, thiserror::Error)]
pub enum VectorError {
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error("vector {vector_id}: {message}")]
    Invalid { vector_id: String, message: String },
    #[error("vector {vector_id}: policy overrides rejected: {source}")]
    Policy { vector_id: String, source: PolicyError },
    #[error("vector {vector_id} step {step}: {source}")]
    Step { vector_id: String, step: usize, source: ProcessError },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub agent_id: String,
    pub capability: Capability,
    pub resource: String,
    pub resource_class: ResourceClass,
    pub autonomy_level: u8,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub context_flags: BTreeSet<ContextFlag>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub history_flags: BTreeSet<HistoryFlag>,
    pub timestamp_offset_s: i64,
}

impl StepRequest {
    pub fn at(&self, epoch0: u64) -> EvalRequest {
        EvalRequest {
            agent_id: self.agent_id.clone(),
            capability: self.capability.clone(),
            resource: self.resource.clone(),
            resource_class: self.resource_class,
            autonomy_level: self.autonomy_level,
            context_flags: self.context_flags.clone(),
            history_flags: self.history_flags.clone(),
            timestamp: epoch0 + self.timestamp_offset_s as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub decision: Decision,
    /// Not compared for COOLDOWN_ACTIVE, where the score is a sentinel.
    #[serde(default, alias = "rs_final", skip_serializing_if = "Option::is_none")]
    pub risk_score: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorStep {
    pub request: StepRequest,
    pub expected: Expected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceVector {
    pub vector_id: String,
    #[serde(default)]
    pub ordering: UpdateOrdering,
    #[serde(default, skip_serializing_if = "PolicyOverrides::is_empty")]
    pub policy_overrides: PolicyOverrides,
    pub steps: Vec<VectorStep>,
}

impl SequenceVector {
    pub fn validate(&self) -> Result<(), VectorError> {
        let invalid = |message: String| VectorError::Invalid { vector_id: self.vector_id.clone(), message };
        if self.vector_id.is_empty() {
            return Err(invalid("vector_id must not be empty".into()));
        }
        if self.steps.is_empty() {
            return Err(invalid("at least one step is required".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.request.timestamp_offset_s < 0 {
                return Err(invalid(format!("step {i}: negative timestamp_offset_s")));
            }
            if s.expected.decision != Decision::CooldownActive && s.expected.risk_score.is_none() {
                return Err(invalid(format!("step {i}: risk_score is required unless COOLDOWN_ACTIVE")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Overall {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub decision: Decision,
    pub risk_score: u32,
    pub expected: Expected,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub vector_id: String,
    pub steps: Vec<StepReport>,
    pub overall: Overall,
    pub strict: bool,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.overall == Overall::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<RunReport>,
    pub passed: usize,
    pub total: usize,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }

    /// `"<passed>/<total> PASS"`.
    pub fn summary(&self) -> String {
        format!("{}/{} PASS", self.passed, self.total)
    }
}

/// Runs one vector against a fresh store. In strict mode the first mismatch
/// ends the run; otherwise every step runs.
pub fn run_vector(vec: &SequenceVector, base_policy: &PolicyConfig, strict: bool) -> Result<RunReport, VectorError> {
    vec.validate()?;
    let policy = if vec.policy_overrides.is_empty() {
        base_policy.clone()
    } else {
        base_policy
            .with_overrides(&vec.policy_overrides)
            .map_err(|source| VectorError::Policy { vector_id: vec.vector_id.clone(), source })?
    };
    let store = InMemoryStore::new();
    let mut steps = Vec::with_capacity(vec.steps.len());
    for (index, step) in vec.steps.iter().enumerate() {
        let req = step.request.at(EPOCH0);
        let out = process(&req, &store, &policy, vec.ordering)
            .map_err(|source| VectorError::Step { vector_id: vec.vector_id.clone(), step: index, source })?;
        let r = out.result;
        let pass = r.decision == step.expected.decision
            && (r.decision == Decision::CooldownActive || step.expected.risk_score == Some(r.rs_final));
        steps.push(StepReport { index, decision: r.decision, risk_score: r.rs_final, expected: step.expected.clone(), pass });
        if strict && !pass {
            break;
        }
    }
    let ok = steps.len() == vec.steps.len() && steps.iter().all(|s| s.pass);
    Ok(RunReport {
        vector_id: vec.vector_id.clone(),
        steps,
        overall: if ok { Overall::Pass } else { Overall::Fail },
        strict,
    })
}

pub fn run_suite(vectors: &[SequenceVector], base_policy: &PolicyConfig, strict: bool) -> Result<SuiteReport, VectorError> {
    let reports = vectors.iter().map(|v| run_vector(v, base_policy, strict)).collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().filter(|r| r.passed()).count();
    Ok(SuiteReport { total: reports.len(), passed, reports })
}

/// Parses vector text: a single object, an array of objects, or nothing.
pub fn parse_suite(text: &str, origin: &str) -> Result<Vec<SequenceVector>, VectorError> {
    let load = |message: String| VectorError::Load { path: origin.to_string(), message };
    let trimmed = text.trim_start();
    let vectors: Vec<SequenceVector> = if trimmed.is_empty() {
        Vec::new()
    } else if trimmed.starts_with('[') {
        serde_json::from_str(text).map_err(|e| load(e.to_string()))?
    } else {
        vec![serde_json::from_str(text).map_err(|e| load(e.to_string()))?]
    };
    for v in &vectors {
        v.validate().map_err(|e| load(e.to_string()))?;
    }
    Ok(vectors)
}

/// Loads a vector file, or every `*.json` file in a directory (sorted by name).
/// Vector ids must be unique across the result.
pub fn load_suite(path: impl AsRef<Path>) -> Result<Vec<SequenceVector>, VectorError> {
    let path = path.as_ref();
    let io = |p: &Path, e: std::io::Error| VectorError::Load { path: p.display().to_string(), message: e.to_string() };
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut fs = std::fs::read_dir(path)
            .map_err(|e| io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect::<Vec<_>>();
        fs.sort();
        fs
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| io(&f, e))?;
        out.extend(parse_suite(&text, &f.display().to_string())?);
    }
    check_unique(&out, &path.display().to_string())?;
    Ok(out)
}

fn check_unique(vectors: &[SequenceVector], origin: &str) -> Result<(), VectorError> {
    let mut seen = HashSet::new();
    for v in vectors {
        if !seen.insert(v.vector_id.as_str()) {
            return Err(VectorError::Load {
                path: origin.to_string(),
                message: format!("duplicate vector_id {}", v.vector_id),
            });
        }
    }
    Ok(())
}

const BUNDLED: [(&str, &str); 5] = [
    ("SEQ-BENIGN-001", include_str!("../vectors/sequence/SEQ-BENIGN-001.json")),
    ("SEQ-BOUNDARY-001", include_str!("../vectors/sequence/SEQ-BOUNDARY-001.json")),
    ("SEQ-PRIVJUMP-001", include_str!("../vectors/sequence/SEQ-PRIVJUMP-001.json")),
    ("SEQ-FANOM-RULE3-001", include_str!("../vectors/sequence/SEQ-FANOM-RULE3-001.json")),
    ("SEQ-COOLDOWN-001", include_str!("../vectors/sequence/SEQ-COOLDOWN-001.json")),
];

/// The five sequence vectors shipped with the crate.
pub fn bundled_suite() -> Vec<SequenceVector> {
    BUNDLED
        .iter()
        .flat_map(|(name, text)| parse_suite(text, name).expect("bundled vectors are valid"))
        .collect()
}
