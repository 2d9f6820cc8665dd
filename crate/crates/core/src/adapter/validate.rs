use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LoraAdapter, RawAdapter};
use crate::toylab::{ModelConfig, ModulePath};

/// Largest raw A/B entry accepted by default.
pub const DEFAULT_MAGNITUDE_CAP: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RejectReason {
    ShapeMismatch { module: String, detail: String },
    NanOrInf { tensor: String },
    AbnormalMagnitude { tensor: String, max_abs: f64 },
    UnsupportedFeature { detail: String },
}

impl RejectReason {
    pub fn kind(&self) -> &'static str {
        match self {
            RejectReason::ShapeMismatch { .. } => "shape-mismatch",
            RejectReason::NanOrInf { .. } => "nan-or-inf",
            RejectReason::AbnormalMagnitude { .. } => "abnormal-magnitude",
            RejectReason::UnsupportedFeature { .. } => "unsupported-feature",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::ShapeMismatch { module, detail } => write!(f, "shape-mismatch at {module}: {detail}"),
            RejectReason::NanOrInf { tensor } => write!(f, "nan-or-inf in {tensor}"),
            RejectReason::AbnormalMagnitude { tensor, max_abs } => {
                write!(f, "abnormal-magnitude in {tensor}: max |x| = {max_abs:e}")
            }
            RejectReason::UnsupportedFeature { detail } => write!(f, "unsupported-feature: {detail}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub adapter: String,
    pub verdict: Verdict,
    pub reasons: Vec<RejectReason>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }

    pub fn has(&self, kind: &str) -> bool {
        self.reasons.iter().any(|r| r.kind() == kind)
    }
}

/// Checks an adapter that is already in memory.
pub fn validate_adapter(adapter: &LoraAdapter, cfg: &ModelConfig, magnitude_cap: f64) -> ValidationReport {
    validate_raw(&adapter.to_raw(), cfg, magnitude_cap)
}

/// Checks container contents and sidecar against the base model. Every
/// problem found is listed; nothing is thrown.
pub fn validate_raw(raw: &RawAdapter, cfg: &ModelConfig, magnitude_cap: f64) -> ValidationReport {
    let mut reasons = Vec::new();
    for detail in raw.sidecar.unsupported_features() {
        reasons.push(RejectReason::UnsupportedFeature { detail });
    }
    if raw.sidecar.rank == 0 {
        reasons.push(RejectReason::ShapeMismatch {
            module: "*".into(),
            detail: "declared rank is 0".into(),
        });
    }
    let rank = raw.sidecar.rank;
    let mut seen: BTreeMap<ModulePath, (bool, bool)> = BTreeMap::new();
    for (name, t) in &raw.container.tensors {
        let Some((path, tail)) = ModulePath::parse_tensor_name(name) else {
            reasons.push(RejectReason::UnsupportedFeature {
                detail: format!("tensor `{name}` does not target a supported projection"),
            });
            continue;
        };
        if !cfg.contains(path) {
            reasons.push(RejectReason::ShapeMismatch {
                module: path.to_string(),
                detail: format!("layer {} beyond the model's {} layers", path.layer, cfg.n_layers),
            });
            continue;
        }
        let (n, m) = cfg.module_shape(path.module);
        let (expected, slot) = match tail {
            "lora_A.weight" => (vec![rank, m], 0),
            "lora_B.weight" => (vec![n, rank], 1),
            _ => {
                reasons.push(RejectReason::UnsupportedFeature {
                    detail: format!("tensor `{name}` is not a lora_A/lora_B weight"),
                });
                continue;
            }
        };
        let entry = seen.entry(path).or_default();
        if slot == 0 {
            entry.0 = true;
        } else {
            entry.1 = true;
        }
        if t.shape != expected {
            reasons.push(RejectReason::ShapeMismatch {
                module: path.to_string(),
                detail: format!("`{tail}` has shape {:?}, expected {:?}", t.shape, expected),
            });
        }
        if t.values.iter().any(|x| !x.is_finite()) {
            reasons.push(RejectReason::NanOrInf { tensor: name.clone() });
        } else {
            let max_abs = t.values.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            if max_abs > magnitude_cap {
                reasons.push(RejectReason::AbnormalMagnitude {
                    tensor: name.clone(),
                    max_abs,
                });
            }
        }
    }
    for (path, (has_a, has_b)) in seen {
        if !(has_a && has_b) {
            reasons.push(RejectReason::ShapeMismatch {
                module: path.to_string(),
                detail: "missing one half of the A/B pair".into(),
            });
        }
    }
    let verdict = if reasons.is_empty() {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    };
    ValidationReport {
        adapter: raw.name.clone(),
        verdict,
        reasons,
    }
}
