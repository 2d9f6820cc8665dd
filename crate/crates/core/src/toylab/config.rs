use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven projection types targeted by adapters, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleType {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl ModuleType {
    pub const ALL: [ModuleType; 7] = [
        ModuleType::QProj,
        ModuleType::KProj,
        ModuleType::VProj,
        ModuleType::OProj,
        ModuleType::GateProj,
        ModuleType::UpProj,
        ModuleType::DownProj,
    ];

    pub const ATTENTION: [ModuleType; 4] = [
        ModuleType::QProj,
        ModuleType::KProj,
        ModuleType::VProj,
        ModuleType::OProj,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleType::QProj => "q_proj",
            ModuleType::KProj => "k_proj",
            ModuleType::VProj => "v_proj",
            ModuleType::OProj => "o_proj",
            ModuleType::GateProj => "gate_proj",
            ModuleType::UpProj => "up_proj",
            ModuleType::DownProj => "down_proj",
        }
    }

    pub fn is_attention(self) -> bool {
        self.index() < 4
    }

    /// Parent block in the PEFT naming scheme.
    pub fn block(self) -> &'static str {
        if self.is_attention() {
            "self_attn"
        } else {
            "mlp"
        }
    }
}

impl FromStr for ModuleType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleType::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown module type `{s}`")))
    }
}

/// `(layer, module type)` address of a targetable weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModulePath {
    pub layer: usize,
    pub module: ModuleType,
}

const PEFT_PREFIX: &str = "base_model.model.model.layers.";

impl ModulePath {
    pub fn new(layer: usize, module: ModuleType) -> Self {
        Self { layer, module }
    }

    /// `base_model.model.model.layers.{l}.{block}.{name}`
    pub fn peft_prefix(&self) -> String {
        format!(
            "{PEFT_PREFIX}{}.{}.{}",
            self.layer,
            self.module.block(),
            self.module.name()
        )
    }

    /// Parses a PEFT tensor name, returning the path and the trailing
    /// component (`lora_A.weight`, `lora_B.weight`, ...).
    pub fn parse_tensor_name(name: &str) -> Option<(ModulePath, &str)> {
        let rest = name.strip_prefix(PEFT_PREFIX)?;
        let (layer, rest) = rest.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        let (block, rest) = rest.split_once('.')?;
        let (module, tail) = rest.split_once('.')?;
        let module: ModuleType = module.parse().ok()?;
        if module.block() != block {
            return None;
        }
        Some((ModulePath { layer, module }, tail))
    }
}

impl fmt::Display for ModulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.module.name())
    }
}

/// Shape of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("model config field `{name}` must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::arg(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every targetable path, layer-major then module order.
    pub fn module_paths(&self) -> Vec<ModulePath> {
        (0..self.n_layers)
            .flat_map(|l| ModuleType::ALL.into_iter().map(move |m| ModulePath::new(l, m)))
            .collect()
    }

    /// `(n, m)` = (output, input) features of the weight at `path`.
    pub fn module_shape(&self, module: ModuleType) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match module {
            ModuleType::QProj | ModuleType::KProj | ModuleType::VProj | ModuleType::OProj => (d, d),
            ModuleType::GateProj | ModuleType::UpProj => (f, d),
            ModuleType::DownProj => (d, f),
        }
    }

    pub fn contains(&self, path: ModulePath) -> bool {
        path.layer < self.n_layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_28_paths() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let paths = cfg.module_paths();
        assert_eq!(paths.len(), 28);
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(sorted, paths);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 65,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Argument(_))));
    }

    #[test]
    fn peft_names_round_trip() {
        for path in ModelConfig::default().module_paths() {
            let name = format!("{}.lora_A.weight", path.peft_prefix());
            let (parsed, tail) = ModulePath::parse_tensor_name(&name).unwrap();
            assert_eq!(parsed, path);
            assert_eq!(tail, "lora_A.weight");
        }
        assert!(ModulePath::parse_tensor_name("base_model.model.model.layers.0.mlp.q_proj.lora_A.weight").is_none());
        assert!(ModulePath::parse_tensor_name("base_model.model.lm_head.lora_A.weight").is_none());
    }
}
