//! Model architectures and the sizing formulas everything else derives from:
//! weight bytes, KV-cache bytes per token and forward-pass FLOPs per token.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture constants of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Nominal parameter count.
    pub n_params: u64,
    pub n_layers: u64,
    pub n_heads: u64,
    pub head_dim: u64,
    pub hidden: u64,
    #[serde(default = "default_bytes_per_value")]
    pub bytes_per_value: u64,
}

fn default_bytes_per_value() -> u64 {
    2
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        n_params: u64,
        n_layers: u64,
        n_heads: u64,
        head_dim: u64,
        hidden: u64,
    ) -> Self {
        Self {
            name: name.into(),
            n_params,
            n_layers,
            n_heads,
            head_dim,
            hidden,
            bytes_per_value: 2,
        }
    }

    /// Checks the hard invariants. Returns a list of warnings for soft ones
    /// (currently only `n_heads * head_dim != hidden`).
    pub fn validate(&self) -> Result<Vec<String>> {
        let invalid = |reason: &str| Error::InvalidModel {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.hidden == 0 {
            return Err(invalid("layers, heads, head_dim and hidden must be positive"));
        }
        if !matches!(self.bytes_per_value, 1 | 2 | 4) {
            return Err(invalid("bytes_per_value must be 1, 2 or 4"));
        }
        let mut warnings = Vec::new();
        if self.n_heads * self.head_dim != self.hidden {
            warnings.push(format!(
                "{}: n_heads * head_dim = {} differs from hidden = {}",
                self.name,
                self.n_heads * self.head_dim,
                self.hidden
            ));
        }
        Ok(warnings)
    }

    pub fn weights_bytes(&self) -> u64 {
        weights_bytes(self)
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        kv_bytes_per_token(self)
    }

    pub fn flops_per_token(&self, seq_len: u64) -> u64 {
        flops_per_token(self, seq_len)
    }
}

/// Parameter storage: `n_params * bytes_per_value`.
pub fn weights_bytes(model: &ModelSpec) -> u64 {
    model.n_params * model.bytes_per_value
}

/// Key and value vectors for one token across all layers:
/// `2 * bytes_per_value * hidden * n_layers`.
pub fn kv_bytes_per_token(model: &ModelSpec) -> u64 {
    2 * model.bytes_per_value * model.hidden * model.n_layers
}

/// Add-multiply FLOPs for one token attending over a sequence of `seq_len`
/// tokens: `2N + 6 L H Q T`.
pub fn flops_per_token(model: &ModelSpec, seq_len: u64) -> u64 {
    2 * model.n_params + 6 * model.n_layers * model.n_heads * model.head_dim * seq_len
}

/// The five OPT checkpoints, with nominal parameter counts.
pub fn builtin_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new("OPT-125M", 125_000_000, 12, 12, 64, 768),
        ModelSpec::new("OPT-1.3B", 1_300_000_000, 24, 32, 64, 2048),
        ModelSpec::new("OPT-2.7B", 2_700_000_000, 32, 32, 80, 2560),
        ModelSpec::new("OPT-6.7B", 6_700_000_000, 32, 32, 128, 4096),
        ModelSpec::new("OPT-13B", 13_000_000_000, 40, 40, 128, 5120),
    ]
}

/// Named collection of models. Always contains the built-in OPT entries;
/// user entries with the same name replace them.
#[derive(Debug, Clone)]
pub struct ModelCatalog {
    entries: BTreeMap<String, ModelSpec>,
    order: Vec<String>,
}

impl Default for ModelCatalog {
    fn default() -> Self {
        let mut catalog = Self {
            entries: BTreeMap::new(),
            order: Vec::new(),
        };
        for model in builtin_models() {
            catalog.insert_unchecked(model);
        }
        catalog
    }
}

impl ModelCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert_unchecked(&mut self, model: ModelSpec) {
        if !self.entries.contains_key(&model.name) {
            self.order.push(model.name.clone());
        }
        self.entries.insert(model.name.clone(), model);
    }

    /// Adds (or replaces) an entry, returning validation warnings.
    pub fn insert(&mut self, model: ModelSpec) -> Result<Vec<String>> {
        let warnings = model.validate()?;
        self.insert_unchecked(model);
        Ok(warnings)
    }

    pub fn get(&self, name: &str) -> Option<&ModelSpec> {
        self.entries.get(name)
    }

    pub fn resolve(&self, name: &str) -> Result<&ModelSpec> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("unknown model {name:?}")))
    }

    /// Entries in insertion order (built-ins first, smallest to largest).
    pub fn iter(&self) -> impl Iterator<Item = &ModelSpec> {
        self.order.iter().map(move |n| &self.entries[n])
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
