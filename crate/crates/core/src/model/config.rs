use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization applied to node→subgraph attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgraphActivation {
    Sparsemax,
    /// Dense variant, used to isolate the effect of the sparse projection.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Nodes per graph (PCC row length).
    pub n: usize,
    /// Token width.
    pub d: usize,
    pub heads: usize,
    /// Stacked hierarchical blocks.
    pub layers: usize,
    /// Subgraph token count.
    pub k: usize,
    pub dropout: f64,
    pub class_count: usize,
    /// Classifier hidden width as a multiple of `d`.
    pub ffn_multiplier: usize,
    pub init_std: f64,
    pub subgraph_activation: SubgraphActivation,
    /// Keep per-head node→subgraph maps in the trace.
    pub per_head_traces: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 200,
            d: 384,
            heads: 8,
            layers: 2,
            k: 8,
            dropout: 0.1,
            class_count: 2,
            ffn_multiplier: 4,
            init_std: 0.02,
            subgraph_activation: SubgraphActivation::Sparsemax,
            per_head_traces: false,
        }
    }
}

impl ModelConfig {
    /// The gradient-check model: n=6, d=8, K=3, 2 heads, 1 layer.
    pub fn tiny() -> Self {
        Self {
            n: 6,
            d: 8,
            heads: 2,
            layers: 1,
            k: 3,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::InvalidValue {
                key: format!("model.{key}"),
                msg: msg.to_string(),
            })
        };
        if self.n == 0 {
            return bad("n", "must be positive");
        }
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return bad("d", "must be a positive multiple of heads");
        }
        if self.k < 2 {
            return bad("k", "need at least 2 subgraph tokens");
        }
        if self.layers == 0 {
            return bad("layers", "need at least one layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.class_count < 2 {
            return bad("class_count", "need at least 2 classes");
        }
        if self.ffn_multiplier == 0 {
            return bad("ffn_multiplier", "must be positive");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std", "must be finite and non-negative");
        }
        Ok(())
    }
}
