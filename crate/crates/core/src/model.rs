//! Model presets and the per-layer GEMM shapes they imply.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dimensions of one decoder layer with multi-head attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelPreset {
    pub name: String,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn: usize,
}

pub const PRESET_NAMES: [&str; 4] = ["llama2-7b", "llama2-13b", "opt-6.7b", "chatglm2-6b-shape"];

impl ModelPreset {
    pub fn by_name(name: &str) -> Result<Self> {
        let (hidden, n_heads, ffn) = match name {
            "llama2-7b" => (4096, 32, 11008),
            "llama2-13b" => (5120, 40, 13824),
            "opt-6.7b" => (4096, 32, 16384),
            "chatglm2-6b-shape" => (4096, 32, 13696),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model {name:?}, expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(Self { name: name.into(), hidden, n_heads, ffn })
    }

    /// Divides hidden size, head count and FFN width by `scale`, keeping the
    /// head dimension and the ratios between the four GEMM shapes.
    pub fn scaled(&self, scale: usize) -> Result<Self> {
        if scale == 0
            || !self.hidden.is_multiple_of(scale)
            || !self.n_heads.is_multiple_of(scale)
            || !self.ffn.is_multiple_of(scale)
        {
            return Err(Error::InvalidArgument(format!(
                "scale {scale} must divide hidden {}, heads {} and ffn {} of {}",
                self.hidden, self.n_heads, self.ffn, self.name
            )));
        }
        Ok(Self {
            name: self.name.clone(),
            hidden: self.hidden / scale,
            n_heads: self.n_heads / scale,
            ffn: self.ffn / scale,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// `(op, N, K)` for the four weight matrices of the layer.
    pub fn gemm_shapes(&self) -> [(LayerOp, usize, usize); 4] {
        let (d, f) = (self.hidden, self.ffn);
        [(LayerOp::Kqv, 3 * d, d), (LayerOp::OProj, d, d), (LayerOp::Ffn1, f, d), (LayerOp::Ffn2, d, f)]
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::by_name(s)
    }
}

/// The GEMMs of one decoder layer, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerOp {
    Kqv,
    OProj,
    Ffn1,
    Ffn2,
}

impl fmt::Display for LayerOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerOp::Kqv => "kqv",
            LayerOp::OProj => "o_proj",
            LayerOp::Ffn1 => "ffn1",
            LayerOp::Ffn2 => "ffn2",
        })
    }
}

/// One decode step: a preset, a batch of `batch` new tokens and a KV cache
/// that holds `seq_len` positions once the new token is appended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub model: ModelPreset,
    pub batch: usize,
    pub seq_len: usize,
}

impl LayerConfig {
    pub fn new(model: ModelPreset, batch: usize, seq_len: usize) -> Result<Self> {
        if model.hidden == 0 || model.n_heads == 0 || model.ffn == 0 || !model.hidden.is_multiple_of(model.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden {} must be a positive multiple of heads {} and ffn {} positive",
                model.hidden, model.n_heads, model.ffn
            )));
        }
        if batch == 0 || seq_len == 0 {
            return Err(Error::InvalidArgument(format!("batch {batch} and seq_len {seq_len} must be >= 1")));
        }
        Ok(Self { model, batch, seq_len })
    }

    /// Preset `name` shrunk by `scale`; the sequence length shrinks by the
    /// same factor, rounding up.
    pub fn preset(name: &str, batch: usize, seq_len: usize, scale: usize) -> Result<Self> {
        let model = ModelPreset::by_name(name)?.scaled(scale)?;
        Self::new(model, batch, seq_len.div_ceil(scale))
    }
}
