//! Mesh Transformer: patch and positional embeddings, pre-norm ViT blocks,
//! the masked-autoencoder decoder with its reconstruction heads, and the
//! classification and segmentation heads.

mod model;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    classify_batch_forward, classify_forward, pooled_forward, embed_patches, embed_positions, encode, encode_tokens, pretrain_forward, segment_forward,
    transformer_block, Binding, Bound, PretrainOutputs, SegmentOutputs, Tokens, POOL_EPS,
};
pub use params::{
    backbone_shapes, classifier_shapes, decoder_shapes, param_count, segmentation_shapes, MeshMae, ParamStore, INIT_STD,
};

use crate::autodiff::AutodiffError;

/// Width of the per-face embedding used by the segmentation head.
pub const FACE_EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("bad model input: {0}")]
    Input(String),
}

/// How patch positions enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosStrategy {
    /// Learned table indexed by token position.
    #[serde(rename = "a_learnable")]
    Learnable,
    /// MLP on every face centre, max-pooled over the patch.
    #[serde(rename = "b_per_face_maxpool")]
    PerFaceMaxPool,
    /// MLP on the 64 face centres flattened to one vector.
    #[serde(rename = "c_flatten_64x3")]
    Flatten,
    /// MLP on the patch centre.
    #[serde(rename = "d_patch_center")]
    PatchCenter,
}

impl PosStrategy {
    pub const ALL: [PosStrategy; 4] = [Self::Learnable, Self::PerFaceMaxPool, Self::Flatten, Self::PatchCenter];

    pub fn name(self) -> &'static str {
        match self {
            Self::Learnable => "a_learnable",
            Self::PerFaceMaxPool => "b_per_face_maxpool",
            Self::Flatten => "c_flatten_64x3",
            Self::PatchCenter => "d_patch_center",
        }
    }
}

impl fmt::Display for PosStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s || (s.len() == 1 && p.name().starts_with(s)))
            .ok_or_else(|| format!("unknown positional strategy `{s}` (a, b, c or d)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub pos_strategy: PosStrategy,
    /// Decoder width; a projection is inserted when it differs from
    /// `embed_dim`.
    pub decoder_dim: usize,
    /// Table size of the learnable positional strategy.
    pub max_tokens: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 128,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 4,
            mlp_ratio: 4.0,
            pos_strategy: PosStrategy::PatchCenter,
            decoder_dim: 128,
            max_tokens: 256,
            ln_eps: 1e-5,
        }
    }

    pub fn paper() -> Self {
        Self { embed_dim: 768, encoder_layers: 12, decoder_layers: 6, heads: 12, decoder_dim: 768, ..Self::desk() }
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.decoder_dim == 0 || self.decoder_dim % self.heads != 0 {
            return bad(format!("decoder_dim {} must be a positive multiple of heads {}", self.decoder_dim, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio <= 16.0) {
            return bad(format!("mlp_ratio {} outside (0, 16]", self.mlp_ratio));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.ln_eps < 1.0) {
            return bad(format!("ln_eps {} outside (0, 1)", self.ln_eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_parse() {
        for s in PosStrategy::ALL {
            assert_eq!(s.name().parse::<PosStrategy>().unwrap(), s);
        }
        assert_eq!("d".parse::<PosStrategy>().unwrap(), PosStrategy::PatchCenter);
        assert_eq!("b".parse::<PosStrategy>().unwrap(), PosStrategy::PerFaceMaxPool);
        assert!("e".parse::<PosStrategy>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        assert!(ModelConfig { heads: 3, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { encoder_layers: 0, ..ModelConfig::desk() }.validate().is_err());
    }
}
