use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, PosStrategy, FACE_EMBED_DIM};
use crate::autodiff::{load_checkpoint, save_checkpoint, Checkpoint, Real, Tensor};
use crate::mesh::FEATURE_DIM;
use crate::patchify::{FACES_PER_PATCH, PATCH_FEATURE_LEN, VERTICES_PER_PATCH};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

type Shapes = Vec<(String, Vec<usize>)>;

fn linear(out: &mut Shapes, name: &str, inp: usize, outp: usize) {
    out.push((format!("{name}.w"), vec![inp, outp]));
    out.push((format!("{name}.b"), vec![outp]));
}

fn norm(out: &mut Shapes, name: &str, dim: usize) {
    out.push((format!("{name}.gamma"), vec![dim]));
    out.push((format!("{name}.beta"), vec![dim]));
}

fn blocks(out: &mut Shapes, prefix: &str, layers: usize, dim: usize, hidden: usize) {
    for l in 0..layers {
        let p = format!("{prefix}.{l}");
        norm(out, &format!("{p}.ln1"), dim);
        linear(out, &format!("{p}.attn.qkv"), dim, 3 * dim);
        linear(out, &format!("{p}.attn.proj"), dim, dim);
        norm(out, &format!("{p}.ln2"), dim);
        linear(out, &format!("{p}.mlp.fc1"), dim, hidden);
        linear(out, &format!("{p}.mlp.fc2"), hidden, dim);
    }
    norm(out, &format!("{prefix}.norm"), dim);
}

/// Patch embedding, positional embedding and encoder.
pub fn backbone_shapes(cfg: &ModelConfig) -> Shapes {
    let d = cfg.embed_dim;
    let mut s = Vec::new();
    linear(&mut s, "patch_embed.fc1", PATCH_FEATURE_LEN, d);
    linear(&mut s, "patch_embed.fc2", d, d);
    match cfg.pos_strategy {
        PosStrategy::Learnable => s.push(("pos.table".into(), vec![cfg.max_tokens, d])),
        PosStrategy::PerFaceMaxPool | PosStrategy::PatchCenter => {
            linear(&mut s, "pos.fc1", 3, d);
            linear(&mut s, "pos.fc2", d, d);
        }
        PosStrategy::Flatten => {
            linear(&mut s, "pos.fc1", FACES_PER_PATCH * 3, d);
            linear(&mut s, "pos.fc2", d, d);
        }
    }
    blocks(&mut s, "enc", cfg.encoder_layers, d, cfg.mlp_hidden(d));
    s
}

/// Decoder, shared mask embedding and reconstruction heads.
pub fn decoder_shapes(cfg: &ModelConfig) -> Shapes {
    let dd = cfg.decoder_dim;
    let mut s = Vec::new();
    if dd != cfg.embed_dim {
        linear(&mut s, "dec.embed", cfg.embed_dim, dd);
        linear(&mut s, "dec.pos", cfg.embed_dim, dd);
    }
    s.push(("mask_token".into(), vec![dd]));
    blocks(&mut s, "dec", cfg.decoder_layers, dd, cfg.mlp_hidden(dd));
    linear(&mut s, "head.vertex", dd, VERTICES_PER_PATCH * 3);
    linear(&mut s, "head.face", dd, PATCH_FEATURE_LEN);
    s
}

/// Linear classifier plus the fixed standardization of the pooled vector
/// in front of it (`cls.pool.shift`, `cls.pool.scale`; never trained).
pub fn classifier_shapes(cfg: &ModelConfig, classes: usize) -> Shapes {
    let mut s = vec![
        ("cls.pool.shift".to_string(), vec![cfg.embed_dim]),
        ("cls.pool.scale".to_string(), vec![cfg.embed_dim]),
    ];
    linear(&mut s, "cls", cfg.embed_dim, classes);
    s
}

pub fn segmentation_shapes(cfg: &ModelConfig, parts: usize) -> Shapes {
    let d = cfg.embed_dim;
    let mut s = Vec::new();
    linear(&mut s, "seg.patch", d, parts);
    linear(&mut s, "seg.face_embed", FEATURE_DIM, FACE_EMBED_DIM);
    linear(&mut s, "seg.face.fc1", d + FACE_EMBED_DIM, d);
    linear(&mut s, "seg.face.fc2", d, parts);
    s
}

/// Scalar count of the pretraining model (backbone, decoder and heads).
pub fn param_count(cfg: &ModelConfig) -> usize {
    backbone_shapes(cfg)
        .iter()
        .chain(&decoder_shapes(cfg))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Order-sensitive digest of the tensors whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            for b in name.bytes().chain(t.data().iter().flat_map(|v| v.f64().to_bits().to_le_bytes())) {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Initializes any tensor of `shapes` not already present: truncated
    /// normal for weights, tables and the mask token, ones for norm gains
    /// and zeros for biases and norm shifts.
    pub fn init_missing(&mut self, shapes: &Shapes, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, shape) in shapes {
            if self.tensors.contains_key(name) {
                continue;
            }
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".shift") {
                vec![T::zero(); n]
            } else if name.ends_with(".gamma") || name.ends_with(".scale") {
                vec![T::one(); n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * INIT_STD {
                            break T::of(x);
                        }
                    })
                    .collect()
            };
            self.tensors.insert(name.clone(), Tensor::new(shape.clone(), data).expect("shape matches data"));
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    model: ModelConfig,
}

/// Model configuration together with its trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshMae {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl MeshMae {
    /// Freshly initialized backbone, decoder and reconstruction heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut shapes = backbone_shapes(&config);
        shapes.extend(decoder_shapes(&config));
        params.init_missing(&shapes, seed);
        Ok(Self { config, params })
    }

    /// Adds (or replaces) a classification head.
    pub fn with_classifier(mut self, classes: usize, seed: u64) -> Self {
        let shapes = classifier_shapes(&self.config, classes);
        for (n, _) in &shapes {
            self.params.remove(n);
        }
        self.params.init_missing(&shapes, seed);
        self
    }

    /// Adds (or replaces) the segmentation heads.
    pub fn with_segmentation(mut self, parts: usize, seed: u64) -> Self {
        let shapes = segmentation_shapes(&self.config, parts);
        for (n, _) in &shapes {
            self.params.remove(n);
        }
        self.params.init_missing(&shapes, seed);
        self
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params.get("cls.b").ok().map(Tensor::len)
    }

    pub fn num_parts(&self) -> Option<usize> {
        self.params.get("seg.patch.b").ok().map(Tensor::len)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = Metadata { format: "meshmae".into(), model: self.config.clone() };
        let ckpt = Checkpoint {
            metadata: serde_json::to_string(&meta).map_err(|e| ModelError::Config(e.to_string()))?,
            tensors: self.params.tensors.clone(),
        };
        save_checkpoint(&ckpt, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ckpt = load_checkpoint(path)?;
        let meta: Metadata =
            serde_json::from_str(&ckpt.metadata).map_err(|e| ModelError::Config(format!("checkpoint metadata: {e}")))?;
        meta.model.validate()?;
        let params = ParamStore { tensors: ckpt.tensors };
        for (name, shape) in backbone_shapes(&meta.model) {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!("`{name}` has shape {:?}, config implies {shape:?}", t.shape())));
            }
        }
        Ok(Self { config: meta.model, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent count: per block 2 norms, qkv, proj and a two-layer MLP.
    fn expected(d: usize, enc: usize, dec: usize, pos_in: usize) -> usize {
        let block = |w: usize| 4 * w + (w * 3 * w + 3 * w) + (w * w + w) + (w * 4 * w + 4 * w) + (4 * w * w + w);
        let patch = 640 * d + d + d * d + d;
        let pos = pos_in * d + d + d * d + d;
        let enc_total = enc * block(d) + 2 * d;
        let dec_total = d + dec * block(d) + 2 * d + (d * 135 + 135) + (d * 640 + 640);
        patch + pos + enc_total + dec_total
    }

    #[test]
    fn paper_and_desk_parameter_counts() {
        assert_eq!(param_count(&ModelConfig::paper()), expected(768, 12, 6, 3));
        assert_eq!(param_count(&ModelConfig::paper()), 129_858_055);
        assert_eq!(param_count(&ModelConfig::desk()), expected(128, 4, 2, 3));
        assert_eq!(param_count(&ModelConfig::desk()), 1_405_831);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MeshMae::new(ModelConfig::desk(), 3).unwrap();
        let b = MeshMae::new(ModelConfig::desk(), 3).unwrap();
        let c = MeshMae::new(ModelConfig::desk(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.checksum(""), c.params.checksum(""));
        assert_eq!(a.params.num_scalars(), param_count(&a.config));
        let w = a.params.get("enc.0.attn.qkv.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert!(a.params.get("enc.0.attn.qkv.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.params.get("enc.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn head_parameter_counts() {
        let m = MeshMae::new(ModelConfig::desk(), 0).unwrap().with_classifier(5, 1);
        assert_eq!(m.num_classes(), Some(5));
        let head: usize = classifier_shapes(&m.config, 5).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        // linear layer plus the pooled-feature shift and scale
        assert_eq!(head, 128 * 5 + 5 + 2 * 128);
        assert!(m.params.get("cls.pool.scale").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.params.get("cls.pool.shift").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = MeshMae::new(ModelConfig { embed_dim: 16, heads: 2, decoder_dim: 8, ..ModelConfig::desk() }, 0)
            .unwrap()
            .with_segmentation(3, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        assert_eq!(MeshMae::load(&p).unwrap(), m);
    }
}
