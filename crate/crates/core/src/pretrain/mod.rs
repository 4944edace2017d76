//! Masked mesh modeling: reconstruction losses, the training loop and
//! reconstruction export.

mod export;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Var};
use crate::optim::{collect_grads, cosine_lr, AdamW, OptimState};
use crate::patchify::{make_mask_with, MaskPartition, PatchError};
use crate::transformer::{pretrain_forward, Bound, MeshMae, ModelError, PretrainOutputs, Tokens};

pub use export::{export_reconstruction, ReconstructionExport, EXPORT_RATIOS};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("empty point set")]
    EmptySet,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}\n{dump}")]
    NonFinite { step: usize, dump: String },
    #[error("invalid pretraining configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Remesh(#[from] crate::remesh::RemeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PretrainError>;

/// Symmetric Chamfer distance with squared Euclidean point distances.
pub fn chamfer_l2(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(PretrainError::EmptySet);
    }
    let one_way = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
        a.iter()
            .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(one_way(pred, gt) + one_way(gt, pred))
}

/// Mean squared difference over all entries.
pub fn face_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(PretrainError::Shape(format!("{} vs {} entries", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub chamfer: Var,
    /// Per masked token Chamfer, `[masked]`.
    pub per_patch_chamfer: Var,
}

/// Mean over masked tokens of `face_mse + lambda * chamfer_l2`. `None` when
/// nothing is masked.
pub fn masked_loss<T: Real>(
    g: &mut Graph<T>,
    out: &PretrainOutputs,
    tokens: &Tokens,
    mask: &MaskPartition,
    lambda: f64,
) -> Result<Option<LossVars>> {
    if mask.masked.is_empty() {
        return Ok(None);
    }
    let pf = g.gather_rows(out.faces, &mask.masked)?;
    let tf = g.input(tokens.feature_rows(&mask.masked));
    let diff = g.sub(pf, tf)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq);
    let pv = g.gather_rows(out.vertices, &mask.masked)?;
    let tv = g.input(tokens.vertex_rows(&mask.masked));
    let per_patch_chamfer = g.chamfer(pv, tv)?;
    let chamfer = g.mean(per_patch_chamfer);
    let weighted = g.scale(chamfer, lambda);
    let total = g.add(mse, weighted)?;
    Ok(Some(LossVars { total, mse, chamfer, per_patch_chamfer }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamW,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.5, lambda: 0.5, lr: 1e-4, batch_size: 32, epochs: 300, optimizer: AdamW::default() }
    }
}

impl PretrainConfig {
    /// Settings for the reduced model on synthetic data.
    pub fn desk() -> Self {
        Self { lr: 1e-3, batch_size: 8, epochs: 40, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PretrainError::Config(m));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr < 1.0) {
            return bad(format!("lr {} outside [0, 1)", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || !(0.0..1.0).contains(&o.weight_decay) {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub chamfer: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshLoss {
    pub loss: f64,
    pub mse: f64,
    pub chamfer: f64,
    pub patch_chamfers: Vec<f64>,
}

/// Loss of one mesh under a given mask, without gradients. `None` when
/// nothing is masked.
pub fn evaluate_mesh(model: &MeshMae, tokens: &Tokens, mask: &MaskPartition, lambda: f64) -> Result<Option<MeshLoss>> {
    let mut g = Graph::<f32>::new();
    let b = Bound::frozen(&mut g, &model.params);
    let out = pretrain_forward(&mut g, &b, &model.config, tokens, mask)?;
    let Some(l) = masked_loss(&mut g, &out, tokens, mask, lambda)? else { return Ok(None) };
    let item = |v: Var| g.value(v).item() as f64;
    Ok(Some(MeshLoss {
        loss: item(l.total),
        mse: item(l.mse),
        chamfer: item(l.chamfer),
        patch_chamfers: g.value(l.per_patch_chamfer).to_f64_vec(),
    }))
}

/// One mask per mesh drawn from a single seeded stream.
pub fn fixed_masks(data: &[Tokens], ratio: f64, seed: u64) -> Result<Vec<MaskPartition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(data.iter().map(|t| make_mask_with(t.count, ratio, &mut rng)).collect::<std::result::Result<_, _>>()?)
}

/// Optimizer state and random streams of a pretraining run.
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub state: OptimState,
    step: usize,
    horizon: usize,
    mask_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
}

impl Pretrainer {
    /// `horizon` is the number of optimizer steps the cosine schedule spans.
    pub fn new(config: PretrainConfig, horizon: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        mask_rng.set_stream(1);
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
        order_rng.set_stream(2);
        Ok(Self { config, state: OptimState::default(), step: 0, horizon, mask_rng, order_rng })
    }

    pub fn steps_per_epoch(&self, meshes: usize) -> usize {
        meshes.div_ceil(self.config.batch_size)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One optimizer step on the mean loss of `batch`. Meshes without masked
    /// tokens contribute zero.
    pub fn train_step(&mut self, model: &mut MeshMae, batch: &[(&Tokens, &MaskPartition)]) -> Result<StepStats> {
        let lr = cosine_lr(self.config.lr, self.step, self.horizon);
        let mut g = Graph::<f32>::new();
        let bound = Bound::trainable(&mut g, &model.params);
        let mut totals = Vec::new();
        let (mut mse, mut chamfer) = (0.0, 0.0);
        for (tokens, mask) in batch {
            let out = pretrain_forward(&mut g, &bound, &model.config, tokens, mask)?;
            match masked_loss(&mut g, &out, tokens, mask, self.config.lambda)? {
                Some(l) => {
                    mse += g.value(l.mse).item() as f64;
                    chamfer += g.value(l.chamfer).item() as f64;
                    totals.push(g.reshape(l.total, &[1])?);
                }
                None => log::warn!("mesh with {} tokens has no masked token; its loss is zero", tokens.count),
            }
        }
        let n = batch.len().max(1) as f64;
        let mut stats = StepStats { step: self.step, lr, loss: 0.0, chamfer: chamfer / n, mse: mse / n };
        if !totals.is_empty() {
            let joined = g.concat(&totals, 0)?;
            let sum = g.sum(joined);
            let loss = g.scale(sum, 1.0 / n);
            stats.loss = g.value(loss).item() as f64;
            if !stats.loss.is_finite() {
                return Err(PretrainError::NonFinite { step: self.step, dump: diagnostic_dump(model, &stats, batch) });
            }
            g.backward(loss)?;
            let grads = collect_grads(&g, &bound);
            self.config.optimizer.step(&mut model.params, &grads, &mut self.state, lr);
        }
        self.step += 1;
        Ok(stats)
    }

    /// One pass over `data` in a freshly shuffled order with fresh masks.
    pub fn run_epoch(&mut self, model: &mut MeshMae, data: &[Tokens], mut on_step: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        let masks = data
            .iter()
            .map(|t| make_mask_with(t.count, self.config.mask_ratio, &mut self.mask_rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(&Tokens, &MaskPartition)> = chunk.iter().map(|&i| (&data[i], &masks[i])).collect();
            let s = self.train_step(model, &batch)?;
            on_step(&s);
            out.push(s);
        }
        Ok(out)
    }
}

/// Runs `config.epochs` epochs and returns the per-step statistics.
pub fn pretrain(
    model: &mut MeshMae,
    data: &[Tokens],
    config: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Vec<StepStats>> {
    if data.is_empty() {
        return Err(PretrainError::Config("no training meshes".into()));
    }
    let per_epoch = data.len().div_ceil(config.batch_size.max(1));
    let mut trainer = Pretrainer::new(config.clone(), per_epoch * config.epochs, seed)?;
    let mut stats = Vec::new();
    for _ in 0..config.epochs {
        stats.extend(trainer.run_epoch(model, data, &mut on_step)?);
    }
    Ok(stats)
}

fn diagnostic_dump(model: &MeshMae, stats: &StepStats, batch: &[(&Tokens, &MaskPartition)]) -> String {
    let mut s = format!(
        "lr {:e} loss {} mse {} chamfer {}\nbatch token counts {:?}\n",
        stats.lr,
        stats.loss,
        stats.mse,
        stats.chamfer,
        batch.iter().map(|(t, _)| t.count).collect::<Vec<_>>()
    );
    let bad_inputs = batch.iter().filter(|(t, _)| t.features.iter().chain(&t.relative_vertices).any(|v| !v.is_finite())).count();
    s += &format!("meshes with non-finite inputs: {bad_inputs}\n");
    for (name, t) in model.params.iter() {
        let max = t.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        s += &format!("{name} {:?} max|w| {max} finite {}\n", t.shape(), t.is_finite());
    }
    s
}
