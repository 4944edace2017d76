//! Classification and part segmentation on top of the encoder: fine-tuning,
//! linear probing, label transfer and accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::dataset::{face_rows, Sample};
use crate::mesh::{face_centers, Mesh};
use crate::optim::{collect_grads, step_lr, AdamW, OptimState};
use crate::patchify::{FaceOrder, PatchError, FACES_PER_PATCH};
use crate::transformer::{classify_batch_forward, classify_forward, POOL_EPS, pooled_forward, segment_forward, Binding, Bound, MeshMae, ModelError, Tokens};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("{0}")]
    Empty(String),
    #[error("{predictions} predictions for {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("label {label} outside the {classes} outputs of the head")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error("invalid fine-tuning configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

type Result<T> = std::result::Result<T, DownstreamError>;

/// Label of the nearest raw face for every target face, by centroid distance.
/// Ties go to the lowest raw index.
pub fn transfer_labels(raw: &Mesh, labels: &[usize], target: &Mesh) -> Result<Vec<usize>> {
    if raw.num_faces() == 0 {
        return Err(DownstreamError::Empty("raw mesh has no faces".into()));
    }
    if labels.len() != raw.num_faces() {
        return Err(DownstreamError::Length { predictions: labels.len(), labels: raw.num_faces() });
    }
    let src = face_centers(raw);
    Ok(face_centers(target)
        .iter()
        .map(|c| {
            let mut best = (f64::INFINITY, 0);
            for (i, s) in src.iter().enumerate() {
                let d = (s - c).norm_squared();
                if d < best.0 {
                    best = (d, i);
                }
            }
            labels[best.1]
        })
        .collect())
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(DownstreamError::Length { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(DownstreamError::Empty("nothing to evaluate".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Most frequent label, ties to the smallest.
pub fn majority(labels: &[usize]) -> usize {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    argmax(&counts.iter().map(|&c| c as f32).collect::<Vec<_>>())
}

/// Parameters that take part in the classification or segmentation forward
/// passes.
fn used_downstream(name: &str) -> bool {
    !(name.starts_with("dec.") || name.starts_with("head.") || name == "mask_token")
}

fn is_head(name: &str) -> bool {
    name.starts_with("cls.") || name.starts_with("seg.")
}

/// Fitted from data by [`calibrate_classifier`], never by gradient steps.
fn is_statistic(name: &str) -> bool {
    name.starts_with("cls.pool.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    /// Backbone and head train together.
    Full,
    /// Backbone frozen, only the head trains.
    HeadOnly,
}

impl Tuning {
    fn binding(self, name: &str) -> Binding {
        if !used_downstream(name) {
            Binding::Skip
        } else if is_statistic(name) {
            Binding::Frozen
        } else if self == Tuning::Full || is_head(name) {
            Binding::Trainable
        } else {
            Binding::Frozen
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Points of the run, as fractions of `epochs`, where the rate drops by 10x.
    pub milestones: Vec<f64>,
    /// Weight of the patch-level segmentation loss.
    pub patch_loss_weight: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl FinetuneConfig {
    /// Drops at epochs 30 and 60 of a 100-epoch run.
    pub fn classification() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            batch_size: 32,
            optimizer: AdamW::default(),
            milestones: vec![0.3, 0.6],
            patch_loss_weight: 0.5,
        }
    }

    /// Drops at epochs 80 and 160 of a 200-epoch run.
    pub fn segmentation() -> Self {
        Self { epochs: 200, milestones: vec![0.4, 0.8], ..Self::classification() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DownstreamError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr < 1.0) {
            return bad(format!("lr {} outside [0, 1)", self.lr));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!("milestones {:?} must be fractions of the run", self.milestones));
        }
        if !(self.patch_loss_weight >= 0.0) {
            return bad("patch_loss_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClassExample {
    pub tokens: Tokens,
    pub label: usize,
}

impl ClassExample {
    pub fn from_sample(s: &Sample, order: FaceOrder, order_seed: u64) -> Result<Self> {
        Ok(Self { tokens: s.tokens(order, order_seed)?, label: s.class })
    }
}

#[derive(Debug, Clone)]
pub struct SegExample {
    pub tokens: Tokens,
    /// Label of every token row (`count * 64`).
    pub face_labels: Vec<usize>,
    /// Majority label of every token.
    pub patch_labels: Vec<usize>,
    /// T-mesh face of every token row.
    pub rows: Vec<usize>,
}

impl SegExample {
    pub fn from_sample(s: &Sample, order: FaceOrder, order_seed: u64) -> Result<Self> {
        let labels = s
            .face_labels
            .as_ref()
            .ok_or_else(|| DownstreamError::Empty(format!("{} has no face labels", s.path.display())))?;
        let rows = face_rows(&s.tmesh, order, order_seed)?;
        let face_labels: Vec<usize> = rows.iter().map(|&f| labels[f]).collect();
        let patch_labels = face_labels.chunks(FACES_PER_PATCH).map(majority).collect();
        Ok(Self { tokens: s.tokens(order, order_seed)?, face_labels, patch_labels, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Class logits of one mesh.
pub fn classify(model: &MeshMae, tokens: &Tokens) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let b = Bound::bind(&mut g, &model.params, |n| if used_downstream(n) { Binding::Frozen } else { Binding::Skip });
    let logits = classify_forward(&mut g, &b, &model.config, tokens)?;
    Ok(g.value(logits).data().to_vec())
}

pub fn predict_class(model: &MeshMae, tokens: &Tokens) -> Result<usize> {
    Ok(argmax(&classify(model, tokens)?))
}

pub fn class_accuracy(model: &MeshMae, data: &[ClassExample]) -> Result<f64> {
    let preds = data.iter().map(|e| predict_class(model, &e.tokens)).collect::<Result<Vec<_>>>()?;
    accuracy(&preds, &data.iter().map(|e| e.label).collect::<Vec<_>>())
}

/// Per-face part labels of one mesh, indexed like its t-mesh faces.
pub fn segment(model: &MeshMae, example: &SegExample) -> Result<Vec<usize>> {
    let mut g = Graph::<f32>::new();
    let b = Bound::bind(&mut g, &model.params, |n| if used_downstream(n) { Binding::Frozen } else { Binding::Skip });
    let out = segment_forward(&mut g, &b, &model.config, &example.tokens)?;
    let parts = *g.shape(out.face_logits).last().expect("2-d logits");
    let mut preds = vec![0; example.rows.len()];
    for (row, logits) in g.value(out.face_logits).data().chunks(parts).enumerate() {
        preds[example.rows[row]] = argmax(logits);
    }
    Ok(preds)
}

/// Fraction of correctly labelled faces over all meshes.
pub fn seg_accuracy(model: &MeshMae, data: &[SegExample]) -> Result<f64> {
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for e in data {
        let p = segment(model, e)?;
        preds.extend(e.rows.iter().map(|&f| p[f]));
        labels.extend_from_slice(&e.face_labels);
    }
    accuracy(&preds, &labels)
}

/// Epoch-wise trainer shared by the classification and segmentation tasks.
pub struct Finetuner {
    pub config: FinetuneConfig,
    pub tuning: Tuning,
    state: OptimState,
    epoch: usize,
    order_rng: ChaCha8Rng,
}

impl Finetuner {
    pub fn new(config: FinetuneConfig, tuning: Tuning, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
        order_rng.set_stream(3);
        Ok(Self { config, tuning, state: OptimState::default(), epoch: 0, order_rng })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn lr(&self) -> f64 {
        step_lr(self.config.lr, self.epoch, self.config.epochs, &self.config.milestones)
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.order_rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn finish(&mut self, model: &mut MeshMae, g: &mut Graph<f32>, bound: &Bound, loss: crate::autodiff::Var, lr: f64) -> Result<f64> {
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(DownstreamError::NonFinite(self.epoch));
        }
        g.backward(loss)?;
        let grads = collect_grads(g, bound);
        self.config.optimizer.step(&mut model.params, &grads, &mut self.state, lr);
        Ok(value)
    }

    /// One pass over `data`. Batches standardize the pooled features with
    /// their own statistics; afterwards the stored statistics used at
    /// inference are refitted to `data` with the updated encoder. Single-mesh
    /// batches use the stored statistics.
    pub fn classification_epoch(&mut self, model: &mut MeshMae, data: &[ClassExample]) -> Result<EpochStats> {
        let classes = model.num_classes().ok_or_else(|| ModelError::MissingParam("cls.w".into()))?;
        if let Some(e) = data.iter().find(|e| e.label >= classes) {
            return Err(DownstreamError::Label { label: e.label, classes });
        }
        if self.epoch == 0 {
            calibrate_classifier(model, data)?;
        }
        let lr = self.lr();
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in self.batches(data.len()) {
            let mut g = Graph::<f32>::new();
            let tuning = self.tuning;
            let bound = Bound::bind(&mut g, &model.params, |n| tuning.binding(n));
            let mut rows = Vec::with_capacity(batch.len());
            let logits = if batch.len() > 1 {
                for &i in &batch {
                    rows.push(pooled_forward(&mut g, &bound, &model.config, &data[i].tokens)?);
                }
                let pooled = g.concat(&rows, 0)?;
                classify_batch_forward(&mut g, &bound, pooled)?
            } else {
                for &i in &batch {
                    rows.push(classify_forward(&mut g, &bound, &model.config, &data[i].tokens)?);
                }
                g.concat(&rows, 0)?
            };
            hits += g.value(logits).data().chunks(classes).zip(&batch).filter(|(r, &i)| argmax(r) == data[i].label).count();
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            loss_sum += self.finish(model, &mut g, &bound, loss, lr)? * batch.len() as f64;
        }
        calibrate_classifier(model, data)?;
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            loss: loss_sum / data.len().max(1) as f64,
            train_accuracy: hits as f64 / data.len().max(1) as f64,
        };
        self.epoch += 1;
        Ok(stats)
    }

    pub fn segmentation_epoch(&mut self, model: &mut MeshMae, data: &[SegExample]) -> Result<EpochStats> {
        let parts = model.num_parts().ok_or_else(|| ModelError::MissingParam("seg.patch.w".into()))?;
        if let Some(&label) = data.iter().flat_map(|e| &e.face_labels).find(|&&l| l >= parts) {
            return Err(DownstreamError::Label { label, classes: parts });
        }
        let lr = self.lr();
        let (mut loss_sum, mut hits, mut faces) = (0.0, 0, 0);
        for batch in self.batches(data.len()) {
            let mut g = Graph::<f32>::new();
            let tuning = self.tuning;
            let bound = Bound::bind(&mut g, &model.params, |n| tuning.binding(n));
            let mut losses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let e = &data[i];
                let out = segment_forward(&mut g, &bound, &model.config, &e.tokens)?;
                hits += g.value(out.face_logits).data().chunks(parts).zip(&e.face_labels).filter(|(r, &l)| argmax(r) == l).count();
                faces += e.face_labels.len();
                let face = g.cross_entropy(out.face_logits, &e.face_labels)?;
                let patch = g.cross_entropy(out.patch_logits, &e.patch_labels)?;
                let patch = g.scale(patch, self.config.patch_loss_weight);
                let total = g.add(face, patch)?;
                losses.push(g.reshape(total, &[1])?);
            }
            let joined = g.concat(&losses, 0)?;
            let loss = g.mean(joined);
            loss_sum += self.finish(model, &mut g, &bound, loss, lr)? * batch.len() as f64;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            loss: loss_sum / data.len().max(1) as f64,
            train_accuracy: hits as f64 / faces.max(1) as f64,
        };
        self.epoch += 1;
        Ok(stats)
    }
}

/// Max-pooled encoder output of one mesh, before standardization.
pub fn pooled_features(model: &MeshMae, tokens: &Tokens) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let b = Bound::bind(&mut g, &model.params, |n| {
        if used_downstream(n) && !is_head(n) {
            Binding::Frozen
        } else {
            Binding::Skip
        }
    });
    let pooled = pooled_forward(&mut g, &b, &model.config, tokens)?;
    Ok(g.value(pooled).data().to_vec())
}

/// Sets the classifier's fixed shift and scale to the per-dimension mean and
/// inverse standard deviation of the pooled features of `data`.
///
/// Max-pooled features share a large offset and differ across meshes only in
/// small per-dimension amounts; standardizing them gives the linear head
/// inputs of unit scale.
pub fn calibrate_classifier(model: &mut MeshMae, data: &[ClassExample]) -> Result<()> {
    if data.is_empty() {
        return Err(DownstreamError::Empty("no meshes to calibrate the classifier on".into()));
    }
    let feats = data.iter().map(|e| pooled_features(model, &e.tokens)).collect::<Result<Vec<_>>>()?;
    let (mean, scale) = standardizer(&feats, model.config.embed_dim);
    for (name, v) in [("cls.pool.shift", mean), ("cls.pool.scale", scale)] {
        let t = model.params.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.into()))?;
        t.data_mut().copy_from_slice(&v);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub history: Vec<EpochStats>,
}

/// Trains only the linear classification head on frozen pooled encoder
/// outputs, after [`calibrate_classifier`] on `train`. The encoder runs once
/// per mesh; the head update is the same as with [`Tuning::HeadOnly`] since
/// the head is linear in the standardized pooled vector.
pub fn linear_probe(
    model: &mut MeshMae,
    train: &[ClassExample],
    test: &[ClassExample],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<ProbeResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(DownstreamError::Empty("no training meshes for the probe".into()));
    }
    let classes = model.num_classes().ok_or_else(|| ModelError::MissingParam("cls.w".into()))?;
    if let Some(e) = train.iter().chain(test).find(|e| e.label >= classes) {
        return Err(DownstreamError::Label { label: e.label, classes });
    }
    calibrate_classifier(model, train)?;
    let d = model.config.embed_dim;
    let standardized = |data: &[ClassExample]| -> Result<Vec<Vec<f32>>> {
        let shift = model.params.get("cls.pool.shift")?.data();
        let scale = model.params.get("cls.pool.scale")?.data();
        data.iter()
            .map(|e| Ok(pooled_features(model, &e.tokens)?.iter().zip(shift).zip(scale).map(|((x, m), s)| (x - m) * s).collect()))
            .collect()
    };
    let (train_f, test_f) = (standardized(train)?, standardized(test)?);

    let mut trainer = Finetuner::new(config.clone(), Tuning::HeadOnly, seed)?;
    let mut history = Vec::new();
    for _ in 0..config.epochs {
        let lr = trainer.lr();
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in trainer.batches(train.len()) {
            let mut g = Graph::<f32>::new();
            let bound = Bound::bind(&mut g, &model.params, |n| if n == "cls.w" || n == "cls.b" { Binding::Trainable } else { Binding::Skip });
            let x: Vec<f32> = batch.iter().flat_map(|&i| train_f[i].iter().copied()).collect();
            let x = g.input(Tensor::new(vec![batch.len(), d], x)?);
            let logits = g.matmul(x, bound.var("cls.w")?)?;
            let logits = g.add(logits, bound.var("cls.b")?)?;
            hits += g.value(logits).data().chunks(classes).zip(&batch).filter(|(r, &i)| argmax(r) == train[i].label).count();
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            loss_sum += trainer.finish(model, &mut g, &bound, loss, lr)? * batch.len() as f64;
        }
        history.push(EpochStats {
            epoch: trainer.epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
        });
        trainer.epoch += 1;
    }

    let predict = |f: &[f32]| -> usize {
        let w = model.params.get("cls.w").expect("head present").data();
        let b = model.params.get("cls.b").expect("head present").data();
        let logits: Vec<f32> = (0..classes).map(|c| b[c] + (0..d).map(|i| f[i] * w[i * classes + c]).sum::<f32>()).collect();
        argmax(&logits)
    };
    let acc = |f: &[Vec<f32>], data: &[ClassExample]| -> Result<f64> {
        accuracy(&f.iter().map(|x| predict(x)).collect::<Vec<_>>(), &data.iter().map(|e| e.label).collect::<Vec<_>>())
    };
    let train_accuracy = acc(&train_f, train)?;
    let test_accuracy = if test.is_empty() { f64::NAN } else { acc(&test_f, test)? };
    Ok(ProbeResult { train_accuracy, test_accuracy, history })
}

/// Per-dimension mean and inverse standard deviation of `features`.
fn standardizer(features: &[Vec<f32>], d: usize) -> (Vec<f32>, Vec<f32>) {
    let n = features.len() as f64;
    let mut mean = vec![0f64; d];
    for f in features {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x as f64 / n;
        }
    }
    let mut var = vec![0f64; d];
    for f in features {
        for ((v, &x), m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x as f64 - m).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| (1.0 / (v + POOL_EPS).sqrt()) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::tetrahedron;
    use crate::synth::icosphere;
    use crate::transformer::{ModelConfig, PosStrategy};
    use rand::Rng;

    #[test]
    fn label_transfer_examples() {
        let m = icosphere(2);
        let labels: Vec<usize> = (0..m.num_faces()).map(|i| i % 3).collect();
        assert_eq!(transfer_labels(&m, &labels, &m).unwrap(), labels);
        let ones = vec![1; m.num_faces()];
        assert!(transfer_labels(&m, &ones, &icosphere(3)).unwrap().iter().all(|&l| l == 1));
        assert!(transfer_labels(&Mesh::empty(), &[], &m).is_err());

        // hemisphere labels land on the matching side away from the equator
        let raw = icosphere(4);
        let hemi: Vec<usize> = face_centers(&raw).iter().map(|c| usize::from(c.z > 0.0)).collect();
        let target = icosphere(2);
        let got = transfer_labels(&raw, &hemi, &target).unwrap();
        for (c, l) in face_centers(&target).iter().zip(got) {
            if c.z.abs() > 0.1 {
                assert_eq!(l, usize::from(c.z > 0.0));
            }
        }

        // duplicate raw faces tie; the lower index wins
        let t = tetrahedron();
        let dup = Mesh::new(t.vertices.clone(), [t.faces.clone(), t.faces.clone()].concat()).unwrap();
        let l: Vec<usize> = (0..8).collect();
        assert_eq!(transfer_labels(&dup, &l, &t).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn accuracy_matches_counting() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(DownstreamError::Length { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let l: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let mut count = 0;
        for i in 0..500 {
            if p[i] == l[i] {
                count += 1;
            }
        }
        assert_eq!(accuracy(&p, &l).unwrap(), count as f64 / 500.0);
    }

    #[test]
    fn calibration_standardizes_pooled_features() {
        let mut model = tiny_model(2);
        let data: Vec<ClassExample> = (0..6).map(|i| ClassExample { tokens: toy_tokens(i % 2, i as u64), label: i % 2 }).collect();
        calibrate_classifier(&mut model, &data).unwrap();
        let shift = model.params.get("cls.pool.shift").unwrap().data().to_vec();
        let scale = model.params.get("cls.pool.scale").unwrap().data().to_vec();
        let z: Vec<Vec<f32>> = data
            .iter()
            .map(|e| pooled_features(&model, &e.tokens).unwrap().iter().zip(&shift).zip(&scale).map(|((x, m), s)| (x - m) * s).collect())
            .collect();
        for j in 0..16 {
            let mean = z.iter().map(|r| r[j]).sum::<f32>() / 6.0;
            let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f32>() / 6.0;
            assert!(mean.abs() < 1e-3, "{mean}");
            assert!(var < 1.0 + 1e-3 && var > 0.5, "{var}");
        }
        // a batch holding all of `data` standardizes exactly like the stored statistics
        let mut g = Graph::<f32>::new();
        let b = Bound::frozen(&mut g, &model.params);
        let rows: Vec<_> = data.iter().map(|e| pooled_forward(&mut g, &b, &model.config, &e.tokens).unwrap()).collect();
        let stacked = g.concat(&rows, 0).unwrap();
        let batch = classify_batch_forward(&mut g, &b, stacked).unwrap();
        let single: Vec<_> = data.iter().map(|e| classify_forward(&mut g, &b, &model.config, &e.tokens).unwrap()).collect();
        let single = g.concat(&single, 0).unwrap();
        for (x, y) in g.value(batch).data().iter().zip(g.value(single).data()) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
        // after an epoch the stored statistics belong to the updated encoder
        let mut ft = Finetuner::new(FinetuneConfig { epochs: 2, lr: 1e-2, batch_size: 2, ..FinetuneConfig::classification() }, Tuning::Full, 0).unwrap();
        ft.classification_epoch(&mut model, &data).unwrap();
        assert_ne!(model.params.get("cls.pool.shift").unwrap().data(), &shift[..]);
        let after = model.params.get("cls.pool.shift").unwrap().data().to_vec();
        calibrate_classifier(&mut model, &data).unwrap();
        assert_eq!(model.params.get("cls.pool.shift").unwrap().data(), &after[..]);
    }

    #[test]
    fn majority_ties_to_smallest() {
        assert_eq!(majority(&[2, 2, 1, 1, 0]), 1);
        assert_eq!(majority(&[3, 3, 3, 0]), 3);
    }

    fn tiny_model(classes: usize) -> MeshMae {
        let cfg = ModelConfig { embed_dim: 16, encoder_layers: 1, decoder_layers: 1, heads: 2, decoder_dim: 16, pos_strategy: PosStrategy::PatchCenter, ..ModelConfig::desk() };
        MeshMae::new(cfg, 0).unwrap().with_classifier(classes, 1).with_segmentation(2, 2)
    }

    fn toy_tokens(label: usize, seed: u64) -> Tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        Tokens {
            count: n,
            features: (0..n * 640).map(|i| if i % 10 == label { 1.0 } else { 0.0 } + rng.random_range(-0.1..0.1)).collect(),
            centers: (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            face_centers: Vec::new(),
            relative_vertices: vec![0.0; n * 135],
        }
    }

    #[test]
    fn probe_freezes_backbone_and_learns() {
        let mut model = tiny_model(2);
        let data: Vec<ClassExample> = (0..8).map(|i| ClassExample { tokens: toy_tokens(i % 2, i as u64), label: i % 2 }).collect();
        let before = model.params.checksum("enc.");
        let cfg = FinetuneConfig { epochs: 60, lr: 1e-2, batch_size: 4, ..FinetuneConfig::classification() };
        let r = linear_probe(&mut model, &data, &data, &cfg, 0).unwrap();
        assert_eq!(model.params.checksum("enc."), before);
        assert_eq!(model.params.checksum("patch_embed."), tiny_model(2).params.checksum("patch_embed."));
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(class_accuracy(&model, &data).unwrap(), 1.0);
        let head: usize = model.params.iter().filter(|(n, _)| *n == "cls.w" || *n == "cls.b").map(|(_, t)| t.len()).sum();
        assert_eq!(head, 16 * 2 + 2);
    }

    #[test]
    fn finetuning_updates_backbone_and_is_deterministic() {
        let data: Vec<ClassExample> = (0..6).map(|i| ClassExample { tokens: toy_tokens(i % 3, i as u64), label: i % 3 }).collect();
        let cfg = FinetuneConfig { epochs: 3, lr: 1e-3, batch_size: 3, ..FinetuneConfig::classification() };
        let run = || {
            let mut m = tiny_model(3);
            let mut t = Finetuner::new(cfg.clone(), Tuning::Full, 4).unwrap();
            let s: Vec<_> = (0..3).map(|_| t.classification_epoch(&mut m, &data).unwrap()).collect();
            (m, s)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(s1, s2);
        assert_eq!(m1.params, m2.params);
        assert_ne!(m1.params.checksum("enc."), tiny_model(3).params.checksum("enc."));
        // the decoder is untouched by downstream training
        assert_eq!(m1.params.checksum("dec."), tiny_model(3).params.checksum("dec."));

        let mut m = tiny_model(2);
        let mut t = Finetuner::new(cfg, Tuning::Full, 4).unwrap();
        assert!(matches!(t.classification_epoch(&mut m, &data), Err(DownstreamError::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn segmentation_epoch_runs_and_maps_rows() {
        let mut tokens = toy_tokens(0, 1);
        let n = tokens.count;
        let face_labels: Vec<usize> = (0..n * 64).map(|i| usize::from(tokens.features[i * 10 + 4] > 0.0)).collect();
        tokens.features.iter_mut().skip(4).step_by(10).for_each(|v| *v *= 5.0);
        let e = SegExample {
            patch_labels: face_labels.chunks(64).map(majority).collect(),
            rows: (0..n * 64).rev().collect(),
            face_labels,
            tokens,
        };
        let mut m = tiny_model(2);
        let cfg = FinetuneConfig { epochs: 60, lr: 1e-2, batch_size: 1, milestones: vec![], ..FinetuneConfig::segmentation() };
        let mut t = Finetuner::new(cfg, Tuning::Full, 0).unwrap();
        let first = t.segmentation_epoch(&mut m, std::slice::from_ref(&e)).unwrap();
        for _ in 1..60 {
            t.segmentation_epoch(&mut m, std::slice::from_ref(&e)).unwrap();
        }
        let acc = seg_accuracy(&m, std::slice::from_ref(&e)).unwrap();
        assert!(acc > 0.9 && acc > first.train_accuracy - 1e-9, "accuracy {acc}");
        let preds = segment(&m, &e).unwrap();
        assert_eq!(preds.len(), n * 64);
    }
}
