use std::collections::BTreeMap;

use super::{ModelConfig, ModelError, ParamStore, PosStrategy};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::mesh::FEATURE_DIM;
use crate::patchify::{MaskPartition, Patch, FACES_PER_PATCH, PATCH_FEATURE_LEN, VERTICES_PER_PATCH};

type Result<T> = std::result::Result<T, ModelError>;

/// Model inputs of one mesh, flattened row-major in token order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub count: usize,
    /// `count x 640`
    pub features: Vec<f64>,
    /// `count x 3`
    pub centers: Vec<f64>,
    /// `count x 64 x 3`, absolute coordinates; empty when unavailable.
    pub face_centers: Vec<f64>,
    /// `count x 45 x 3`, relative to the patch centre.
    pub relative_vertices: Vec<f64>,
}

impl Tokens {
    pub fn from_patches(patches: &[Patch]) -> Self {
        let has_faces = patches.iter().all(|p| p.face_centers_rel.len() == FACES_PER_PATCH);
        Self {
            count: patches.len(),
            features: patches.iter().flat_map(|p| p.flat_features()).collect(),
            centers: patches.iter().flat_map(|p| [p.center.x, p.center.y, p.center.z]).collect(),
            face_centers: if has_faces {
                patches
                    .iter()
                    .flat_map(|p| p.face_centers_rel.iter().flat_map(move |c| (p.center + c).coords.into_iter().copied().collect::<Vec<_>>()))
                    .collect()
            } else {
                Vec::new()
            },
            relative_vertices: patches
                .iter()
                .flat_map(|p| p.relative_vertices.iter().flat_map(|v| [v.x, v.y, v.z]))
                .collect(),
        }
    }

    fn rows<T: Real>(data: &[f64], width: usize, rows: &[usize], shape_tail: &[usize]) -> Tensor<T> {
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend(data[r * width..(r + 1) * width].iter().map(|&v| T::of(v)));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(shape_tail);
        Tensor::new(shape, out).expect("row width matches shape")
    }

    /// Feature rows `[rows, 640]`.
    pub fn feature_rows<T: Real>(&self, rows: &[usize]) -> Tensor<T> {
        Self::rows(&self.features, PATCH_FEATURE_LEN, rows, &[PATCH_FEATURE_LEN])
    }

    /// Ground-truth relative vertices `[rows, 45, 3]`.
    pub fn vertex_rows<T: Real>(&self, rows: &[usize]) -> Tensor<T> {
        Self::rows(&self.relative_vertices, VERTICES_PER_PATCH * 3, rows, &[VERTICES_PER_PATCH, 3])
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.count).collect()
    }

    /// Tokens reordered so that new token `i` is old token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |data: &[f64], w: usize| -> Vec<f64> {
            if data.is_empty() {
                return Vec::new();
            }
            perm.iter().flat_map(|&r| data[r * w..(r + 1) * w].iter().copied()).collect()
        };
        Self {
            count: perm.len(),
            features: pick(&self.features, PATCH_FEATURE_LEN),
            centers: pick(&self.centers, 3),
            face_centers: pick(&self.face_centers, FACES_PER_PATCH * 3),
            relative_vertices: pick(&self.relative_vertices, VERTICES_PER_PATCH * 3),
        }
    }
}

/// How a parameter enters the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Skip,
    Frozen,
    Trainable,
}

/// Graph handles of bound parameters.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, how: impl Fn(&str) -> Binding) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = match how(name) {
                Binding::Skip => continue,
                Binding::Frozen => g.input(t.clone()),
                Binding::Trainable => g.param(t.clone()),
            };
            vars.insert(name.clone(), v);
        }
        Self { vars }
    }

    pub fn trainable<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>) -> Self {
        Self::bind(g, params, |_| Binding::Trainable)
    }

    pub fn frozen<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>) -> Self {
        Self::bind(g, params, |_| Binding::Frozen)
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn linear<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, bias)?)
}

/// Two linear layers with a GELU in between.
fn mlp2<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, b, &format!("{name}.fc2"), h)
}

fn norm<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let y = g.layer_norm(x, eps)?;
    let y = g.mul(y, b.var(&format!("{name}.gamma"))?)?;
    Ok(g.add(y, b.var(&format!("{name}.beta"))?)?)
}

/// Pre-norm block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
/// `x` is `[tokens, dim]`.
pub fn transformer_block<T: Real>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, heads: usize, eps: f64) -> Result<Var> {
    let (n, d) = match g.shape(x) {
        &[n, d] => (n, d),
        s => return Err(ModelError::Input(format!("block input must be [tokens, dim], got {s:?}"))),
    };
    let dh = d / heads;
    let h = norm(g, b, &format!("{prefix}.ln1"), x, eps)?;
    let qkv = linear(g, b, &format!("{prefix}.attn.qkv"), h)?;
    let qkv = g.reshape(qkv, &[n, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[1, 2, 0, 3])?;
    let mut part = |i: usize| -> Result<Var> {
        let s = g.slice(qkv, 0, i, i + 1)?;
        Ok(g.reshape(s, &[heads, n, dh])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[n, d])?;
    let out = linear(g, b, &format!("{prefix}.attn.proj"), ctx)?;
    let x = g.add(x, out)?;
    let h = norm(g, b, &format!("{prefix}.ln2"), x, eps)?;
    let m = mlp2(g, b, &format!("{prefix}.mlp"), h)?;
    Ok(g.add(x, m)?)
}

fn stack<T: Real>(g: &mut Graph<T>, b: &Bound, prefix: &str, layers: usize, mut x: Var, cfg: &ModelConfig) -> Result<Var> {
    for l in 0..layers {
        x = transformer_block(g, b, &format!("{prefix}.{l}"), x, cfg.heads, cfg.ln_eps)?;
    }
    norm(g, b, &format!("{prefix}.norm"), x, cfg.ln_eps)
}

/// Patch-embedding MLP on `[tokens, 640]` features.
pub fn embed_patches<T: Real>(g: &mut Graph<T>, b: &Bound, features: Var) -> Result<Var> {
    mlp2(g, b, "patch_embed", features)
}

/// Positional embeddings `[count, dim]` of all tokens.
pub fn embed_positions<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, tokens: &Tokens) -> Result<Var> {
    let n = tokens.count;
    let need_faces = || -> Result<()> {
        if tokens.face_centers.len() == n * FACES_PER_PATCH * 3 {
            Ok(())
        } else {
            Err(ModelError::Input(format!("strategy {} needs per-face centres", cfg.pos_strategy)))
        }
    };
    match cfg.pos_strategy {
        PosStrategy::Learnable => {
            if n > cfg.max_tokens {
                return Err(ModelError::Input(format!("{n} tokens exceed the positional table of {}", cfg.max_tokens)));
            }
            Ok(g.gather_rows(b.var("pos.table")?, &tokens.all())?)
        }
        PosStrategy::PatchCenter => {
            let c = g.input(Tensor::from_f64(&[n, 3], &tokens.centers)?);
            mlp2(g, b, "pos", c)
        }
        PosStrategy::PerFaceMaxPool => {
            need_faces()?;
            let c = g.input(Tensor::from_f64(&[n * FACES_PER_PATCH, 3], &tokens.face_centers)?);
            let e = mlp2(g, b, "pos", c)?;
            let e = g.reshape(e, &[n, FACES_PER_PATCH, cfg.embed_dim])?;
            Ok(g.max_over_axis(e, 1)?)
        }
        PosStrategy::Flatten => {
            need_faces()?;
            let c = g.input(Tensor::from_f64(&[n, FACES_PER_PATCH * 3], &tokens.face_centers)?);
            mlp2(g, b, "pos", c)
        }
    }
}

/// Encoder stack and final norm on `[tokens, dim]` inputs.
pub fn encode<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    if g.shape(x).first().copied().unwrap_or(0) == 0 {
        return Err(ModelError::Input("encoder needs at least one token".into()));
    }
    stack(g, b, "enc", cfg.encoder_layers, x, cfg)
}

/// Embeds and encodes the tokens listed in `rows`. Only their features enter
/// the graph. Returns the encoder output and the positional embeddings of
/// all tokens.
fn encode_rows<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, tokens: &Tokens, rows: &[usize]) -> Result<(Var, Var)> {
    let feats = g.input(tokens.feature_rows(rows));
    let e = embed_patches(g, b, feats)?;
    let p_all = embed_positions(g, b, cfg, tokens)?;
    let p = if rows.len() == tokens.count && rows.iter().enumerate().all(|(i, &r)| i == r) {
        p_all
    } else {
        g.gather_rows(p_all, rows)?
    };
    let x = g.add(e, p)?;
    Ok((encode(g, b, cfg, x)?, p_all))
}

/// Encoder output `[count, dim]` for all tokens.
pub fn encode_tokens<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, tokens: &Tokens) -> Result<Var> {
    Ok(encode_rows(g, b, cfg, tokens, &tokens.all())?.0)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOutputs {
    /// Encoder output of the visible tokens, `[visible, dim]`.
    pub encoded: Var,
    /// Predicted relative vertices of every token, `[count, 45, 3]`.
    pub vertices: Var,
    /// Predicted face features of every token, `[count, 640]`.
    pub faces: Var,
}

/// Masked-autoencoder forward pass. The encoder sees only visible tokens;
/// the decoder sees the encoded tokens plus the shared mask embedding at
/// every masked position, each with its positional embedding added.
pub fn pretrain_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    tokens: &Tokens,
    mask: &MaskPartition,
) -> Result<PretrainOutputs> {
    if mask.len() != tokens.count {
        return Err(ModelError::Input(format!("mask covers {} of {} tokens", mask.len(), tokens.count)));
    }
    let (encoded, p_all) = encode_rows(g, b, cfg, tokens, &mask.visible)?;
    let dd = cfg.decoder_dim;
    let (z, p_dec) = if dd != cfg.embed_dim {
        (linear(g, b, "dec.embed", encoded)?, linear(g, b, "dec.pos", p_all)?)
    } else {
        (encoded, p_all)
    };
    let mask_token = g.reshape(b.var("mask_token")?, &[1, dd])?;
    let mask_rows = g.gather_rows(mask_token, &vec![0; mask.masked.len()])?;
    let joined = g.concat(&[z, mask_rows], 0)?;
    // joined holds visible tokens then masked ones; restore token order
    let mut source = vec![0; tokens.count];
    for (i, &t) in mask.visible.iter().enumerate() {
        source[t] = i;
    }
    for (j, &t) in mask.masked.iter().enumerate() {
        source[t] = mask.visible.len() + j;
    }
    let full = g.gather_rows(joined, &source)?;
    let x = g.add(full, p_dec)?;
    let y = stack(g, b, "dec", cfg.decoder_layers, x, cfg)?;
    let vertices = linear(g, b, "head.vertex", y)?;
    let vertices = g.reshape(vertices, &[tokens.count, VERTICES_PER_PATCH, 3])?;
    let faces = linear(g, b, "head.face", y)?;
    Ok(PretrainOutputs { encoded, vertices, faces })
}

/// Max-pooled encoder output `[1, dim]`, before the classifier's
/// standardization.
pub fn pooled_forward<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, tokens: &Tokens) -> Result<Var> {
    let h = encode_tokens(g, b, cfg, tokens)?;
    let pooled = g.max_over_axis(h, 0)?;
    Ok(g.reshape(pooled, &[1, cfg.embed_dim])?)
}

/// Class logits `[1, classes]`: the max-pooled encoder output, shifted and
/// scaled per dimension, then a linear layer.
pub fn classify_forward<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, tokens: &Tokens) -> Result<Var> {
    let pooled = pooled_forward(g, b, cfg, tokens)?;
    let centred = g.sub(pooled, b.var("cls.pool.shift")?)?;
    let z = g.mul(centred, b.var("cls.pool.scale")?)?;
    linear(g, b, "cls", z)
}

/// Variance floor of the pooled-feature standardization.
pub const POOL_EPS: f64 = 1e-6;

/// Class logits `[batch, classes]` for stacked pooled vectors `[batch, dim]`,
/// standardized per dimension with the statistics of the batch itself. Used
/// in training; [`classify_forward`] applies the stored statistics instead.
pub fn classify_batch_forward<T: Real>(g: &mut Graph<T>, b: &Bound, pooled: Var) -> Result<Var> {
    let t = g.transpose(pooled)?;
    let n = g.layer_norm(t, POOL_EPS)?;
    let z = g.transpose(n)?;
    linear(g, b, "cls", z)
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOutputs {
    /// `[count, parts]` from the token embedding alone.
    pub patch_logits: Var,
    /// `[count * 64, parts]` from the token embedding joined with the
    /// embedded face feature; faces in token-major rank order.
    pub face_logits: Var,
}

pub fn segment_forward<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, tokens: &Tokens) -> Result<SegmentOutputs> {
    let h = encode_tokens(g, b, cfg, tokens)?;
    let patch_logits = linear(g, b, "seg.patch", h)?;
    let faces = tokens.count * FACES_PER_PATCH;
    let ff = g.input(Tensor::from_f64(&[faces, FEATURE_DIM], &tokens.features)?);
    let fe = linear(g, b, "seg.face_embed", ff)?;
    let fe = g.gelu(fe);
    let owner: Vec<usize> = (0..faces).map(|f| f / FACES_PER_PATCH).collect();
    let per_face = g.gather_rows(h, &owner)?;
    let joined = g.concat(&[per_face, fe], 1)?;
    let face_logits = mlp2(g, b, "seg.face", joined)?;
    Ok(SegmentOutputs { patch_logits, face_logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchify::make_mask;
    use crate::transformer::MeshMae;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(pos: PosStrategy) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 2,
            decoder_dim: 8,
            pos_strategy: pos,
            max_tokens: 16,
            ..ModelConfig::desk()
        }
    }

    pub(crate) fn random_tokens(n: usize, seed: u64) -> Tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |len: usize, s: f64| (0..len).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        Tokens {
            count: n,
            features: gen(n * PATCH_FEATURE_LEN, 1.0),
            centers: gen(n * 3, 1.0),
            face_centers: gen(n * FACES_PER_PATCH * 3, 1.0),
            relative_vertices: gen(n * VERTICES_PER_PATCH * 3, 0.2),
        }
    }

    fn model(pos: PosStrategy) -> MeshMae {
        MeshMae::new(tiny(pos), 1).unwrap().with_classifier(3, 2).with_segmentation(2, 3)
    }

    fn rows(g: &Graph<f64>, v: Var) -> Vec<Vec<f64>> {
        let w = *g.shape(v).last().unwrap();
        g.value(v).data().chunks(w).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn zero_features_give_bias_image() {
        let m = model(PosStrategy::PatchCenter);
        let p = m.params.cast::<f64>();
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let x = g.input(Tensor::zeros(&[3, PATCH_FEATURE_LEN]));
        let e = embed_patches(&mut g, &b, x).unwrap();
        // fc2(gelu(b1)) + b2, computed by hand
        let b1 = p.get("patch_embed.fc1.b").unwrap().data();
        let w2 = p.get("patch_embed.fc2.w").unwrap().data();
        let b2 = p.get("patch_embed.fc2.b").unwrap().data();
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let d = 8;
        let expected: Vec<f64> = (0..d).map(|j| b2[j] + (0..d).map(|i| gelu(b1[i]) * w2[i * d + j]).sum::<f64>()).collect();
        for r in rows(&g, e) {
            for (a, e) in r.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_maps_commute_with_permutation() {
        let m = model(PosStrategy::PatchCenter);
        let p = m.params.cast::<f64>();
        let t = random_tokens(5, 9);
        let perm = [3, 0, 4, 1, 2];
        let tp = t.permuted(&perm);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let h = encode_tokens(&mut g, &b, &m.config, &t).unwrap();
        let hp = encode_tokens(&mut g, &b, &m.config, &tp).unwrap();
        let (h, hp) = (rows(&g, h), rows(&g, hp));
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in hp[i].iter().zip(&h[src]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_strategy_properties() {
        let mut t = random_tokens(4, 1);
        t.centers.copy_within(0..3, 3); // token 1 shares token 0's centre
        let mut g = Graph::new();

        let md = model(PosStrategy::PatchCenter).params.cast::<f64>();
        let b = Bound::frozen(&mut g, &md);
        let pd = embed_positions(&mut g, &b, &tiny(PosStrategy::PatchCenter), &t).unwrap();
        let r = rows(&g, pd);
        assert_eq!(r[0], r[1]);
        assert_ne!(r[0], r[2]);

        let ma = model(PosStrategy::Learnable).params.cast::<f64>();
        let b = Bound::frozen(&mut g, &ma);
        let pa = embed_positions(&mut g, &b, &tiny(PosStrategy::Learnable), &t).unwrap();
        let moved = Tokens { centers: t.centers.iter().map(|c| c + 5.0).collect(), ..t.clone() };
        let pa2 = embed_positions(&mut g, &b, &tiny(PosStrategy::Learnable), &moved).unwrap();
        assert_eq!(g.value(pa), g.value(pa2));

        let mb = model(PosStrategy::PerFaceMaxPool).params.cast::<f64>();
        let b = Bound::frozen(&mut g, &mb);
        let pb = embed_positions(&mut g, &b, &tiny(PosStrategy::PerFaceMaxPool), &t).unwrap();
        let mut shuffled = t.clone();
        for tok in 0..4 {
            let base = tok * 64 * 3;
            let chunk: Vec<f64> = (0..64).rev().flat_map(|f| t.face_centers[base + f * 3..base + f * 3 + 3].to_vec()).collect();
            shuffled.face_centers[base..base + 192].copy_from_slice(&chunk);
        }
        let pb2 = embed_positions(&mut g, &b, &tiny(PosStrategy::PerFaceMaxPool), &shuffled).unwrap();
        assert_eq!(g.value(pb), g.value(pb2));

        let mc = model(PosStrategy::Flatten).params.cast::<f64>();
        let b = Bound::frozen(&mut g, &mc);
        let pc = embed_positions(&mut g, &b, &tiny(PosStrategy::Flatten), &t).unwrap();
        assert_eq!(g.shape(pc), &[4, 8]);
    }

    /// Plain-loop pre-norm block for a single head with unit norm gains.
    fn reference_block(x: &[Vec<f64>], p: &ParamStore<f64>) -> Vec<Vec<f64>> {
        let get = |n: &str| p.get(n).unwrap().data().to_vec();
        let d = x[0].len();
        let lin = |v: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let out = b.len();
            (0..out).map(|j| b[j] + v.iter().enumerate().map(|(i, vi)| vi * w[i * out + j]).sum::<f64>()).collect()
        };
        let ln = |v: &[f64]| -> Vec<f64> {
            let mu = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / d as f64;
            v.iter().map(|a| (a - mu) / (var + 1e-5).sqrt()).collect()
        };
        let (wqkv, bqkv) = (get("blk.attn.qkv.w"), get("blk.attn.qkv.b"));
        let qkv: Vec<Vec<f64>> = x.iter().map(|r| lin(&ln(r), &wqkv, &bqkv)).collect();
        let n = x.len();
        let mut out = Vec::new();
        for i in 0..n {
            let scores: Vec<f64> = (0..n).map(|j| (0..d).map(|c| qkv[i][c] * qkv[j][d + c]).sum::<f64>() / (d as f64).sqrt()).collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: Vec<f64> = (0..d).map(|c| (0..n).map(|j| e[j] / z * qkv[j][2 * d + c]).sum()).collect();
            let a = lin(&ctx, &get("blk.attn.proj.w"), &get("blk.attn.proj.b"));
            let x1: Vec<f64> = x[i].iter().zip(&a).map(|(u, v)| u + v).collect();
            let h = lin(&ln(&x1), &get("blk.mlp.fc1.w"), &get("blk.mlp.fc1.b"));
            let h: Vec<f64> = h.iter().map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())).collect();
            let m = lin(&h, &get("blk.mlp.fc2.w"), &get("blk.mlp.fc2.b"));
            out.push(x1.iter().zip(&m).map(|(u, v)| u + v).collect());
        }
        out
    }

    #[test]
    fn single_head_block_matches_reference() {
        let mut p = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let mut put = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let v = if name.ends_with("gamma") { vec![1.0; n] } else if name.ends_with("beta") { vec![0.0; n] } else {
                (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
            };
            p.insert(name, Tensor::new(shape.to_vec(), v).unwrap());
        };
        for (n, s) in [
            ("blk.ln1.gamma", vec![d]), ("blk.ln1.beta", vec![d]), ("blk.ln2.gamma", vec![d]), ("blk.ln2.beta", vec![d]),
            ("blk.attn.qkv.w", vec![d, 3 * d]), ("blk.attn.qkv.b", vec![3 * d]),
            ("blk.attn.proj.w", vec![d, d]), ("blk.attn.proj.b", vec![d]),
            ("blk.mlp.fc1.w", vec![d, 4 * d]), ("blk.mlp.fc1.b", vec![4 * d]),
            ("blk.mlp.fc2.w", vec![4 * d, d]), ("blk.mlp.fc2.b", vec![d]),
        ] {
            put(n, &s, &mut rng);
        }
        let x: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let xv = g.input(Tensor::new(vec![3, d], x.concat()).unwrap());
        let y = transformer_block(&mut g, &b, "blk", xv, 1, 1e-5).unwrap();
        let expected = reference_block(&x, &p);
        for (r, e) in rows(&g, y).iter().zip(&expected) {
            for (a, b) in r.iter().zip(e) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
        // one token: attention weight is exactly one
        let one = g.input(Tensor::new(vec![1, d], x[0].clone()).unwrap());
        let y1 = transformer_block(&mut g, &b, "blk", one, 1, 1e-5).unwrap();
        assert!(g.value(y1).is_finite());
    }

    #[test]
    fn decoder_shapes_and_shared_mask_token() {
        let m = model(PosStrategy::PatchCenter);
        let p = m.params.cast::<f64>();
        let mut t = random_tokens(6, 2);
        // tokens 1 and 4 share a centre; both will be masked
        t.centers.copy_within(3..6, 12);
        let mask = MaskPartition { masked: vec![1, 4], visible: vec![0, 2, 3, 5] };
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let out = pretrain_forward(&mut g, &b, &m.config, &t, &mask).unwrap();
        assert_eq!(g.shape(out.encoded), &[4, 8]);
        assert_eq!(g.shape(out.vertices), &[6, 45, 3]);
        assert_eq!(g.shape(out.faces), &[6, 640]);
        let f = rows(&g, out.faces);
        assert_eq!(f[1], f[4]);
        assert_ne!(f[1], f[0]);

        let none = MaskPartition::none(6);
        let out = pretrain_forward(&mut g, &b, &m.config, &t, &none).unwrap();
        assert_eq!(g.shape(out.faces), &[6, 640]);
    }

    #[test]
    fn masked_features_do_not_leak() {
        let m = model(PosStrategy::PatchCenter);
        let p = m.params.cast::<f64>();
        let t = random_tokens(10, 3);
        let mask = make_mask(10, 0.5, 4).unwrap();
        let mut t2 = t.clone();
        for &k in &mask.masked {
            for v in &mut t2.features[k * 640..(k + 1) * 640] {
                *v = *v * 3.0 + 1.0;
            }
        }
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let o1 = pretrain_forward(&mut g, &b, &m.config, &t, &mask).unwrap();
        let o2 = pretrain_forward(&mut g, &b, &m.config, &t2, &mask).unwrap();
        assert_eq!(g.value(o1.encoded), g.value(o2.encoded));
        assert_eq!(g.value(o1.faces), g.value(o2.faces));
        assert_eq!(g.value(o1.vertices), g.value(o2.vertices));
    }

    #[test]
    fn heads_have_expected_shapes() {
        let m = model(PosStrategy::PatchCenter);
        let p = m.params.cast::<f64>();
        let t = random_tokens(3, 4);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        let logits = classify_forward(&mut g, &b, &m.config, &t).unwrap();
        assert_eq!(g.shape(logits), &[1, 3]);
        let s = segment_forward(&mut g, &b, &m.config, &t).unwrap();
        assert_eq!(g.shape(s.patch_logits), &[3, 2]);
        assert_eq!(g.shape(s.face_logits), &[192, 2]);
        // faces of one patch share the token but not the prediction
        let f = rows(&g, s.face_logits);
        assert!(f[..64].iter().any(|r| r != &f[0]));
    }

    #[test]
    fn forward_is_finite_for_bounded_inputs() {
        let m = MeshMae::new(ModelConfig::desk(), 0).unwrap().with_classifier(3, 0);
        let mut t = random_tokens(20, 6);
        t.features.iter_mut().for_each(|v| *v *= 10.0 / (640f64).sqrt());
        let mut g = Graph::<f32>::new();
        let b = Bound::frozen(&mut g, &m.params);
        let l = classify_forward(&mut g, &b, &m.config, &t).unwrap();
        assert!(g.value(l).is_finite());
    }

    #[test]
    fn learnable_table_bounds_token_count() {
        let m = model(PosStrategy::Learnable);
        let p = m.params.cast::<f64>();
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &p);
        assert!(matches!(
            encode_tokens(&mut g, &b, &m.config, &random_tokens(17, 0)),
            Err(ModelError::Input(_))
        ));
    }
}
