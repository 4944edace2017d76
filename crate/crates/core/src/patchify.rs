//! Token extraction: per-patch face-feature blocks, patch centres, relative
//! ground-truth vertices and random mask partitions.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{face_centers, face_features, MeshError, FEATURE_DIM};
use crate::remesh::TMesh;

pub const FACES_PER_PATCH: usize = 64;
pub const VERTICES_PER_PATCH: usize = 45;
/// Flattened feature width of one patch token.
pub const PATCH_FEATURE_LEN: usize = FACES_PER_PATCH * FEATURE_DIM;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patch {patch} has {faces} faces, expected {FACES_PER_PATCH}")]
    FaceCount { patch: usize, faces: usize },
    #[error("patch {patch} has {vertices} unique vertices, expected {VERTICES_PER_PATCH}")]
    VertexCount { patch: usize, vertices: usize },
    #[error("patch {patch} has duplicated or missing rank {rank}")]
    Rank { patch: usize, rank: usize },
    #[error("mask ratio {0} outside [0, 1)")]
    Ratio(f64),
    #[error("malformed patch blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One token: 64 face features in rank order plus patch geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub features: Vec<[f64; FEATURE_DIM]>,
    /// Mean of the 64 face centroids.
    pub center: Point3<f64>,
    /// Unique patch vertices minus the centre, ascending global index.
    pub relative_vertices: Vec<Vector3<f64>>,
    /// Face centroids minus the centre, rank order.
    pub face_centers_rel: Vec<Vector3<f64>>,
}

impl Patch {
    pub fn flat_features(&self) -> impl Iterator<Item = f64> + '_ {
        self.features.iter().flatten().copied()
    }
}

/// Groups the faces of a level-3 t-mesh into patches.
pub fn split_patches(tmesh: &TMesh) -> Result<Vec<Patch>, PatchError> {
    let mesh = &tmesh.mesh;
    let feats = face_features(mesh)?;
    let centers = face_centers(mesh);
    let mut members: Vec<Vec<Option<usize>>> = vec![vec![None; FACES_PER_PATCH]; tmesh.num_patches];
    let mut counts = vec![0usize; tmesh.num_patches];
    for (f, (&p, &r)) in tmesh.patch_id.iter().zip(&tmesh.within_patch_rank).enumerate() {
        if p >= tmesh.num_patches {
            return Err(PatchError::FaceCount { patch: p, faces: 0 });
        }
        counts[p] += 1;
        if r >= FACES_PER_PATCH || members[p][r].replace(f).is_some() {
            return Err(PatchError::Rank { patch: p, rank: r });
        }
    }
    let mut patches = Vec::with_capacity(tmesh.num_patches);
    for (p, slots) in members.iter().enumerate() {
        if counts[p] != FACES_PER_PATCH {
            return Err(PatchError::FaceCount { patch: p, faces: counts[p] });
        }
        let faces: Vec<usize> = slots.iter().map(|s| s.expect("all ranks filled")).collect();
        let center = Point3::from(faces.iter().fold(Vector3::zeros(), |acc, &f| acc + centers[f].coords) / FACES_PER_PATCH as f64);
        let verts: BTreeSet<usize> = faces.iter().flat_map(|&f| mesh.faces[f]).collect();
        if verts.len() != VERTICES_PER_PATCH {
            return Err(PatchError::VertexCount { patch: p, vertices: verts.len() });
        }
        patches.push(Patch {
            features: faces.iter().map(|&f| feats[f].to_array()).collect(),
            center,
            relative_vertices: verts.iter().map(|&v| mesh.vertices[v] - center).collect(),
            face_centers_rel: faces.iter().map(|&f| centers[f] - center).collect(),
        });
    }
    Ok(patches)
}

/// Split of token indices into masked and visible sets, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPartition {
    pub fn none(g: usize) -> Self {
        Self { masked: Vec::new(), visible: (0..g).collect() }
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }
}

/// Number of masked tokens, `round(ratio * g)` with halves rounded up.
pub fn mask_count(g: usize, ratio: f64) -> usize {
    ((ratio * g as f64).round() as usize).min(g)
}

pub fn make_mask(g: usize, ratio: f64, rng_seed: u64) -> Result<MaskPartition, PatchError> {
    make_mask_with(g, ratio, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// As [`make_mask`], drawing from a caller-owned stream.
pub fn make_mask_with(g: usize, ratio: f64, rng: &mut impl rand::Rng) -> Result<MaskPartition, PatchError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PatchError::Ratio(ratio));
    }
    let m = mask_count(g, ratio);
    let mut masked: Vec<usize> = rand::seq::index::sample(rng, g, m).into_vec();
    masked.sort_unstable();
    let visible = (0..g).filter(|i| masked.binary_search(i).is_err()).collect();
    Ok(MaskPartition { masked, visible })
}

/// Arrangement of the 64 faces inside every patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaceOrder {
    Original,
    /// Recursion anchored at the next vertex of every face.
    RotateL,
    /// Recursion anchored at the previous vertex of every face.
    RotateR,
    /// One seeded shuffle shared by all patches.
    Random,
}

impl FaceOrder {
    pub const ALL: [FaceOrder; 4] = [Self::Original, Self::RotateL, Self::RotateR, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::RotateL => "rotate-l",
            Self::RotateR => "rotate-r",
            Self::Random => "random",
        }
    }

    fn shift(self) -> usize {
        match self {
            Self::RotateL => 1,
            Self::RotateR => 2,
            _ => 0,
        }
    }

    /// `perm[new_rank] = original_rank`.
    pub fn permutation(self, seed: u64) -> Vec<usize> {
        match self {
            Self::Original => (0..FACES_PER_PATCH).collect(),
            Self::Random => {
                let mut p: Vec<usize> = (0..FACES_PER_PATCH).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                p
            }
            Self::RotateL | Self::RotateR => {
                let s = self.shift();
                (0..FACES_PER_PATCH)
                    .map(|rank| {
                        // three base-4 digits, most significant first
                        (0..3).rev().fold(0, |acc, level| {
                            let d = (rank >> (2 * level)) & 3;
                            acc * 4 + if d < 3 { (d + s) % 3 } else { 3 }
                        })
                    })
                    .collect()
            }
        }
    }

    /// Rearranges the feature rows (and face centres) of every patch. Rotated
    /// orders also rotate the per-vertex entries of each face feature, as the
    /// faces' own vertex order starts at a different corner.
    pub fn apply(self, patches: &mut [Patch], seed: u64) {
        if self == Self::Original {
            return;
        }
        let perm = self.permutation(seed);
        let s = self.shift();
        for patch in patches {
            let feats: Vec<[f64; FEATURE_DIM]> = perm
                .iter()
                .map(|&r| {
                    let mut f = patch.features[r];
                    let old = f;
                    for k in 0..3 {
                        f[1 + k] = old[1 + (k + s) % 3];
                        f[7 + k] = old[7 + (k + s) % 3];
                    }
                    f
                })
                .collect();
            patch.features = feats;
            patch.face_centers_rel = perm.iter().map(|&r| patch.face_centers_rel[r]).collect();
        }
    }
}

impl FromStr for FaceOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown face order `{s}`"))
    }
}

/// Sidecar description of an exported patch blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub patches: usize,
    pub faces_per_patch: usize,
    pub feature_dim: usize,
    pub vertices_per_patch: usize,
    pub features_file: String,
    pub vertices_file: String,
    pub centers: Vec<[f64; 3]>,
}

fn write_block(path: &Path, header: [u32; 3], values: impl Iterator<Item = f64>) -> Result<(), PatchError> {
    let mut out = BufWriter::new(File::create(path)?);
    for h in header {
        out.write_all(&h.to_le_bytes())?;
    }
    for v in values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_block(path: &Path) -> Result<([u32; 3], Vec<f32>), PatchError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || bytes.len() % 4 != 0 {
        return Err(PatchError::Blob(format!("{} has {} bytes", path.display(), bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let header = [word(0), word(1), word(2)];
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let expected = header.iter().map(|&h| h as usize).product::<usize>();
    if values.len() != expected {
        return Err(PatchError::Blob(format!("{}: header {:?} but {} values", path.display(), header, values.len())));
    }
    Ok((header, values))
}

/// Writes `<stem>.features.bin`, `<stem>.vertices.bin` and `<stem>.json`.
/// Both blobs hold little-endian `u32` dimensions followed by `f32` values.
pub fn export_patches(patches: &[Patch], dir: &Path, stem: &str) -> Result<PathBuf, PatchError> {
    let g = patches.len() as u32;
    let features_file = format!("{stem}.features.bin");
    let vertices_file = format!("{stem}.vertices.bin");
    write_block(
        &dir.join(&features_file),
        [g, FACES_PER_PATCH as u32, FEATURE_DIM as u32],
        patches.iter().flat_map(|p| p.flat_features()),
    )?;
    write_block(
        &dir.join(&vertices_file),
        [g, VERTICES_PER_PATCH as u32, 3],
        patches.iter().flat_map(|p| p.relative_vertices.iter().flat_map(|v| [v.x, v.y, v.z])),
    )?;
    let manifest = BlobManifest {
        patches: patches.len(),
        faces_per_patch: FACES_PER_PATCH,
        feature_dim: FEATURE_DIM,
        vertices_per_patch: VERTICES_PER_PATCH,
        features_file,
        vertices_file,
        centers: patches.iter().map(|p| [p.center.x, p.center.y, p.center.z]).collect(),
    };
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| PatchError::Blob(e.to_string()))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

/// Reads an exported blob back. Face centres are not part of the format and
/// come back empty.
pub fn import_patches(manifest_path: &Path) -> Result<Vec<Patch>, PatchError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let m: BlobManifest = serde_json::from_str(&text).map_err(|e| PatchError::Blob(e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let (fh, fv) = read_block(&dir.join(&m.features_file))?;
    let (vh, vv) = read_block(&dir.join(&m.vertices_file))?;
    let g = m.patches as u32;
    if fh != [g, FACES_PER_PATCH as u32, FEATURE_DIM as u32] || vh != [g, VERTICES_PER_PATCH as u32, 3] || m.centers.len() != m.patches {
        return Err(PatchError::Blob(format!("header mismatch: {fh:?} / {vh:?} for {} patches", m.patches)));
    }
    Ok((0..m.patches)
        .map(|p| {
            let fb = &fv[p * PATCH_FEATURE_LEN..(p + 1) * PATCH_FEATURE_LEN];
            let vb = &vv[p * VERTICES_PER_PATCH * 3..(p + 1) * VERTICES_PER_PATCH * 3];
            Patch {
                features: fb
                    .chunks_exact(FEATURE_DIM)
                    .map(|c| std::array::from_fn(|i| f64::from(c[i])))
                    .collect(),
                center: Point3::from(m.centers[p]),
                relative_vertices: vb
                    .chunks_exact(3)
                    .map(|c| Vector3::new(c[0].into(), c[1].into(), c[2].into()))
                    .collect(),
                face_centers_rel: Vec::new(),
            }
        })
        .collect())
}
