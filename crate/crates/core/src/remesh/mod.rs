//! Regularizing remesher: QEM simplification to a coarse base mesh followed
//! by hierarchical 1-to-4 subdivision whose vertices are snapped back onto
//! the input surface.
//!
//! The faces descending from one base face form a patch. Within a patch,
//! faces are ranked by the subdivision recursion: every split emits the
//! corner children at vertex 0, 1 and 2 and then the centre child, and the
//! recursion starts at the base face's lowest-index vertex.

pub mod bvh;
mod qem;
mod subdivide;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bvh::{ClosestPoint, TriangleBvh};
pub use qem::{collapse_to, CollapseOptions, CollapseOutcome};
pub use subdivide::{subdivide_project, subdivide_project_bvh};

use crate::mesh::{load_mesh_file, manifold_report, save_mesh_file, ManifoldReport, Mesh, MeshError};

/// Jitter added to collapse costs for randomized base meshes, relative to
/// the median edge cost.
pub const COLLAPSE_JITTER: f64 = 0.1;

#[derive(Debug, Error)]
pub enum RemeshError {
    #[error("input is not edge-manifold ({} non-manifold edges)", .0.non_manifold_edge_count)]
    NonManifold(ManifoldReport),
    #[error("mesh has {faces} faces, fewer than the required {required}")]
    TooFewFaces { faces: usize, required: usize },
    #[error("simplification stalled at {achieved} faces, above the limit of {limit}")]
    Stall { achieved: usize, limit: usize },
    #[error("projection failed: {0}")]
    Projection(String),
    #[error("invalid remesh configuration: {0}")]
    InvalidConfig(String),
    #[error("annotation file {path}: {message}")]
    Annotation { path: PathBuf, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemeshConfig {
    pub min_faces: usize,
    pub max_faces: usize,
    /// Face budget of the uniform pre-simplification step.
    pub simplify_target: usize,
    /// Number of 1-to-4 subdivision rounds.
    pub levels: u32,
    pub seed: u64,
}

impl Default for RemeshConfig {
    fn default() -> Self {
        Self { min_faces: 96, max_faces: 256, simplify_target: 500, levels: 3, seed: 0 }
    }
}

impl RemeshConfig {
    pub fn validate(&self) -> Result<(), RemeshError> {
        if self.min_faces < 4 || self.min_faces > self.max_faces {
            return Err(RemeshError::InvalidConfig(format!(
                "face bounds [{}, {}] are not a valid range",
                self.min_faces, self.max_faces
            )));
        }
        if self.simplify_target < self.max_faces {
            return Err(RemeshError::InvalidConfig(format!(
                "simplify_target {} is below max_faces {}",
                self.simplify_target, self.max_faces
            )));
        }
        if !(1..=5).contains(&self.levels) {
            return Err(RemeshError::InvalidConfig(format!("levels {} outside 1..=5", self.levels)));
        }
        Ok(())
    }
}

/// Output of [`simplify`].
#[derive(Debug, Clone)]
pub struct Simplified {
    pub mesh: Mesh,
    /// Set when the target could not be reached without breaking manifoldness.
    pub stalled: bool,
}

/// Coarse mesh whose faces define the patches.
#[derive(Debug, Clone)]
pub struct BaseMesh {
    pub mesh: Mesh,
    /// Closest point on the source surface for every base vertex.
    pub provenance: Vec<Point3<f64>>,
}

/// Patch-structured mesh. Faces are stored patch-major with ascending rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TMesh {
    pub mesh: Mesh,
    pub patch_id: Vec<usize>,
    pub within_patch_rank: Vec<usize>,
    pub subdivision_level: u32,
    pub num_patches: usize,
}

impl TMesh {
    pub fn faces_per_patch(&self) -> usize {
        1 << (2 * self.subdivision_level)
    }

    /// Writes the geometry as OBJ and the patch annotation next to it
    /// (`<stem>.patches`, one `patch_id rank` line per face).
    pub fn save(&self, obj_path: &Path) -> Result<(), RemeshError> {
        save_mesh_file(&self.mesh, obj_path)?;
        let mut out = BufWriter::new(File::create(annotation_path(obj_path))?);
        for (p, r) in self.patch_id.iter().zip(&self.within_patch_rank) {
            writeln!(out, "{p} {r}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(obj_path: &Path) -> Result<Self, RemeshError> {
        let mesh = load_mesh_file(obj_path)?;
        let path = annotation_path(obj_path);
        let bad = |message: String| RemeshError::Annotation { path: path.clone(), message };
        let reader = BufReader::new(File::open(&path)?);
        let mut patch_id = Vec::with_capacity(mesh.num_faces());
        let mut rank = Vec::with_capacity(mesh.num_faces());
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(p)), Some(Ok(r)), None) => {
                    patch_id.push(p);
                    rank.push(r);
                }
                _ => return Err(bad(format!("line {}: expected `patch_id rank`", i + 1))),
            }
        }
        if patch_id.len() != mesh.num_faces() {
            return Err(bad(format!("{} annotations for {} faces", patch_id.len(), mesh.num_faces())));
        }
        let num_patches = patch_id.iter().max().map_or(0, |m| m + 1);
        let per_patch = mesh.num_faces() / num_patches.max(1);
        let level = (per_patch.max(1).trailing_zeros() / 2) as u32;
        if num_patches == 0 || 1usize << (2 * level) != per_patch || per_patch * num_patches != mesh.num_faces() {
            return Err(bad(format!("{} faces do not split into equal 4^t patches", mesh.num_faces())));
        }
        Ok(Self { mesh, patch_id, within_patch_rank: rank, subdivision_level: level, num_patches })
    }
}

pub fn annotation_path(obj_path: &Path) -> PathBuf {
    obj_path.with_extension("patches")
}

fn require_edge_manifold(mesh: &Mesh) -> Result<(), RemeshError> {
    let report = manifold_report(mesh);
    if report.is_edge_manifold {
        Ok(())
    } else {
        Err(RemeshError::NonManifold(report))
    }
}

/// Deterministic QEM simplification to at most `target_faces` faces.
pub fn simplify(mesh: &Mesh, target_faces: usize) -> Result<Simplified, RemeshError> {
    if target_faces < 4 {
        return Err(RemeshError::InvalidConfig("target_faces must be at least 4".into()));
    }
    require_edge_manifold(mesh)?;
    let out = collapse_to(mesh, &CollapseOptions { target_faces, min_faces: 4, jitter: None });
    if out.stalled {
        log::warn!("simplification stalled at {} faces (target {target_faces})", out.mesh.num_faces());
    }
    Ok(Simplified { mesh: out.mesh, stalled: out.stalled })
}

/// Randomized simplification to a base mesh with a face count in
/// `[min_faces, max_faces]`. Collapsing continues until the next collapse
/// would drop below `min_faces` or no valid collapse is left.
pub fn build_base(mesh: &Mesh, min_faces: usize, max_faces: usize, rng_seed: u64) -> Result<BaseMesh, RemeshError> {
    require_edge_manifold(mesh)?;
    let n = mesh.num_faces();
    if n < min_faces {
        return Err(RemeshError::TooFewFaces { faces: n, required: min_faces });
    }
    let simplified = if n <= max_faces {
        mesh.clone()
    } else {
        collapse_to(
            mesh,
            &CollapseOptions {
                target_faces: min_faces,
                min_faces,
                jitter: Some((COLLAPSE_JITTER, rng_seed)),
            },
        )
        .mesh
    };
    if simplified.num_faces() > max_faces {
        return Err(RemeshError::Stall { achieved: simplified.num_faces(), limit: max_faces });
    }
    let bvh = TriangleBvh::new(mesh);
    let provenance = simplified
        .vertices
        .iter()
        .map(|p| bvh.closest_point(p).map(|c| c.point).unwrap_or(*p))
        .collect();
    Ok(BaseMesh { mesh: simplified, provenance })
}

/// Full remeshing: uniform simplification, randomized base mesh, then
/// `levels` rounds of subdivision projected onto the raw surface.
pub fn remesh_pipeline(raw: &Mesh, config: &RemeshConfig) -> Result<TMesh, RemeshError> {
    config.validate()?;
    require_edge_manifold(raw)?;
    let target = TriangleBvh::new(raw);
    remesh_with_target(raw, config, config.seed, &target)
}

fn remesh_with_target(raw: &Mesh, config: &RemeshConfig, seed: u64, target: &TriangleBvh) -> Result<TMesh, RemeshError> {
    let simplified = simplify(raw, config.simplify_target)?;
    let base = build_base(&simplified.mesh, config.min_faces, config.max_faces, seed)?;
    subdivide_project_bvh(&base, config.levels, target)
}

/// `k` remeshed variants using seeds `base_seed .. base_seed + k`.
pub fn remesh_variants(raw: &Mesh, config: &RemeshConfig, k: usize, base_seed: u64) -> Vec<Result<TMesh, RemeshError>> {
    if let Err(e) = config.validate().and_then(|_| require_edge_manifold(raw)) {
        let msg = e.to_string();
        return (0..k)
            .map(|_| Err(RemeshError::InvalidConfig(msg.clone())))
            .collect();
    }
    let target = TriangleBvh::new(raw);
    (0..k as u64)
        .map(|i| remesh_with_target(raw, config, base_seed + i, &target))
        .collect()
}
