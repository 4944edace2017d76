use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};

use super::{chamfer_l2, PretrainError};
use crate::autodiff::Graph;
use crate::dataset::{normalized_tmesh, patch_tokens};
use crate::mesh::{save_mesh_file, Mesh};
use crate::patchify::{make_mask, FaceOrder, FACES_PER_PATCH, VERTICES_PER_PATCH};
use crate::remesh::TMesh;
use crate::transformer::{pretrain_forward, Bound, MeshMae, Tokens};

/// Mask ratios of the side-by-side reconstruction figures.
pub const EXPORT_RATIOS: [f64; 3] = [0.5, 0.7, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionExport {
    pub predicted: PathBuf,
    pub ground_truth: PathBuf,
    pub visible: PathBuf,
    pub masked: Vec<usize>,
    /// Mean Chamfer distance over masked patches.
    pub mean_chamfer: f64,
}

fn write_points(path: &Path, points: &[Point3<f64>]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in points {
        writeln!(out, "v {} {} {}", p.x, p.y, p.z)?;
    }
    out.flush()
}

fn absolute(rel: &[f64], token: usize, tokens: &Tokens) -> Vec<Point3<f64>> {
    let c = Vector3::new(tokens.centers[token * 3], tokens.centers[token * 3 + 1], tokens.centers[token * 3 + 2]);
    rel.chunks(3).map(|v| Point3::new(v[0], v[1], v[2]) + c).collect()
}

/// Writes predicted and ground-truth vertices of the masked patches as point
/// clouds, plus the visible patches as a mesh, all in normalized coordinates.
/// Files are named `<stem>_r<percent>_{pred,gt,visible}.obj`.
pub fn export_reconstruction(
    model: &MeshMae,
    tmesh: &TMesh,
    ratio: f64,
    seed: u64,
    dir: &Path,
    stem: &str,
) -> Result<ReconstructionExport, PretrainError> {
    let tmesh = normalized_tmesh(tmesh);
    let tokens = patch_tokens(&tmesh, FaceOrder::Original, 0)?;
    let mask = make_mask(tokens.count, ratio, seed)?;
    let mut g = Graph::<f32>::new();
    let b = Bound::frozen(&mut g, &model.params);
    let out = pretrain_forward(&mut g, &b, &model.config, &tokens, &mask)?;
    let pred = g.value(out.vertices).to_f64_vec();
    let width = VERTICES_PER_PATCH * 3;

    let (mut pred_pts, mut gt_pts, mut chamfers) = (Vec::new(), Vec::new(), Vec::new());
    for &k in &mask.masked {
        let p = absolute(&pred[k * width..(k + 1) * width], k, &tokens);
        let q = absolute(&tokens.relative_vertices[k * width..(k + 1) * width], k, &tokens);
        let to_vec = |pts: &[Point3<f64>]| pts.iter().map(|p| p.coords).collect::<Vec<_>>();
        chamfers.push(chamfer_l2(&to_vec(&p), &to_vec(&q))?);
        pred_pts.extend(p);
        gt_pts.extend(q);
    }

    std::fs::create_dir_all(dir)?;
    let tag = format!("{stem}_r{:02}", (ratio * 100.0).round() as u32);
    let predicted = dir.join(format!("{tag}_pred.obj"));
    let ground_truth = dir.join(format!("{tag}_gt.obj"));
    let visible = dir.join(format!("{tag}_visible.obj"));
    write_points(&predicted, &pred_pts)?;
    write_points(&ground_truth, &gt_pts)?;

    let faces: Vec<[usize; 3]> = (0..tmesh.mesh.num_faces())
        .filter(|&f| !mask.is_masked(tmesh.patch_id[f]))
        .map(|f| tmesh.mesh.faces[f])
        .collect();
    debug_assert_eq!(faces.len(), mask.visible.len() * FACES_PER_PATCH);
    let visible_mesh = Mesh::new(tmesh.mesh.vertices.clone(), faces)
        .map_err(|e| PretrainError::Shape(format!("visible mesh: {e}")))?;
    save_mesh_file(&visible_mesh, &visible).map_err(|e| PretrainError::Shape(format!("visible mesh: {e}")))?;

    let mean_chamfer = if chamfers.is_empty() { 0.0 } else { chamfers.iter().sum::<f64>() / chamfers.len() as f64 };
    Ok(ReconstructionExport { predicted, ground_truth, visible, masked: mask.masked, mean_chamfer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remesh::{remesh_pipeline, RemeshConfig};
    use crate::synth::icosphere;
    use crate::transformer::ModelConfig;

    #[test]
    fn untrained_export_writes_valid_files() {
        let tm = remesh_pipeline(&icosphere(3), &RemeshConfig::default()).unwrap();
        let cfg = ModelConfig { embed_dim: 16, encoder_layers: 1, decoder_layers: 1, heads: 2, decoder_dim: 16, ..ModelConfig::desk() };
        let model = MeshMae::new(cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ratio in EXPORT_RATIOS {
            let e = export_reconstruction(&model, &tm, ratio, 1, dir.path(), "sphere").unwrap();
            let count = |p: &Path| std::fs::read_to_string(p).unwrap().lines().filter(|l| l.starts_with("v ")).count();
            assert_eq!(count(&e.predicted), e.masked.len() * VERTICES_PER_PATCH);
            assert_eq!(count(&e.ground_truth), e.masked.len() * VERTICES_PER_PATCH);
            let vis = crate::mesh::load_mesh_file(&e.visible).unwrap();
            assert_eq!(vis.num_faces(), (tm.num_patches - e.masked.len()) * FACES_PER_PATCH);
            assert!(e.mean_chamfer.is_finite() && e.mean_chamfer > 0.0);
        }
        assert!(dir.path().join("sphere_r70_gt.obj").exists());
    }
}
