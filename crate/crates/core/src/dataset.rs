//! Dataset directories and token preparation.
//!
//! Classification data lives in `<root>/<split>/<class>/<mesh>.obj`. A mesh
//! with a `.patches` sidecar is an already remeshed t-mesh; any other mesh
//! is remeshed on load. Segmentation labels sit next to the mesh in a
//! `.labels` file with one integer per face of that file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::downstream::transfer_labels;
use crate::mesh::{load_mesh_file, MeshError, MeshFormat};
use crate::patchify::{split_patches, FaceOrder, PatchError, FACES_PER_PATCH};
use crate::remesh::{annotation_path, remesh_pipeline, RemeshConfig, RemeshError, TMesh};
use crate::transformer::Tokens;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Mesh { path: PathBuf, source: MeshError },
    #[error("{path}: {source}")]
    Remesh { path: PathBuf, source: RemeshError },
    #[error("{path}: {message}")]
    Labels { path: PathBuf, message: String },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("{0}")]
    Layout(String),
}

type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// The same t-mesh with its vertices centred and scaled into the unit sphere.
pub fn normalized_tmesh(t: &TMesh) -> TMesh {
    TMesh { mesh: t.mesh.normalized(), ..t.clone() }
}

/// Tokens of a t-mesh as given, with the requested within-patch face order.
pub fn patch_tokens(t: &TMesh, order: FaceOrder, order_seed: u64) -> std::result::Result<Tokens, PatchError> {
    let mut patches = split_patches(t)?;
    order.apply(&mut patches, order_seed);
    Ok(Tokens::from_patches(&patches))
}

/// Normalizes the t-mesh, then extracts its tokens.
pub fn tmesh_tokens(t: &TMesh, order: FaceOrder, order_seed: u64) -> std::result::Result<Tokens, PatchError> {
    patch_tokens(&normalized_tmesh(t), order, order_seed)
}

/// T-mesh face index behind every token row of [`patch_tokens`]: row
/// `t * 64 + i` holds face `rows[t * 64 + i]` under the given face order.
pub fn face_rows(t: &TMesh, order: FaceOrder, order_seed: u64) -> std::result::Result<Vec<usize>, PatchError> {
    let per = FACES_PER_PATCH;
    let mut by_rank = vec![usize::MAX; t.num_patches * per];
    for (f, (&p, &r)) in t.patch_id.iter().zip(&t.within_patch_rank).enumerate() {
        if p >= t.num_patches || r >= per {
            return Err(PatchError::Rank { patch: p, rank: r });
        }
        by_rank[p * per + r] = f;
    }
    if let Some(i) = by_rank.iter().position(|&f| f == usize::MAX) {
        return Err(PatchError::Rank { patch: i / per, rank: i % per });
    }
    let perm = order.permutation(order_seed);
    Ok((0..t.num_patches).flat_map(|p| perm.iter().map(move |&r| p * per + r)).map(|i| by_rank[i]).collect())
}

pub fn labels_path(mesh_path: &Path) -> PathBuf {
    mesh_path.with_extension("labels")
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| DataError::Labels {
            path: path.to_path_buf(),
            message: format!("line {}: `{line}` is not a label", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for l in labels {
        writeln!(out, "{l}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// A t-mesh with the labels found next to it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
    pub tmesh: TMesh,
    /// One part label per t-mesh face.
    pub face_labels: Option<Vec<usize>>,
}

impl Sample {
    pub fn tokens(&self, order: FaceOrder, order_seed: u64) -> std::result::Result<Tokens, PatchError> {
        tmesh_tokens(&self.tmesh, order, order_seed)
    }
}

/// Loads a mesh file as a t-mesh, remeshing raw input. Raw labels are moved
/// onto the t-mesh by nearest face.
pub fn load_sample(path: &Path, class: usize, remesh: &RemeshConfig) -> Result<Sample> {
    let label_file = labels_path(path);
    let labels = if label_file.exists() { Some(read_labels(&label_file)?) } else { None };
    let label_err = |n: usize, faces: usize| DataError::Labels {
        path: label_file.clone(),
        message: format!("{n} labels for {faces} faces"),
    };
    if annotation_path(path).exists() {
        let tmesh = TMesh::load(path).map_err(|source| DataError::Remesh { path: path.to_path_buf(), source })?;
        if let Some(l) = &labels {
            if l.len() != tmesh.mesh.num_faces() {
                return Err(label_err(l.len(), tmesh.mesh.num_faces()));
            }
        }
        return Ok(Sample { path: path.to_path_buf(), class, tmesh, face_labels: labels });
    }
    let raw = load_mesh_file(path).map_err(|source| DataError::Mesh { path: path.to_path_buf(), source })?;
    let tmesh = remesh_pipeline(&raw, remesh).map_err(|source| DataError::Remesh { path: path.to_path_buf(), source })?;
    let face_labels = match labels {
        Some(l) if l.len() != raw.num_faces() => return Err(label_err(l.len(), raw.num_faces())),
        Some(l) => Some(transfer_labels(&raw, &l, &tmesh.mesh).map_err(|e| DataError::Labels {
            path: label_file.clone(),
            message: e.to_string(),
        })?),
        None => None,
    };
    Ok(Sample { path: path.to_path_buf(), class, tmesh, face_labels })
}

/// Mesh files directly inside `dir`, sorted by name.
pub fn mesh_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && MeshFormat::from_path(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Mesh files anywhere below `dir`, sorted by path.
pub fn mesh_files_recursive(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = mesh_files(dir)?;
    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            subdirs.push(path);
        }
    }
    subdirs.sort();
    for d in subdirs {
        out.extend(mesh_files_recursive(&d)?);
    }
    out.sort();
    Ok(out)
}

/// Class directory names of a split, sorted.
pub fn class_names(split_dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(split_dir).map_err(io_err(split_dir))? {
        let path = entry.map_err(io_err(split_dir))?.path();
        if path.is_dir() {
            names.push(path.file_name().expect("directory entry has a name").to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(DataError::Layout(format!("{} has no class directories", split_dir.display())));
    }
    Ok(names)
}

/// Labelled samples of one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Loads `<root>/<split>/<class>/*`. With `classes`, the class indices follow
/// that list and unknown class directories are an error.
pub fn load_split(root: &Path, split: &str, classes: Option<&[String]>, remesh: &RemeshConfig) -> Result<Split> {
    let dir = root.join(split);
    let found = class_names(&dir)?;
    let classes = match classes {
        Some(c) => {
            if let Some(extra) = found.iter().find(|n| !c.contains(n)) {
                return Err(DataError::Layout(format!("class `{extra}` in {} is not among {c:?}", dir.display())));
            }
            c.to_vec()
        }
        None => found.clone(),
    };
    let mut samples = Vec::new();
    for name in &found {
        let class = classes.iter().position(|c| c == name).expect("checked above");
        for path in mesh_files(&dir.join(name))? {
            samples.push(load_sample(&path, class, remesh)?);
        }
    }
    if samples.is_empty() {
        return Err(DataError::Layout(format!("no meshes under {}", dir.display())));
    }
    Ok(Split { classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::save_mesh_file;
    use crate::synth::icosphere;

    #[test]
    fn normalization_makes_tokens_translation_invariant() {
        let tm = remesh_pipeline(&icosphere(3), &RemeshConfig::default()).unwrap();
        let moved = TMesh { mesh: tm.mesh.translated(nalgebra::Vector3::new(5.0, -2.0, 1.0)).scaled(nalgebra::Vector3::repeat(3.0)), ..tm.clone() };
        let a = tmesh_tokens(&tm, FaceOrder::Original, 0).unwrap();
        let b = tmesh_tokens(&moved, FaceOrder::Original, 0).unwrap();
        for (x, y) in a.centers.iter().zip(&b.centers) {
            assert!((x - y).abs() < 1e-9);
        }
        let r = normalized_tmesh(&tm).mesh.vertices.iter().map(|p| p.coords.norm()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_layout_and_label_transfer() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let sphere = icosphere(3);
        for class in ["a", "b"] {
            fs::create_dir_all(root.join("train").join(class)).unwrap();
            let p = root.join("train").join(class).join("m0.obj");
            save_mesh_file(&sphere, &p).unwrap();
            let labels: Vec<usize> = crate::mesh::face_centers(&sphere).iter().map(|c| usize::from(c.z > 0.0)).collect();
            write_labels(&labels_path(&p), &labels).unwrap();
        }
        let split = load_split(root, "train", None, &RemeshConfig::default()).unwrap();
        assert_eq!(split.classes, vec!["a", "b"]);
        assert_eq!(split.samples.len(), 2);
        assert_eq!(split.samples[1].class, 1);
        let s = &split.samples[0];
        let l = s.face_labels.as_ref().unwrap();
        assert_eq!(l.len(), s.tmesh.mesh.num_faces());
        assert!(l.contains(&0) && l.contains(&1));

        // saved t-meshes load without remeshing and keep their labels
        let out = root.join("pre").join("train").join("a");
        fs::create_dir_all(&out).unwrap();
        let p = out.join("m0_v0.obj");
        s.tmesh.save(&p).unwrap();
        write_labels(&labels_path(&p), l).unwrap();
        let again = load_sample(&p, 0, &RemeshConfig::default()).unwrap();
        assert_eq!(again.tmesh.patch_id, s.tmesh.patch_id);
        assert_eq!(again.face_labels.as_ref(), Some(l));

        let only_a = vec!["a".to_string()];
        assert!(load_split(root, "train", Some(&only_a), &RemeshConfig::default()).is_err());
        write_labels(&labels_path(&p), &l[..10]).unwrap();
        assert!(matches!(load_sample(&p, 0, &RemeshConfig::default()), Err(DataError::Labels { .. })));
    }

    #[test]
    fn face_rows_follow_the_token_layout() {
        let tm = remesh_pipeline(&icosphere(3), &RemeshConfig::default()).unwrap();
        let feats = crate::mesh::face_features(&normalized_tmesh(&tm).mesh).unwrap();
        for order in FaceOrder::ALL {
            let tokens = tmesh_tokens(&tm, order, 3).unwrap();
            let rows = face_rows(&tm, order, 3).unwrap();
            let mut seen = rows.clone();
            seen.sort();
            assert_eq!(seen, (0..tm.mesh.num_faces()).collect::<Vec<_>>());
            if order == FaceOrder::Original || order == FaceOrder::Random {
                for (row, &f) in rows.iter().enumerate().step_by(37) {
                    assert_eq!(&tokens.features[row * 10..row * 10 + 10], &feats[f].to_array());
                }
            }
        }
    }

    #[test]
    fn malformed_labels_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.labels");
        fs::write(&p, "0\n1\nfoo\n").unwrap();
        assert!(matches!(read_labels(&p), Err(DataError::Labels { .. })));
    }
}
