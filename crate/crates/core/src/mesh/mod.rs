//! Indexed triangle meshes, file I/O, topology queries and per-face features.

mod features;
mod io;
mod topology;

pub use features::{face_centers, face_feature, face_features, vertex_normals, FaceFeature, FEATURE_DIM};
pub use io::{load_mesh, load_mesh_file, save_mesh, save_mesh_file, MeshFormat};
pub use topology::{manifold_report, ManifoldReport};
pub(crate) use topology::{edge_face_counts, edge_key};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

/// Relative area below which a face counts as degenerate, in units of the
/// squared bounding-box diagonal.
pub const DEGENERATE_AREA_FACTOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("line {line}: face has {count} vertices, only triangles are supported")]
    NonTriangular { line: usize, count: usize },
    #[error("face {face} repeats a vertex")]
    RepeatedVertex { face: usize },
    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("vertex {vertex} has no usable incident faces, its normal is undefined")]
    ZeroNormal { vertex: usize },
    #[error("mesh is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Indexed triangle mesh. Faces are counter-clockwise vertex-index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Builds a mesh after checking index ranges and repeated vertices.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let count = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= count) {
                return Err(MeshError::IndexOutOfRange { face: fi, index, count });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedVertex { face: fi });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn empty() -> Self {
        Self { vertices: Vec::new(), faces: Vec::new() }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn corners(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_cross(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bounding_box().map_or(0.0, |(lo, hi)| (hi - lo).norm())
    }

    /// Rejects faces whose area falls below the degenerate threshold.
    pub fn validate(&self) -> Result<(), MeshError> {
        let diag = self.bbox_diagonal();
        let threshold = DEGENERATE_AREA_FACTOR * diag * diag;
        for fi in 0..self.faces.len() {
            let area = self.face_area(fi);
            if !(area > threshold) {
                return Err(MeshError::DegenerateFace { face: fi, area });
            }
        }
        Ok(())
    }

    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| p + offset).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn scaled(&self, factors: Vector3<f64>) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point3::from(p.coords.component_mul(&factors)))
                .collect(),
            faces: self.faces.clone(),
        }
    }

    /// Mean of the vertex positions.
    pub fn vertex_centroid(&self) -> Point3<f64> {
        if self.vertices.is_empty() {
            return Point3::origin();
        }
        let sum = self.vertices.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / self.vertices.len() as f64)
    }

    /// Moves the vertex centroid to the origin and scales the farthest vertex
    /// onto the unit sphere.
    pub fn normalized(&self) -> Self {
        let c = self.vertex_centroid();
        let radius = self
            .vertices
            .iter()
            .map(|p| (p - c).norm())
            .fold(0.0_f64, f64::max);
        let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        Self {
            vertices: self.vertices.iter().map(|p| Point3::from((p - c) * scale)).collect(),
            faces: self.faces.clone(),
        }
    }
}
