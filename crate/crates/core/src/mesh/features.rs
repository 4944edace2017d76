use nalgebra::{Point3, Vector3};

use super::{Mesh, MeshError};

/// Number of scalars in a flattened [`FaceFeature`].
pub const FEATURE_DIM: usize = 10;

/// Geometric descriptor of one triangle.
///
/// Angles and normal/vertex-normal dot products follow the face's stored
/// vertex order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceFeature {
    pub area: f64,
    pub interior_angles: [f64; 3],
    pub face_normal: Vector3<f64>,
    pub normal_vertex_dots: [f64; 3],
}

impl FaceFeature {
    /// Flattened as area, angles, normal, dots.
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let a = &self.interior_angles;
        let n = &self.face_normal;
        let d = &self.normal_vertex_dots;
        [self.area, a[0], a[1], a[2], n.x, n.y, n.z, d[0], d[1], d[2]]
    }
}

/// Area-weighted vertex normals, normalized to unit length.
pub fn vertex_normals(mesh: &Mesh) -> Result<Vec<Vector3<f64>>, MeshError> {
    let mut acc = vec![Vector3::zeros(); mesh.num_vertices()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        // |cross| = 2 * area, so summing raw cross products weights by area
        let c = mesh.face_cross(fi);
        for &v in f {
            acc[v] += c;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(vertex, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(MeshError::ZeroNormal { vertex })
            }
        })
        .collect()
}

fn angle_between(u: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
    u.cross(v).norm().atan2(u.dot(v))
}

pub fn face_feature(
    mesh: &Mesh,
    face_index: usize,
    vertex_normals: &[Vector3<f64>],
) -> Result<FaceFeature, MeshError> {
    let [p0, p1, p2] = mesh.corners(face_index);
    let cross = (p1 - p0).cross(&(p2 - p0));
    let len = cross.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(MeshError::DegenerateFace { face: face_index, area: 0.5 * len });
    }
    let normal = cross / len;
    let a0 = angle_between(&(p1 - p0), &(p2 - p0));
    let a1 = angle_between(&(p2 - p1), &(p0 - p1));
    // the third angle is taken from the other two so the sum is exact
    let a2 = std::f64::consts::PI - a0 - a1;
    let [i0, i1, i2] = mesh.faces[face_index];
    let dots = [i0, i1, i2].map(|v| normal.dot(&vertex_normals[v]).clamp(-1.0, 1.0));
    Ok(FaceFeature {
        area: 0.5 * len,
        interior_angles: [a0, a1, a2],
        face_normal: normal,
        normal_vertex_dots: dots,
    })
}

/// Features of every face, in face order.
pub fn face_features(mesh: &Mesh) -> Result<Vec<FaceFeature>, MeshError> {
    let normals = vertex_normals(mesh)?;
    (0..mesh.num_faces()).map(|f| face_feature(mesh, f, &normals)).collect()
}

pub fn face_centers(mesh: &Mesh) -> Vec<Point3<f64>> {
    mesh.faces
        .iter()
        .map(|&[a, b, c]| {
            Point3::from((mesh.vertices[a].coords + mesh.vertices[b].coords + mesh.vertices[c].coords) / 3.0)
        })
        .collect()
}
