//! Procedural watertight shapes used as desk-scale stand-ins for labelled
//! mesh corpora.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{face_centers, vertex_normals, Mesh};

/// Shape families. The `Seg*` families carry per-face part labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Torus,
    /// Sphere split into upper and lower hemispheres.
    SegHemisphere,
    /// Capped cylinder with caps and side wall as separate parts.
    SegCylinder,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        Self::Sphere,
        Self::Box,
        Self::Cylinder,
        Self::Torus,
        Self::SegHemisphere,
        Self::SegCylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Box => "box",
            Self::Cylinder => "cylinder",
            Self::Torus => "torus",
            Self::SegHemisphere => "seg_hemisphere",
            Self::SegCylinder => "seg_cylinder",
        }
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, Self::SegHemisphere | Self::SegCylinder)
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown shape family `{s}`"))
    }
}

/// A generated mesh with optional per-face part labels.
#[derive(Debug, Clone)]
pub struct SyntheticMesh {
    pub family: ShapeFamily,
    pub mesh: Mesh,
    pub face_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub families: Vec<ShapeFamily>,
    pub per_class: usize,
    /// Radial jitter as a fraction of the mean edge length.
    pub noise: f64,
    /// Half-width of the per-axis random stretch applied to every instance.
    pub stretch: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            families: vec![ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder],
            per_class: 10,
            noise: 0.05,
            stretch: 0.25,
            seed: 0,
        }
    }
}

/// Unit icosphere with `20 * 4^level` faces.
pub fn icosphere(level: u32) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3<f64>> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|c| Point3::from(Vector3::from(*c).normalize()))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point3<f64>>| -> usize {
            let key = if a < b { (a, b) } else { (b, a) };
            *mid.entry(key).or_insert_with(|| {
                let m = (vertices[a].coords + vertices[b].coords).normalize();
                vertices.push(Point3::from(m));
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Mesh { vertices, faces }
}

/// Axis-aligned cube `[-1,1]^3` with an `n x n` quad grid on every side.
pub fn box_mesh(n: usize) -> Mesh {
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |key: [usize; 3], vertices: &mut Vec<Point3<f64>>| -> usize {
        *index.entry(key).or_insert_with(|| {
            let c = key.map(|k| 2.0 * k as f64 / n as f64 - 1.0);
            vertices.push(Point3::from(c));
            vertices.len() - 1
        })
    };
    for axis in 0..3 {
        let (u_axis, v_axis) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0, n] {
            for u in 0..n {
                for v in 0..n {
                    let corner = |du: usize, dv: usize| {
                        let mut k = [0; 3];
                        k[axis] = side;
                        k[u_axis] = u + du;
                        k[v_axis] = v + dv;
                        k
                    };
                    let q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]
                        .map(|k| vid(k, &mut vertices));
                    if side == n {
                        faces.push([q[0], q[1], q[2]]);
                        faces.push([q[0], q[2], q[3]]);
                    } else {
                        faces.push([q[0], q[2], q[1]]);
                        faces.push([q[0], q[3], q[2]]);
                    }
                }
            }
        }
    }
    Mesh { vertices, faces }
}

/// Capped cylinder of radius 1 spanning `z in [-1, 1]`.
///
/// Returns the mesh and, per face, whether the face belongs to a cap.
pub fn cylinder(segments: usize, rings: usize, cap_rings: usize) -> (Mesh, Vec<bool>) {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut is_cap = Vec::new();
    let ring_point = |r: f64, j: usize, z: f64| {
        let a = TAU * j as f64 / segments as f64;
        Point3::new(r * a.cos(), r * a.sin(), z)
    };
    // side wall rings 0..=rings from bottom to top
    for i in 0..=rings {
        let z = -1.0 + 2.0 * i as f64 / rings as f64;
        for j in 0..segments {
            vertices.push(ring_point(1.0, j, z));
        }
    }
    let side = |i: usize, j: usize| i * segments + j % segments;
    for i in 0..rings {
        for j in 0..segments {
            let (a, b, c, d) = (side(i, j), side(i, j + 1), side(i + 1, j + 1), side(i + 1, j));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
            is_cap.extend([false, false]);
        }
    }
    // caps: concentric rings shrinking towards a centre vertex
    for (outer_ring, z, up) in [(rings, 1.0, true), (0, -1.0, false)] {
        let mut outer: Vec<usize> = (0..segments).map(|j| side(outer_ring, j)).collect();
        for k in (1..cap_rings).rev() {
            let r = k as f64 / cap_rings as f64;
            let inner: Vec<usize> = (0..segments)
                .map(|j| {
                    vertices.push(ring_point(r, j, z));
                    vertices.len() - 1
                })
                .collect();
            for j in 0..segments {
                let (a, b) = (outer[j], outer[(j + 1) % segments]);
                let (c, d) = (inner[(j + 1) % segments], inner[j]);
                if up {
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                } else {
                    faces.push([a, c, b]);
                    faces.push([a, d, c]);
                }
                is_cap.extend([true, true]);
            }
            outer = inner;
        }
        vertices.push(Point3::new(0.0, 0.0, z));
        let centre = vertices.len() - 1;
        for j in 0..segments {
            let (a, b) = (outer[j], outer[(j + 1) % segments]);
            faces.push(if up { [a, b, centre] } else { [a, centre, b] });
            is_cap.push(true);
        }
    }
    (Mesh { vertices, faces }, is_cap)
}

/// Torus around the z axis with major radius 1 and the given minor radius.
pub fn torus(minor: f64, major_segments: usize, minor_segments: usize) -> Mesh {
    let mut vertices = Vec::new();
    for i in 0..major_segments {
        let u = TAU * i as f64 / major_segments as f64;
        for j in 0..minor_segments {
            let v = TAU * j as f64 / minor_segments as f64;
            let r = 1.0 + minor * v.cos();
            vertices.push(Point3::new(r * u.cos(), r * u.sin(), minor * v.sin()));
        }
    }
    let id = |i: usize, j: usize| (i % major_segments) * minor_segments + j % minor_segments;
    let mut faces = Vec::new();
    for i in 0..major_segments {
        for j in 0..minor_segments {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh { vertices, faces }
}

fn mean_edge_length(mesh: &Mesh) -> f64 {
    let mut total = 0.0;
    for f in &mesh.faces {
        for k in 0..3 {
            total += (mesh.vertices[f[k]] - mesh.vertices[f[(k + 1) % 3]]).norm();
        }
    }
    total / (3 * mesh.num_faces()).max(1) as f64
}

/// Moves every vertex along its normal by a uniform random fraction of the
/// mean edge length.
pub fn jitter(mesh: &Mesh, amount: f64, rng: &mut impl Rng) -> Mesh {
    if amount <= 0.0 {
        return mesh.clone();
    }
    let normals = vertex_normals(mesh).expect("generated meshes have no isolated vertices");
    let scale = amount * mean_edge_length(mesh);
    let vertices = mesh
        .vertices
        .iter()
        .zip(&normals)
        .map(|(p, n)| p + n * (scale * rng.random_range(-1.0..=1.0)))
        .collect();
    Mesh { vertices, faces: mesh.faces.clone() }
}

/// One random instance of a family. The same `rng` state yields the same mesh.
pub fn generate(family: ShapeFamily, noise: f64, stretch: f64, rng: &mut impl Rng) -> SyntheticMesh {
    let (base, labels) = match family {
        ShapeFamily::Sphere => (icosphere(3), None),
        ShapeFamily::Box => (box_mesh(8), None),
        ShapeFamily::Cylinder => (cylinder(32, 10, 3).0, None),
        ShapeFamily::Torus => (torus(0.4, 32, 16), None),
        ShapeFamily::SegHemisphere => {
            let m = icosphere(3);
            let labels = face_centers(&m).iter().map(|c| usize::from(c.z >= 0.0)).collect();
            (m, Some(labels))
        }
        ShapeFamily::SegCylinder => {
            let (m, cap) = cylinder(32, 10, 3);
            (m, Some(cap.into_iter().map(usize::from).collect()))
        }
    };
    // labels are assigned before the random stretch so parts stay fixed
    let factors = Vector3::from_fn(|_, _| 1.0 + rng.random_range(-stretch..=stretch));
    let stretched = base.scaled(factors);
    let mesh = jitter(&stretched, noise, rng);
    SyntheticMesh { family, mesh, face_labels: labels }
}

/// Generates `per_class` instances for every family, family-major order.
pub fn generate_dataset(spec: &SynthSpec) -> Vec<SyntheticMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.families.len() * spec.per_class);
    for &family in &spec.families {
        for _ in 0..spec.per_class {
            out.push(generate(family, spec.noise, spec.stretch, &mut rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::manifold_report;

    #[test]
    fn families_are_watertight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for family in ShapeFamily::ALL {
            let s = generate(family, 0.1, 0.2, &mut rng);
            let r = manifold_report(&s.mesh);
            assert!(r.is_watertight && r.is_vertex_manifold, "{family} not watertight: {r:?}");
            s.mesh.validate().unwrap();
            assert!(s.mesh.num_faces() >= 500, "{family} has {} faces", s.mesh.num_faces());
            if let Some(l) = &s.face_labels {
                assert_eq!(l.len(), s.mesh.num_faces());
                let parts: std::collections::BTreeSet<_> = l.iter().collect();
                assert!(parts.len() >= 2);
            }
        }
    }

    #[test]
    fn outward_orientation() {
        // signed volume is positive for outward-facing closed meshes
        for m in [icosphere(2), box_mesh(3), cylinder(12, 3, 2).0, torus(0.3, 12, 8)] {
            let vol: f64 = m
                .faces
                .iter()
                .map(|&[a, b, c]| {
                    m.vertices[a].coords.dot(&m.vertices[b].coords.cross(&m.vertices[c].coords)) / 6.0
                })
                .sum();
            assert!(vol > 0.0);
        }
        let cube = box_mesh(4);
        let vol: f64 = cube
            .faces
            .iter()
            .map(|&[a, b, c]| cube.vertices[a].coords.dot(&cube.vertices[b].coords.cross(&cube.vertices[c].coords)) / 6.0)
            .sum();
        assert!((vol - 8.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let spec = SynthSpec { per_class: 4, ..SynthSpec::default() };
        let a = generate_dataset(&spec);
        let b = generate_dataset(&spec);
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mesh, y.mesh);
        }
    }
}
