//! Training-time augmentation of raw meshes: per-axis scaling and free-form
//! deformation through a cubic Bernstein lattice. Both only move vertices, so
//! they are applied before remeshing and never touch patch structure.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mesh::Mesh;

/// Control points per lattice axis (cubic Bernstein basis).
pub const LATTICE_SIZE: usize = 4;
/// The lattice box is the bounding box grown by this fraction per side.
pub const LATTICE_INFLATION: f64 = 0.05;
pub const SCALE_CLAMP: (f64, f64) = (0.6, 1.4);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub enable: bool,
    pub scale_sigma: f64,
    /// Maximum control-point displacement per axis, as a fraction of the
    /// bounding-box diagonal.
    pub ffd_magnitude: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self { enable: false, scale_sigma: 0.1, ffd_magnitude: 0.05 }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.scale_sigma) {
            return Err(format!("aug.scale_sigma must be in [0, 1], got {}", self.scale_sigma));
        }
        if !(0.0..=0.5).contains(&self.ffd_magnitude) {
            return Err(format!("aug.ffd_magnitude must be in [0, 0.5], got {}", self.ffd_magnitude));
        }
        Ok(())
    }
}

/// Per-axis factors drawn from `Normal(1, sigma)` and clamped.
pub fn scale_factors<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Vector3<f64> {
    let normal = Normal::new(1.0, sigma.max(0.0)).expect("finite sigma");
    Vector3::from_fn(|_, _| normal.sample(rng).clamp(SCALE_CLAMP.0, SCALE_CLAMP.1))
}

pub fn anisotropic_scale<R: Rng + ?Sized>(mesh: &Mesh, sigma: f64, rng: &mut R) -> Mesh {
    mesh.scaled(scale_factors(sigma, rng))
}

fn bernstein3(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * t * s * s, 3.0 * t * t * s, t * t * t]
}

/// A `4x4x4` lattice of control-point displacements spanning a box.
#[derive(Debug, Clone, PartialEq)]
pub struct FfdLattice {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
    /// Indexed `[i][j][k]` flattened as `(i * 4 + j) * 4 + k`.
    pub displacements: Vec<Vector3<f64>>,
}

impl FfdLattice {
    /// Undisplaced lattice over the inflated bounding box of `mesh`.
    pub fn around(mesh: &Mesh) -> Self {
        let (lo, hi) = mesh.bounding_box().unwrap_or((Point3::origin(), Point3::origin()));
        let pad = (hi - lo) * LATTICE_INFLATION;
        Self {
            min: lo - pad,
            max: hi + pad,
            displacements: vec![Vector3::zeros(); LATTICE_SIZE.pow(3)],
        }
    }

    /// Lattice with every displacement component drawn from
    /// `Uniform(-magnitude * diag, magnitude * diag)`.
    pub fn random<R: Rng + ?Sized>(mesh: &Mesh, magnitude: f64, rng: &mut R) -> Self {
        let mut lattice = Self::around(mesh);
        let amp = magnitude * mesh.bbox_diagonal();
        if amp > 0.0 {
            for d in &mut lattice.displacements {
                *d = Vector3::from_fn(|_, _| rng.random_range(-amp..=amp));
            }
        }
        lattice
    }

    pub fn uniform(mesh: &Mesh, offset: Vector3<f64>) -> Self {
        let mut lattice = Self::around(mesh);
        lattice.displacements.fill(offset);
        lattice
    }

    /// Lattice coordinates of `p` in `[0, 1]^3`. Flat axes map to 0.5.
    fn local(&self, p: &Point3<f64>) -> [f64; 3] {
        std::array::from_fn(|a| {
            let ext = self.max[a] - self.min[a];
            if ext > 0.0 {
                ((p[a] - self.min[a]) / ext).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
    }

    /// Moves `p` by the Bernstein blend of the control displacements. The
    /// undisplaced lattice reproduces the identity exactly.
    pub fn deform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        let [u, v, w] = self.local(p);
        let (bu, bv, bw) = (bernstein3(u), bernstein3(v), bernstein3(w));
        let mut shift = Vector3::zeros();
        for (i, &a) in bu.iter().enumerate() {
            for (j, &b) in bv.iter().enumerate() {
                for (k, &c) in bw.iter().enumerate() {
                    shift += self.displacements[(i * LATTICE_SIZE + j) * LATTICE_SIZE + k] * (a * b * c);
                }
            }
        }
        p + shift
    }
}

pub fn ffd_deform(mesh: &Mesh, lattice: &FfdLattice) -> Mesh {
    Mesh {
        vertices: mesh.vertices.iter().map(|p| lattice.deform_point(p)).collect(),
        faces: mesh.faces.clone(),
    }
}

/// Scaling followed by a random lattice deformation; a clone when disabled.
pub fn augment<R: Rng + ?Sized>(mesh: &Mesh, config: &AugConfig, rng: &mut R) -> Mesh {
    if !config.enable {
        return mesh.clone();
    }
    let scaled = anisotropic_scale(mesh, config.scale_sigma, rng);
    let lattice = FfdLattice::random(&scaled, config.ffd_magnitude, rng);
    ffd_deform(&scaled, &lattice)
}
