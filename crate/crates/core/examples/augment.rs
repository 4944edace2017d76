//! Anisotropic scaling and free-form deformation before remeshing.

use meshmae::augment::{augment, AugConfig, FfdLattice, ffd_deform};
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::box_mesh;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn extent(m: &meshmae::mesh::Mesh) -> Vector3<f64> {
    let (lo, hi) = m.bounding_box().expect("non-empty");
    hi - lo
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cube = box_mesh(6);
    println!("original extent {:.3?}", extent(&cube).as_slice());

    // a uniform lattice offset is a pure translation
    let shifted = ffd_deform(&cube, &FfdLattice::uniform(&cube, Vector3::new(0.5, 0.0, 0.0)));
    println!("uniform lattice moves vertex 0 by {:.3?}", (shifted.vertices[0] - cube.vertices[0]).as_slice());

    let cfg = AugConfig { enable: true, scale_sigma: 0.15, ffd_magnitude: 0.05 };
    for seed in 0..3 {
        let a = augment(&cube, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let t = remesh_pipeline(&a, &RemeshConfig { seed, ..RemeshConfig::default() })?;
        println!("seed {seed}: extent {:.3?}, {} patches", extent(&a).as_slice(), t.num_patches);
    }
    Ok(())
}
