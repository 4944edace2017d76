//! Remesh a noisy synthetic shape into a patch-structured t-mesh.
//!
//! `cargo run --release --example remesh [out_dir]`

use meshmae::mesh::manifold_report;
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::{generate, ShapeFamily};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = generate(ShapeFamily::Torus, 0.05, 0.25, &mut rng).mesh;
    println!("input: {} vertices, {} faces", raw.num_vertices(), raw.num_faces());

    let t = remesh_pipeline(&raw, &RemeshConfig { seed: 1, ..RemeshConfig::default() })?;
    let report = manifold_report(&t.mesh);
    println!(
        "t-mesh: {} patches x {} faces = {} faces, watertight {}",
        t.num_patches,
        t.faces_per_patch(),
        t.mesh.num_faces(),
        report.is_watertight
    );

    if let Some(dir) = std::env::args().nth(1) {
        std::fs::create_dir_all(&dir)?;
        let path = std::path::Path::new(&dir).join("torus_tmesh.obj");
        t.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
