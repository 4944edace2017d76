//! Export masked-patch reconstructions as OBJ point clouds.
//!
//! `cargo run --release --example reconstruct [out_dir] [checkpoint]`
//! Without a checkpoint the model is untrained, which makes a useful
//! baseline for the Chamfer numbers.

use std::path::PathBuf;

use meshmae::pretrain::export_reconstruction;
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::{generate, ShapeFamily};
use meshmae::transformer::{MeshMae, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("meshmae_reconstruct"));
    let model = match args.next() {
        Some(ckpt) => MeshMae::load(ckpt.as_ref())?,
        None => MeshMae::new(ModelConfig::desk(), 0)?,
    };
    let raw = generate(ShapeFamily::Cylinder, 0.05, 0.25, &mut ChaCha8Rng::seed_from_u64(3)).mesh;
    let t = remesh_pipeline(&raw, &RemeshConfig::default())?;
    std::fs::create_dir_all(&dir)?;
    for ratio in [0.5, 0.7, 0.8] {
        let e = export_reconstruction(&model, &t, ratio, 0, &dir, "cylinder")?;
        println!("ratio {ratio}: {} masked patches, mean chamfer {:.5}, {}", e.masked.len(), e.mean_chamfer, e.predicted.display());
    }
    Ok(())
}
