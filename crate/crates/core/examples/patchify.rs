//! Split a t-mesh into 64-face patches, reorder faces, draw a mask and
//! export the patches.
//!
//! `cargo run --release --example patchify [out_dir]`

use meshmae::patchify::{export_patches, make_mask, split_patches, FaceOrder};
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::icosphere;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = remesh_pipeline(&icosphere(4), &RemeshConfig::default())?;
    let mut patches = split_patches(&t)?;
    println!("{} patches", patches.len());
    let p = &patches[0];
    println!(
        "patch 0: {} faces, {} vertices, centre {:.3?}",
        p.features.len(),
        p.relative_vertices.len(),
        p.center.coords.as_slice()
    );

    for order in FaceOrder::ALL {
        println!("{:>9}: first ranks {:?}", order.name(), &order.permutation(3)[..8]);
    }
    FaceOrder::RotateL.apply(&mut patches, 0);

    let mask = make_mask(patches.len(), 0.5, 42)?;
    println!("mask: {} visible, {} masked", mask.visible.len(), mask.masked.len());

    if let Some(dir) = std::env::args().nth(1) {
        let manifest = export_patches(&patches, std::path::Path::new(&dir), "sphere")?;
        println!("wrote {}", manifest.display());
    }
    Ok(())
}
