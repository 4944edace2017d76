//! Masked-autoencoder pretraining on a small synthetic set.
//!
//! `cargo run --release --example pretrain [epochs] [checkpoint]`

use meshmae::dataset::tmesh_tokens;
use meshmae::patchify::FaceOrder;
use meshmae::pretrain::{evaluate_mesh, fixed_masks, pretrain, PretrainConfig};
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::{generate_dataset, ShapeFamily, SynthSpec};
use meshmae::transformer::{MeshMae, ModelConfig, Tokens};

fn mean_loss(model: &MeshMae, data: &[Tokens], masks: &[meshmae::patchify::MaskPartition]) -> f64 {
    let losses: Vec<f64> = data.iter().zip(masks).filter_map(|(t, m)| evaluate_mesh(model, t, m, 0.5).unwrap()).map(|l| l.loss).collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let spec = SynthSpec { families: vec![ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Torus], per_class: 2, ..SynthSpec::default() };
    let data: Vec<Tokens> = generate_dataset(&spec)
        .iter()
        .map(|m| {
            let t = remesh_pipeline(&m.mesh, &RemeshConfig::default())?;
            Ok(tmesh_tokens(&t, FaceOrder::Original, 0)?)
        })
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;

    let mut model = MeshMae::new(ModelConfig::desk(), 0)?;
    let masks = fixed_masks(&data, 0.5, 1)?;
    println!("initial loss {:.4}", mean_loss(&model, &data, &masks));

    let cfg = PretrainConfig { epochs, ..PretrainConfig::desk() };
    pretrain(&mut model, &data, &cfg, 0, |s| {
        if s.step % 10 == 0 {
            println!("step {:>4} lr {:.2e} loss {:.4} (mse {:.4}, chamfer {:.5})", s.step, s.lr, s.loss, s.mse, s.chamfer);
        }
    })?;
    println!("final loss {:.4}", mean_loss(&model, &data, &masks));

    if let Some(path) = args.next() {
        model.save(std::path::Path::new(&path))?;
        println!("saved {path}");
    }
    Ok(())
}
