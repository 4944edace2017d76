//! Part segmentation on synthetic capped cylinders (caps vs side wall).

use meshmae::dataset::Sample;
use meshmae::downstream::{seg_accuracy, transfer_labels, FinetuneConfig, Finetuner, SegExample, Tuning};
use meshmae::patchify::FaceOrder;
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::{generate_dataset, ShapeFamily, SynthSpec};
use meshmae::transformer::{MeshMae, ModelConfig};

type Error = Box<dyn std::error::Error>;

fn examples(seed: u64, n: usize) -> Result<Vec<SegExample>, Error> {
    let spec = SynthSpec { families: vec![ShapeFamily::SegCylinder], per_class: n, seed, ..SynthSpec::default() };
    generate_dataset(&spec)
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let tmesh = remesh_pipeline(&m.mesh, &RemeshConfig { seed: i as u64, ..RemeshConfig::default() })?;
            // labels of the raw mesh move to the remeshed faces by nearest face
            let labels = transfer_labels(&m.mesh, m.face_labels.as_ref().expect("segmentation family"), &tmesh.mesh)?;
            let sample = Sample { path: format!("cylinder_{i}").into(), class: 0, tmesh, face_labels: Some(labels) };
            Ok(SegExample::from_sample(&sample, FaceOrder::Original, 0)?)
        })
        .collect()
}

fn main() -> Result<(), Error> {
    let (train, test) = (examples(1, 8)?, examples(2, 3)?);
    let mut model = MeshMae::new(ModelConfig::desk(), 0)?.with_segmentation(2, 1);
    let cfg = FinetuneConfig { epochs: 30, lr: 3e-4, batch_size: 4, milestones: vec![], ..FinetuneConfig::segmentation() };
    let mut trainer = Finetuner::new(cfg.clone(), Tuning::Full, 0)?;
    for epoch in 0..cfg.epochs {
        let s = trainer.segmentation_epoch(&mut model, &train)?;
        println!("epoch {epoch}: loss {:.4}, test face accuracy {:.3}", s.loss, seg_accuracy(&model, &test)?);
    }
    Ok(())
}
