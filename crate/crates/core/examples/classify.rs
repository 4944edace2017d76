//! Shape classification: full fine-tuning and a linear probe, starting from
//! a briefly pretrained encoder and from a random one.
//!
//! `cargo run --release --example classify [pretrain_epochs]`

use meshmae::dataset::tmesh_tokens;
use meshmae::downstream::{class_accuracy, linear_probe, ClassExample, FinetuneConfig, Finetuner, Tuning};
use meshmae::patchify::FaceOrder;
use meshmae::pretrain::{pretrain, PretrainConfig};
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::{generate_dataset, ShapeFamily, SynthSpec};
use meshmae::transformer::{MeshMae, ModelConfig, Tokens};

type Error = Box<dyn std::error::Error>;

fn examples(spec: &SynthSpec) -> Result<Vec<ClassExample>, Error> {
    generate_dataset(spec)
        .iter()
        .map(|m| {
            let t = remesh_pipeline(&m.mesh, &RemeshConfig::default())?;
            let label = spec.families.iter().position(|f| *f == m.family).expect("family in spec");
            Ok(ClassExample { tokens: tmesh_tokens(&t, FaceOrder::Original, 0)?, label })
        })
        .collect()
}

fn main() -> Result<(), Error> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let families = vec![ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder];
    let train = examples(&SynthSpec { families: families.clone(), per_class: 12, seed: 1, ..SynthSpec::default() })?;
    let test = examples(&SynthSpec { families, per_class: 4, seed: 2, ..SynthSpec::default() })?;

    let random = MeshMae::new(ModelConfig::desk(), 0)?;
    let mut pretrained = random.clone();
    let tokens: Vec<Tokens> = train.iter().map(|e| e.tokens.clone()).collect();
    pretrain(&mut pretrained, &tokens, &PretrainConfig { epochs, ..PretrainConfig::desk() }, 0, |_| {})?;

    let probe_cfg = FinetuneConfig { epochs: 100, lr: 1e-2, batch_size: 8, milestones: vec![], ..FinetuneConfig::classification() };
    let tune_cfg = FinetuneConfig { epochs: 5, lr: 5e-4, batch_size: 8, milestones: vec![], ..FinetuneConfig::classification() };
    for (name, base) in [("pretrained", &pretrained), ("random", &random)] {
        let mut probed = base.clone().with_classifier(3, 1);
        let probe = linear_probe(&mut probed, &train, &test, &probe_cfg, 0)?;

        let mut tuned = base.clone().with_classifier(3, 1);
        let mut trainer = Finetuner::new(tune_cfg.clone(), Tuning::Full, 0)?;
        for _ in 0..tune_cfg.epochs {
            trainer.classification_epoch(&mut tuned, &train)?;
        }
        println!(
            "{name:>10}: probe test accuracy {:.3}, fine-tuned test accuracy {:.3}",
            probe.test_accuracy,
            class_accuracy(&tuned, &test)?
        );
    }
    Ok(())
}
