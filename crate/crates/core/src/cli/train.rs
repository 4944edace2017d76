use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use super::{write_csv, write_summary, CliError, CliResult, Task};
use crate::config::RunConfig;
use crate::dataset::{load_sample, load_split, mesh_files_recursive, Sample};
use crate::downstream::{
    accuracy, class_accuracy, linear_probe, predict_class, seg_accuracy, segment, ClassExample, FinetuneConfig, Finetuner,
    ProbeResult, SegExample, Tuning,
};
use crate::patchify::FaceOrder;
use crate::pretrain::{evaluate_mesh, export_reconstruction, fixed_masks, pretrain, PretrainError, StepStats};
use crate::transformer::{MeshMae, ModelConfig, PosStrategy, Tokens};

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Directory searched recursively for meshes; labels are ignored.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "original")]
    pub order: FaceOrder,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Checkpoint path, or `scratch` for random initialization.
    #[arg(long)]
    pub init: String,
    /// Dataset root with `train` and `test` splits of class directories.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "original")]
    pub order: FaceOrder,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    /// Checkpoint path, or `random` for an untrained encoder.
    #[arg(long)]
    pub init: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "original")]
    pub order: FaceOrder,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "original")]
    pub order: FaceOrder,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Raw mesh or t-mesh (with `.patches` sidecar).
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value = "0.5,0.7,0.8", value_delimiter = ',')]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Dataset root with `train` and `test` splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0.5", value_delimiter = ',')]
    pub ratios: Vec<f64>,
    #[arg(long, default_value = "0.5", value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Positional strategies, e.g. `a,b,c,d`.
    #[arg(long, default_value = "d", value_delimiter = ',')]
    pub pos: Vec<PosStrategy>,
    #[arg(long, default_value = "original", value_delimiter = ',')]
    pub orders: Vec<FaceOrder>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_model(path: &Path) -> CliResult<MeshMae> {
    MeshMae::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn init_model(init: &str, random_word: &str, model: &ModelConfig, seed: u64) -> CliResult<MeshMae> {
    if init == random_word {
        return Ok(MeshMae::new(model.clone(), seed)?);
    }
    let m = load_model(Path::new(init))?;
    if &m.config != model {
        log::warn!("using the model settings stored in {init}");
    }
    Ok(m)
}

fn tokens_of(samples: &[Sample], order: FaceOrder, seed: u64) -> CliResult<Vec<Tokens>> {
    samples.iter().map(|s| s.tokens(order, seed).map_err(|e| CliError::Data(format!("{}: {e}", s.path.display())))).collect()
}

/// Checkpoint, step log and summary of a pretraining run.
pub fn cmd_pretrain(args: &PretrainArgs, cfg: &RunConfig, out: &Path) -> CliResult<Vec<StepStats>> {
    let mut pc = cfg.pretrain.clone();
    if let Some(r) = args.mask_ratio {
        pc.mask_ratio = r;
    }
    if let Some(l) = args.lambda {
        pc.lambda = l;
    }
    if let Some(e) = args.epochs {
        pc.epochs = e;
    }
    pc.validate()?;
    let files = mesh_files_recursive(&args.data)?;
    let samples = files.iter().map(|p| load_sample(p, 0, &cfg.remesh)).collect::<Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("no meshes under {}", args.data.display())));
    }
    let data = tokens_of(&samples, args.order, cfg.seed)?;
    let mut model = MeshMae::new(cfg.model.clone(), cfg.seed)?;
    log::info!("pretraining on {} meshes for {} epochs", data.len(), pc.epochs);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let stats = match pretrain(&mut model, &data, &pc, cfg.seed, |s| log::debug!("step {} loss {:.6}", s.step, s.loss)) {
        Ok(s) => s,
        Err(e @ PretrainError::NonFinite { .. }) => {
            let _ = fs::write(sibling(out, ".dump.txt"), e.to_string());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    model.save(out)?;
    write_csv(&sibling(out, ".log.csv"), &stats)?;
    fs::write(sibling(out, ".config.toml"), RunConfig { pretrain: pc.clone(), ..cfg.clone() }.to_toml())?;
    let first = stats.first().map_or(f64::NAN, |s| s.loss);
    let last = stats.last().map_or(f64::NAN, |s| s.loss);
    write_summary(
        &sibling(out, ".summary.txt"),
        cfg,
        &[
            ("meshes", data.len().to_string()),
            ("steps", stats.len().to_string()),
            ("mask_ratio", pc.mask_ratio.to_string()),
            ("lambda", pc.lambda.to_string()),
            ("first_loss", first.to_string()),
            ("last_loss", last.to_string()),
        ],
    )?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn splits(root: &Path, cfg: &RunConfig) -> CliResult<(crate::dataset::Split, crate::dataset::Split)> {
    let train = load_split(root, "train", None, &cfg.remesh)?;
    let test = load_split(root, "test", Some(&train.classes), &cfg.remesh)?;
    Ok((train, test))
}

fn class_examples(samples: &[Sample], order: FaceOrder, seed: u64) -> CliResult<Vec<ClassExample>> {
    Ok(samples.iter().map(|s| ClassExample::from_sample(s, order, seed)).collect::<Result<Vec<_>, _>>()?)
}

fn seg_examples(samples: &[Sample], order: FaceOrder, seed: u64) -> CliResult<Vec<SegExample>> {
    Ok(samples.iter().map(|s| SegExample::from_sample(s, order, seed)).collect::<Result<Vec<_>, _>>()?)
}

/// Fine-tunes and evaluates on the test split after every epoch. Writes
/// `model.ckpt`, `metrics.csv` and `summary.txt` into `out`.
pub fn cmd_finetune(args: &FinetuneArgs, cfg: &RunConfig, out: &Path) -> CliResult<Vec<FinetuneRow>> {
    let (train, test) = splits(&args.data, cfg)?;
    let base = init_model(&args.init, "scratch", &cfg.model, cfg.seed)?;
    let mut fc: FinetuneConfig = match args.task {
        Task::Cls => cfg.classify.clone(),
        Task::Seg => cfg.segment.clone(),
    };
    if let Some(e) = args.epochs {
        fc.epochs = e;
    }
    fs::create_dir_all(out)?;
    let mut trainer = Finetuner::new(fc.clone(), Tuning::Full, cfg.seed)?;
    let mut rows = Vec::new();
    let model = match args.task {
        Task::Cls => {
            let (tr, te) = (class_examples(&train.samples, args.order, cfg.seed)?, class_examples(&test.samples, args.order, cfg.seed)?);
            let mut model = base.with_classifier(train.classes.len(), cfg.seed.wrapping_add(1));
            for _ in 0..fc.epochs {
                let s = trainer.classification_epoch(&mut model, &tr)?;
                let test_accuracy = class_accuracy(&model, &te)?;
                log::info!("epoch {} loss {:.4} train {:.3} test {:.3}", s.epoch, s.loss, s.train_accuracy, test_accuracy);
                rows.push(FinetuneRow { epoch: s.epoch, lr: s.lr, loss: s.loss, train_accuracy: s.train_accuracy, test_accuracy });
            }
            model
        }
        Task::Seg => {
            let (tr, te) = (seg_examples(&train.samples, args.order, cfg.seed)?, seg_examples(&test.samples, args.order, cfg.seed)?);
            let parts = tr.iter().chain(&te).flat_map(|e| e.face_labels.iter()).max().map_or(0, |m| m + 1);
            if parts < 2 {
                return Err(CliError::Data("segmentation needs at least two part labels".into()));
            }
            let mut model = base.with_segmentation(parts, cfg.seed.wrapping_add(1));
            for _ in 0..fc.epochs {
                let s = trainer.segmentation_epoch(&mut model, &tr)?;
                let test_accuracy = seg_accuracy(&model, &te)?;
                log::info!("epoch {} loss {:.4} train {:.3} test {:.3}", s.epoch, s.loss, s.train_accuracy, test_accuracy);
                rows.push(FinetuneRow { epoch: s.epoch, lr: s.lr, loss: s.loss, train_accuracy: s.train_accuracy, test_accuracy });
            }
            model
        }
    };
    model.save(&out.join("model.ckpt"))?;
    write_csv(&out.join("metrics.csv"), &rows)?;
    let last = rows.last().map_or(f64::NAN, |r| r.test_accuracy);
    let best = rows.iter().map(|r| r.test_accuracy).fold(f64::NAN, f64::max);
    write_summary(
        &out.join("summary.txt"),
        cfg,
        &[
            ("task", format!("{:?}", args.task).to_lowercase()),
            ("init", args.init.clone()),
            ("order", args.order.name().into()),
            ("epochs", fc.epochs.to_string()),
            ("final_test_accuracy", last.to_string()),
            ("best_test_accuracy", best.to_string()),
        ],
    )?;
    Ok(rows)
}

/// Linear probe on frozen encoder features; writes `metrics.csv` (per-epoch
/// history) and `summary.txt`.
pub fn cmd_probe(args: &ProbeArgs, cfg: &RunConfig, out: &Path) -> CliResult<ProbeResult> {
    let (train, test) = splits(&args.data, cfg)?;
    let base = init_model(&args.init, "random", &cfg.model, cfg.seed)?;
    let mut model = base.with_classifier(train.classes.len(), cfg.seed.wrapping_add(1));
    let tr = class_examples(&train.samples, args.order, cfg.seed)?;
    let te = class_examples(&test.samples, args.order, cfg.seed)?;
    let result = linear_probe(&mut model, &tr, &te, &cfg.probe, cfg.seed)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("metrics.csv"), &result.history)?;
    write_summary(
        &out.join("summary.txt"),
        cfg,
        &[
            ("init", args.init.clone()),
            ("train_accuracy", result.train_accuracy.to_string()),
            ("test_accuracy", result.test_accuracy.to_string()),
        ],
    )?;
    log::info!("probe test accuracy {:.3}", result.test_accuracy);
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct EvalRow {
    mesh: String,
    label: usize,
    prediction: usize,
    accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReconRow {
    mesh: String,
    loss: f64,
    mse: f64,
    chamfer: f64,
}

/// Scores a checkpoint on one split. Classification checkpoints report
/// accuracy, segmentation checkpoints per-face accuracy, and bare pretrained
/// checkpoints the masked reconstruction loss. Returns the headline number.
pub fn cmd_eval(args: &EvalArgs, cfg: &RunConfig, out: &Path) -> CliResult<f64> {
    let model = load_model(&args.ckpt)?;
    fs::create_dir_all(out)?;
    let name = |s: &Sample| s.path.strip_prefix(&args.data).unwrap_or(&s.path).to_string_lossy().into_owned();
    let (metric, value) = if let Some(classes) = model.num_classes() {
        let split = load_split(&args.data, &args.split, None, &cfg.remesh)?;
        if split.classes.len() > classes {
            return Err(CliError::Data(format!("{} classes on disk, head has {classes}", split.classes.len())));
        }
        let ex = class_examples(&split.samples, args.order, cfg.seed)?;
        let mut rows = Vec::new();
        for (s, e) in split.samples.iter().zip(&ex) {
            let p = predict_class(&model, &e.tokens)?;
            rows.push(EvalRow { mesh: name(s), label: e.label, prediction: p, accuracy: f64::from(u8::from(p == e.label)) });
        }
        write_csv(&out.join("metrics.csv"), &rows)?;
        let preds: Vec<usize> = rows.iter().map(|r| r.prediction).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
        ("accuracy", accuracy(&preds, &labels)?)
    } else if model.num_parts().is_some() {
        let split = load_split(&args.data, &args.split, None, &cfg.remesh)?;
        let ex = seg_examples(&split.samples, args.order, cfg.seed)?;
        let mut rows = Vec::new();
        for (s, e) in split.samples.iter().zip(&ex) {
            let pred = segment(&model, e)?;
            let labels = s.face_labels.as_ref().expect("checked by SegExample");
            rows.push(EvalRow { mesh: name(s), label: 0, prediction: 0, accuracy: accuracy(&pred, labels)? });
        }
        write_csv(&out.join("metrics.csv"), &rows)?;
        ("face_accuracy", seg_accuracy(&model, &ex)?)
    } else {
        let files = mesh_files_recursive(&args.data.join(&args.split))?;
        let samples = files.iter().map(|p| load_sample(p, 0, &cfg.remesh)).collect::<Result<Vec<_>, _>>()?;
        let data = tokens_of(&samples, args.order, cfg.seed)?;
        let masks = fixed_masks(&data, cfg.pretrain.mask_ratio, cfg.seed)?;
        let mut rows = Vec::new();
        for ((s, t), m) in samples.iter().zip(&data).zip(&masks) {
            if let Some(l) = evaluate_mesh(&model, t, m, cfg.pretrain.lambda)? {
                rows.push(ReconRow { mesh: name(s), loss: l.loss, mse: l.mse, chamfer: l.chamfer });
            }
        }
        if rows.is_empty() {
            return Err(CliError::Data("no meshes with masked patches".into()));
        }
        write_csv(&out.join("metrics.csv"), &rows)?;
        ("mean_chamfer", rows.iter().map(|r| r.chamfer).sum::<f64>() / rows.len() as f64)
    };
    write_summary(
        &out.join("summary.txt"),
        cfg,
        &[("checkpoint", args.ckpt.display().to_string()), ("split", args.split.clone()), (metric, value.to_string())],
    )?;
    log::info!("{metric} {value:.4}");
    Ok(value)
}

/// One OBJ triple per mask ratio; returns the mean masked-patch Chamfer
/// distance of each.
pub fn cmd_reconstruct(args: &ReconstructArgs, cfg: &RunConfig, out: &Path) -> CliResult<Vec<f64>> {
    let model = load_model(&args.ckpt)?;
    let sample = load_sample(&args.mesh, 0, &cfg.remesh)?;
    let stem = args.mesh.file_stem().map_or("mesh".into(), |s| s.to_string_lossy().into_owned());
    let mut lines = vec![("mesh", args.mesh.display().to_string())];
    let mut chamfers = Vec::new();
    for r in args.ratios.clone() {
        let e = export_reconstruction(&model, &sample.tmesh, r, cfg.seed, out, &stem)?;
        log::info!("ratio {r}: {} masked patches, chamfer {:.5}", e.masked.len(), e.mean_chamfer);
        chamfers.push(e.mean_chamfer);
    }
    for (r, c) in args.ratios.clone().iter().zip(&chamfers) {
        lines.push(("chamfer", format!("ratio {r} {c}")));
    }
    write_summary(&out.join(format!("{stem}_summary.txt")), cfg, &lines)?;
    Ok(chamfers)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask_ratio: f64,
    pub lambda: f64,
    pub pos_strategy: String,
    pub face_order: String,
    pub pretrain_loss: f64,
    pub probe_accuracy: f64,
    pub finetune_accuracy: f64,
}

/// Every grid cell pretrains a fresh model on the train split, then reports
/// linear-probe and fine-tuned test accuracy. Writes `ablation.csv`.
pub fn cmd_ablate(args: &AblateArgs, cfg: &RunConfig, out: &Path) -> CliResult<Vec<AblationRow>> {
    let (train, test) = splits(&args.data, cfg)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for order in args.orders.clone() {
        let tr = class_examples(&train.samples, order, cfg.seed)?;
        let te = class_examples(&test.samples, order, cfg.seed)?;
        let tokens: Vec<Tokens> = tr.iter().map(|e| e.tokens.clone()).collect();
        for pos in args.pos.clone() {
            for ratio in args.ratios.clone() {
                for lambda in args.lambdas.clone() {
                    let pc = crate::pretrain::PretrainConfig { mask_ratio: ratio, lambda, ..cfg.pretrain.clone() };
                    let mut model = MeshMae::new(ModelConfig { pos_strategy: pos, ..cfg.model.clone() }, cfg.seed)?;
                    let stats = pretrain(&mut model, &tokens, &pc, cfg.seed, |_| {})?;
                    let classes = train.classes.len();
                    let mut probe_model = model.clone().with_classifier(classes, cfg.seed.wrapping_add(1));
                    let probe = linear_probe(&mut probe_model, &tr, &te, &cfg.probe, cfg.seed)?;
                    let mut ft = model.with_classifier(classes, cfg.seed.wrapping_add(1));
                    let mut trainer = Finetuner::new(cfg.classify.clone(), Tuning::Full, cfg.seed)?;
                    for _ in 0..cfg.classify.epochs {
                        trainer.classification_epoch(&mut ft, &tr)?;
                    }
                    let row = AblationRow {
                        mask_ratio: ratio,
                        lambda,
                        pos_strategy: pos.name().into(),
                        face_order: order.name().into(),
                        pretrain_loss: stats.last().map_or(f64::NAN, |s| s.loss),
                        probe_accuracy: probe.test_accuracy,
                        finetune_accuracy: class_accuracy(&ft, &te)?,
                    };
                    log::info!("{row:?}");
                    rows.push(row);
                    write_csv(&out.join("ablation.csv"), &rows)?;
                }
            }
        }
    }
    write_summary(&out.join("summary.txt"), cfg, &[("cells", rows.len().to_string())])?;
    Ok(rows)
}
