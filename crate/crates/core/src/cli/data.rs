use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_summary, CliError, CliResult};
use crate::augment::augment;
use crate::config::RunConfig;
use crate::dataset::{labels_path, mesh_files_recursive, read_labels, write_labels};
use crate::downstream::transfer_labels;
use crate::mesh::{load_mesh_file, save_mesh_file, Mesh};
use crate::remesh::{remesh_pipeline, RemeshConfig, TMesh};
use crate::synth::{generate_dataset, ShapeFamily, SynthSpec};

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Comma-separated families: sphere, box, cylinder, torus,
    /// seg_hemisphere, seg_cylinder.
    #[arg(long, default_value = "sphere,box,cylinder", value_delimiter = ',')]
    pub families: Vec<ShapeFamily>,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Fraction of every class written to the `test` split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.25)]
    pub stretch: f64,
}

/// Writes `<out>/{train,test}/<family>/<family>_NNN.obj`, plus a `.labels`
/// file for segmentation families. The last `test_fraction` of every class
/// goes to `test`. Returns the written mesh paths.
pub fn write_synthetic(spec: &SynthSpec, test_fraction: f64, out: &Path) -> CliResult<Vec<PathBuf>> {
    if spec.per_class == 0 || spec.families.is_empty() {
        return Err(CliError::Usage("need at least one family and one mesh per class".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CliError::Usage(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let n_test = (spec.per_class as f64 * test_fraction).round() as usize;
    let mut written = Vec::new();
    for (i, m) in generate_dataset(spec).into_iter().enumerate() {
        let k = i % spec.per_class;
        let split = if k >= spec.per_class - n_test { "test" } else { "train" };
        let dir = out.join(split).join(m.family.name());
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}_{k:03}.obj", m.family.name()));
        save_mesh_file(&m.mesh, &path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if let Some(l) = &m.face_labels {
            write_labels(&labels_path(&path), l)?;
        }
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_synth(args: &SynthArgs, cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let spec = SynthSpec {
        families: args.families.clone(),
        per_class: args.per_class,
        noise: args.noise,
        stretch: args.stretch,
        seed: cfg.seed,
    };
    let written = write_synthetic(&spec, args.test_fraction, out)?;
    fs::write(out.join("synth.json"), serde_json::to_string_pretty(&spec).expect("spec serializes"))?;
    write_summary(&out.join("summary.txt"), cfg, &[("meshes", written.len().to_string())])?;
    log::info!("wrote {} meshes to {}", written.len(), out.display());
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input: String,
    pub outputs: Vec<String>,
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFailure {
    pub input: String,
    pub reason: String,
}

/// `manifest.json` of a preprocessing run. Paths are relative to the input
/// and output roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub variants: usize,
    pub processed: Vec<ManifestEntry>,
    pub failed: Vec<ManifestFailure>,
}

/// Per-input seed derived from the run seed and the relative path, so results
/// do not depend on which other files are present.
fn mesh_seed(seed: u64, rel: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(rel.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn variants_of(raw: &Mesh, cfg: &RunConfig, seed: u64) -> Result<Vec<(Mesh, TMesh)>, String> {
    (0..cfg.variants as u64)
        .map(|v| {
            let s = seed.wrapping_add(v);
            let source = augment(raw, &cfg.aug, &mut ChaCha8Rng::seed_from_u64(s));
            let t = remesh_pipeline(&source, &RemeshConfig { seed: s, ..cfg.remesh }).map_err(|e| format!("variant {v}: {e}"))?;
            Ok((source, t))
        })
        .collect()
}

fn process_one(input: &Path, out: &Path, rel: &Path, cfg: &RunConfig) -> Result<ManifestEntry, String> {
    let raw = load_mesh_file(input).map_err(|e| e.to_string())?;
    let label_file = labels_path(input);
    let labels = if label_file.exists() { Some(read_labels(&label_file).map_err(|e| e.to_string())?) } else { None };
    if let Some(l) = &labels {
        if l.len() != raw.num_faces() {
            return Err(format!("{} labels for {} faces", l.len(), raw.num_faces()));
        }
    }
    let rel_str = rel.to_string_lossy().replace('\\', "/");
    let variants = variants_of(&raw, cfg, mesh_seed(cfg.seed, &rel_str))?;

    let dir = out.join(rel.parent().unwrap_or(Path::new("")));
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let stem = rel.file_stem().expect("mesh file has a stem").to_string_lossy();
    let mut entry = ManifestEntry { input: rel_str, outputs: Vec::new(), patches: Vec::new() };
    for (v, (source, t)) in variants.iter().enumerate() {
        let name = format!("{stem}_v{v:02}.obj");
        let path = dir.join(&name);
        t.save(&path).map_err(|e| e.to_string())?;
        if let Some(l) = &labels {
            let moved = transfer_labels(source, l, &t.mesh).map_err(|e| e.to_string())?;
            write_labels(&labels_path(&path), &moved).map_err(|e| e.to_string())?;
        }
        let out_rel = rel.with_file_name(&name);
        entry.outputs.push(out_rel.to_string_lossy().replace('\\', "/"));
        entry.patches.push(t.num_patches);
    }
    Ok(entry)
}

/// Remeshes every mesh below `input` into `cfg.variants` t-meshes under
/// `out`, mirroring the directory layout. Inputs that fail are listed in the
/// manifest; the run fails only if nothing succeeds.
pub fn cmd_preprocess(input: &Path, out: &Path, cfg: &RunConfig) -> CliResult<Manifest> {
    let files = mesh_files_recursive(input)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no mesh files under {}", input.display())));
    }
    fs::create_dir_all(out)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(files.len());
    let mut results: Vec<Option<Result<ManifestEntry, String>>> = vec![None; files.len()];
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let files = &files;
                s.spawn(move || {
                    (w..files.len())
                        .step_by(workers)
                        .map(|i| {
                            let rel = files[i].strip_prefix(input).expect("listed below input");
                            (i, process_one(&files[i], out, rel, cfg))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        variants: cfg.variants,
        processed: Vec::new(),
        failed: Vec::new(),
    };
    for (file, r) in files.iter().zip(results) {
        match r.expect("every file processed") {
            Ok(e) => manifest.processed.push(e),
            Err(reason) => {
                let rel = file.strip_prefix(input).expect("listed below input");
                log::warn!("{}: {reason}", rel.display());
                manifest.failed.push(ManifestFailure { input: rel.to_string_lossy().replace('\\', "/"), reason });
            }
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join("manifest.json"), text + "\n")?;
    if manifest.processed.is_empty() {
        return Err(CliError::Data(format!("all {} inputs failed", files.len())));
    }
    Ok(manifest)
}
