//! End-to-end runs of the `meshmae` command line, in-process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use meshmae::cli::{main_from, Manifest};

fn run(args: &[&str]) -> i32 {
    main_from(std::iter::once("meshmae").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY: &str = r#"
[model]
embed_dim = 16
decoder_dim = 16
encoder_layers = 1
decoder_layers = 1
heads = 2

[pretrain]
epochs = 1
batch_size = 4

[classify]
epochs = 1
batch_size = 4

[probe]
epochs = 2
"#;

#[test]
fn preprocess_is_reproducible_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    assert_eq!(run(&["--seed", "3", "synth", "--families", "box,seg_hemisphere", "--per-class", "2", "--out", s(&raw)]), 0);
    fs::write(raw.join("broken.obj"), "v 0 0 0\nf 1 2 3\n").unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["--seed", "3", "preprocess", "--input", s(&raw), "--out", s(out)]), 0);
    }
    assert_eq!(tree(&a), tree(&b));

    let m: Manifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.processed.len(), 4);
    assert_eq!(m.failed.len(), 1);
    assert_eq!(m.failed[0].input, "broken.obj");
    assert!(m.processed.iter().all(|e| e.patches.iter().all(|&n| (96..=256).contains(&n))));
    // segmentation labels follow the remeshed output
    assert!(a.join("train/seg_hemisphere/seg_hemisphere_000_v00.labels").exists());
}

#[test]
fn data_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("x.obj"), "garbage\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["preprocess", "--input", s(&bad), "--out", s(&out)]), 2);
    assert_eq!(run(&["eval", "--ckpt", s(&dir.path().join("none.ckpt")), "--data", s(&bad), "--out", s(&out)]), 2);
    assert_eq!(run(&["pretrain", "--data", s(&bad), "--mask-ratio", "1.5", "--out", s(&out)]), 1);
    assert_eq!(run(&["finetune", "--task", "cls"]), 1);
}

#[test]
fn pretrain_finetune_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let c = s(&cfg);
    assert_eq!(run(&["--config", c, "synth", "--families", "sphere,box", "--per-class", "3", "--test-fraction", "0.34", "--out", s(&data)]), 0);

    let ckpt = dir.path().join("mae.ckpt");
    assert_eq!(run(&["--config", c, "pretrain", "--data", s(&data.join("train")), "--out", s(&ckpt)]), 0);
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("mae.log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,chamfer,mse"));

    let ft = dir.path().join("ft");
    assert_eq!(run(&["--config", c, "finetune", "--task", "cls", "--init", s(&ckpt), "--data", s(&data), "--out", s(&ft)]), 0);
    let summary = fs::read_to_string(ft.join("summary.txt")).unwrap();
    assert!(summary.starts_with("config_hash: "));

    let ev = dir.path().join("eval");
    assert_eq!(run(&["--config", c, "eval", "--ckpt", s(&ft.join("model.ckpt")), "--data", s(&data), "--out", s(&ev)]), 0);

    let probe = dir.path().join("probe");
    assert_eq!(run(&["--config", c, "probe", "--init", "random", "--data", s(&data), "--out", s(&probe)]), 0);
    assert!(probe.join("metrics.csv").exists());

    let rec = dir.path().join("rec");
    let mesh = data.join("test/sphere/sphere_002.obj");
    assert_eq!(run(&["--config", c, "reconstruct", "--ckpt", s(&ckpt), "--mesh", s(&mesh), "--ratios", "0.5", "--out", s(&rec)]), 0);
    assert!(fs::read_dir(&rec).unwrap().count() >= 3);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let c = s(&cfg);
    assert_eq!(run(&["--config", c, "synth", "--families", "sphere,box", "--per-class", "2", "--test-fraction", "0.5", "--out", s(&data)]), 0);
    let out = dir.path().join("ablate");
    let code = run(&["--config", c, "ablate", "--data", s(&data), "--ratios", "0.5,0.75", "--pos", "d,a", "--orders", "original,random", "--out", s(&out)]);
    assert_eq!(code, 0);
    let mut rdr = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    assert_eq!(rdr.records().count(), 8);
}
