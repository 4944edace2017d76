//! Drive the command-line interface in-process: synthesize a dataset,
//! preprocess it twice and confirm the outputs are identical.

use meshmae::cli::main_from;

fn main() {
    let root = tempfile_dir();
    let raw = root.join("raw");
    let out = root.join("processed");
    let s = |p: &std::path::Path| p.to_string_lossy().into_owned();

    let code = main_from(["meshmae", "--seed", "5", "synth", "--families", "sphere,seg_cylinder", "--per-class", "3", "--out", &s(&raw)]);
    println!("synth exit {code}");
    let code = main_from(["meshmae", "--seed", "5", "preprocess", "--input", &s(&raw), "--out", &s(&out)]);
    println!("preprocess exit {code}");
    let first = std::fs::read(out.join("manifest.json")).expect("manifest written");
    main_from(["meshmae", "--seed", "5", "preprocess", "--input", &s(&raw), "--out", &s(&out)]);
    let second = std::fs::read(out.join("manifest.json")).expect("manifest written");
    println!("manifest identical on rerun: {}", first == second);
    println!("{}", String::from_utf8_lossy(&first).lines().take(12).collect::<Vec<_>>().join("\n"));

    println!("unknown subcommand exit {}", main_from(["meshmae", "frobnicate"]));
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("meshmae_cli_{}", std::process::id()));
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}
