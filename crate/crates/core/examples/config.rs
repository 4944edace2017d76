//! Run configuration: a partial TOML file merged over a preset.

use meshmae::config::{Preset, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides = r#"
seed = 3

[pretrain]
mask_ratio = 0.75
epochs = 10

[model]
pos_strategy = "a_learnable"
"#;
    let cfg = RunConfig::from_toml(overrides, Preset::Desk)?;
    println!("seed {} hash {}", cfg.seed, cfg.hash());
    println!("model {:?}", cfg.model);
    println!("pretrain {:?}", cfg.pretrain);

    match RunConfig::from_toml("[pretrain]\nmask_ratio = 1.5\n", Preset::Desk) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    println!("\nfull desk preset:\n{}", RunConfig::desk().to_toml());
    Ok(())
}
