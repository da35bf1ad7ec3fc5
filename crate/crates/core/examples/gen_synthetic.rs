//! Writes the default synthetic feeder and partition as TOML.
//!
//! `cargo run --example gen_synthetic -- <out_dir>`

use mafo_core::synthetic::{generate, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| ".".into());
    let s = generate(&SyntheticSpec::default())?;
    let header = "# Generated by mafo_core::synthetic::generate(&SyntheticSpec::default()).\n";
    std::fs::write(
        format!("{dir}/synthetic6.feeder.toml"),
        format!("{header}{}", s.feeder_toml()?),
    )?;
    std::fs::write(
        format!("{dir}/synthetic6.partition.toml"),
        format!("{header}{}", s.partition_toml()?),
    )?;
    Ok(())
}
