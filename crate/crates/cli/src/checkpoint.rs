//! Checkpoint directory: `manifest.tsv` (`name<TAB>relative path`), one VPT1 file per
//! parameter under `tensors/`, and `config.cfg`, the run config that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use vidpad::model::ModelParams;
use vidpad::tensor::io;

use crate::config::RunConfig;

pub fn save(dir: &Path, cfg: &RunConfig, params: &ModelParams<f32>) -> Result<()> {
    fs::create_dir_all(dir.join("tensors")).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = String::new();
    for (name, t) in params.entries() {
        let rel = format!("tensors/{name}.vpt");
        io::save(t, dir.join(&rel)).with_context(|| format!("writing {rel}"))?;
        writeln!(manifest, "{name}\t{rel}").expect("write to string");
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    fs::write(dir.join("config.cfg"), cfg.dump())?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(RunConfig, ModelParams<f32>)> {
    let cfg = RunConfig::load(&dir.join("config.cfg"))?;
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))
        .with_context(|| format!("reading {}", dir.join("manifest.tsv").display()))?;
    let mut entries = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let Some((name, rel)) = line.split_once('\t') else {
            bail!("manifest.tsv line {}: expected name<TAB>path", i + 1);
        };
        let t = io::load::<f32>(dir.join(rel)).with_context(|| format!("reading {rel}"))?;
        entries.push((name.to_string(), t));
    }
    let params = ModelParams::from_entries(&cfg.model_config(), entries)
        .context("checkpoint does not match its config")?;
    Ok((cfg, params))
}
