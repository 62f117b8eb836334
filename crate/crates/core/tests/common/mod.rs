#![allow(dead_code)]

use std::path::Path;

use munet::dataset::{build_manifest, gen_synthetic, Manifest, PipelineConfig, SynthConfig};

/// Generate `synth` under `dir/data`, chunk it, and save `dir/manifest.json`.
pub fn synth_manifest(
    dir: &Path,
    synth: &SynthConfig,
    valid_fraction: f64,
    filter_silent: bool,
) -> Manifest {
    let entries = gen_synthetic(synth, &dir.join("data")).expect("synthetic data");
    let mut pipeline = PipelineConfig::new(synth.source_names());
    pipeline.valid_fraction = valid_fraction;
    pipeline.filter_silent = filter_silent;
    pipeline.seed = synth.seed;
    let manifest = build_manifest(&entries, &pipeline).expect("manifest");
    manifest.save(&dir.join("manifest.json")).expect("save manifest");
    manifest
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}
