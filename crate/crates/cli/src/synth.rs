use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use lift3d::config::RunConfig;
use lift3d::geometry::DEFAULT_FOCAL;
use lift3d::prototypes::load_registry;
use lift3d::synth::{builtin_registry, gen_synthetic, write_synthetic, SynthConfig};

use crate::common::write_json;

pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Pixel noise sigma on keypoint candidates.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spurious candidates per scene.
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    /// Also write ground-truth silhouette masks.
    #[arg(long)]
    masks: bool,
    /// Class name for the built-in cuboid prototypes.
    #[arg(long, default_value = "car")]
    class: String,
    /// Prototype manifest to sample from instead of the built-in cuboids.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
    #[arg(long, default_value_t = DEFAULT_FOCAL)]
    focal: f64,
    /// Extra standard-normal feature columns.
    #[arg(long, default_value_t = 3)]
    nuisance_dims: usize,
}

pub fn run(a: GenSynthArgs) -> Result<()> {
    let registry = match &a.registry {
        Some(p) => load_registry(p).with_context(|| format!("loading registry {}", p.display()))?,
        None => builtin_registry(&a.class),
    };
    let cfg = SynthConfig {
        scenes: a.scenes,
        noise: a.noise,
        seed: a.seed,
        width: a.width,
        height: a.height,
        focal: a.focal,
        distractors: a.distractors,
        nuisance_dims: a.nuisance_dims,
        masks: a.masks,
        ..Default::default()
    };
    let out = gen_synthetic(&registry, &cfg)?;
    write_synthetic(&out, &registry, &a.out)?;

    let mut run = RunConfig::new("gen-synth").path("out", &a.out);
    run.focal = a.focal;
    run.seed = Some(a.seed);
    if let Some(r) = &a.registry {
        run = run.path("registry", r);
    }
    write_json(&a.out.join(SYNTH_CONFIG_FILE), &serde_json::json!({ "config": run, "synth": cfg }))?;
    log::info!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}
