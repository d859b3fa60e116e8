//! Plumbing shared by the subcommands: error mapping, configuration
//! resolution, corpus loading, and the train/eval building blocks.

use std::path::{Path, PathBuf};

use candle_core::DType;
use fundus_height::codec::ColorMap;
use fundus_height::config::{OutputTree, RunConfig, RunManifest, Scale, RUN_MANIFEST};
use fundus_height::data::{augment_all, batch_tensors, load_dataset, make_splits, preprocess, Partition, SamplePair};
use fundus_height::generator::{build_generator, Generator};
use fundus_height::image::{hstack, tensor_to_images, vstack, RgbImage};
use fundus_height::metrics::{evaluate, FrozenDiscriminator, MetricReport};
use fundus_height::nn::Mode;
use fundus_height::trainer::{Checkpoint, Trainer};
use fundus_height::Error;

use crate::GlobalArgs;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// For a checkpoint at `root/checkpoints/<name>`, the run root if it holds a
/// saved configuration.
pub fn run_root_of(ckpt: &Path) -> Option<PathBuf> {
    let root = ckpt.parent()?.parent()?;
    root.join(CONFIG_FILE).exists().then(|| root.to_path_buf())
}

/// `--config`, else the configuration saved in `run_root`, else the `--scale`
/// preset (or `default_scale`); command-line overrides are applied last.
pub fn resolve_config(g: &GlobalArgs, run_root: Option<&Path>, default_scale: Scale) -> CliResult<RunConfig> {
    let saved = run_root.map(|r| r.join(CONFIG_FILE)).filter(|p| p.exists());
    let mut cfg = match (&g.config, saved) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => RunConfig::for_scale(g.scale.map(Scale::from).unwrap_or(default_scale)),
    };
    if g.config.is_some() && g.scale.is_some() {
        log::warn!("--scale is ignored when --config is given");
    }
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = g.deterministic {
        cfg.train.deterministic = d;
    }
    if let Some(o) = &g.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn colormap(cfg: &RunConfig) -> CliResult<ColorMap> {
    Ok(match &cfg.paths.colormap {
        Some(p) => ColorMap::load_json(p)?,
        None => ColorMap::default(),
    })
}

pub fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// Loads the corpus and brings every pair to the model's input convention.
pub fn load_corpus(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Vec<SamplePair>> {
    let root = data.unwrap_or(&cfg.paths.data_root);
    let pairs = load_dataset(root)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no pairs", root.display())).into());
    }
    let size = cfg.image_size();
    Ok(pairs
        .iter()
        .map(|p| preprocess(p, size, Some(&cfg.clahe)))
        .collect::<fundus_height::Result<_>>()?)
}

pub fn partition(cfg: &RunConfig, pairs: Vec<SamplePair>) -> CliResult<Partition> {
    let part = make_splits(pairs, &cfg.splits, cfg.train.seed)?;
    log::info!(
        "split: {} train / {} val / {} test",
        part.train.len(),
        part.val.len(),
        part.test.len()
    );
    Ok(part)
}

fn write_splits(path: &Path, part: &Partition) -> CliResult<()> {
    let mut text = String::from("id,split\n");
    for p in part.train.iter().chain(&part.val).chain(&part.test) {
        let split = p.split.map(|s| s.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{split}\n", p.id));
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Trains all stages of `cfg` into `out`, optionally resuming from `resume`.
pub fn train_run(cfg: &RunConfig, part: &Partition, out: &Path, resume: Option<&Path>) -> CliResult<Checkpoint> {
    let tree = OutputTree::create(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    RunManifest::new(&command_line(), cfg)?.save(&out.join(RUN_MANIFEST))?;
    write_splits(&tree.logs().join("splits.csv"), part)?;
    let train = if cfg.augment {
        augment_all(&part.train)?
    } else {
        part.train.clone()
    };
    let trainer = match resume {
        Some(dir) => Trainer::resume(&Checkpoint::load(dir)?, &cfg.train, &cfg.losses)?,
        None => Trainer::new(&cfg.generator, &cfg.discriminator, &cfg.train, &cfg.losses)?,
    };
    let mut trainer = trainer.with_output(out)?;
    log::info!(
        "training stages {:?} on {} samples, generator parameters at start: {}",
        cfg.train.stages,
        train.len(),
        trainer.generator().parameter_count()
    );
    Ok(trainer.fit(&train, &part.val)?)
}

/// Rebuilds the generator stored in a checkpoint.
pub fn generator_from(ckpt: &Checkpoint) -> CliResult<Generator> {
    let mut g = ckpt.meta.generator.clone();
    g.num_unets = ckpt.meta.stage;
    let gen = build_generator(&g, ckpt.meta.seed, DType::F32)?;
    gen.store().load_tensors(&ckpt.generator)?;
    Ok(gen)
}

/// Scores `gen` on `test`, writes `reports/metrics.{json,csv}` and the per-head
/// dump `figures/heads.png`.
pub fn eval_run(
    gen: &Generator,
    test: &[SamplePair],
    d: &FrozenDiscriminator,
    cmap: &ColorMap,
    tree: &OutputTree,
    batch_size: usize,
    head_samples: usize,
) -> CliResult<MetricReport> {
    let report = evaluate(gen, test, d, cmap, batch_size)?;
    report.save_json(&tree.reports().join("metrics.json"))?;
    report.save_csv(&tree.reports().join("metrics.csv"))?;
    let n = head_samples.min(test.len());
    if n > 0 {
        dump_heads(gen, &test[..n], &tree.figures().join("heads.png"))?;
    }
    Ok(report)
}

/// One row per sample: fundus | head 1 … head K | final | target.
pub fn dump_heads(gen: &Generator, samples: &[SamplePair], path: &Path) -> CliResult<usize> {
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let (x, _) = batch_tensors(&refs, DType::F32)?;
    let out = gen.forward(&x, &mut Mode::Eval)?;
    let heads = out
        .heads
        .iter()
        .map(tensor_to_images)
        .collect::<fundus_height::Result<Vec<_>>>()?;
    let finals = tensor_to_images(&out.final_output)?;
    let rows: Vec<RgbImage> = samples
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cells: Vec<&RgbImage> = vec![p.fundus.pixels()];
            cells.extend(heads.iter().map(|h| &h[i]));
            cells.push(&finals[i]);
            cells.push(&p.target.pixels);
            hstack(&cells, 2)
        })
        .collect();
    vstack(&rows, 2).save_png(path, 255.0)?;
    Ok(heads.len())
}
