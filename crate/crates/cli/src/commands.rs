use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::DType;
use fundus_height::codec::{decode_height, HeightmapImage};
use fundus_height::config::{OutputTree, RunManifest, Scale, RUN_MANIFEST};
use fundus_height::data::{
    load_pair, read_manifest, resolve, synth_generate_with, write_dataset, FundusImage, PrepRecord,
};
use fundus_height::image::{hstack, images_to_tensor, tensor_to_images, vstack, RgbImage};
use fundus_height::metrics::{FrozenDiscriminator, Predictor};
use fundus_height::trainer::Checkpoint;
use fundus_height::Error;
use sha2::{Digest, Sha256};

use crate::run::{
    colormap, command_line, eval_run, generator_from, load_corpus, partition, resolve_config, run_root_of,
    train_run, CliError, CliResult,
};
use crate::{DataArgs, EvalArgs, GlobalArgs, InferArgs, PrepArgs, SynthArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str, cmd: &str) -> CliResult<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("{cmd} needs {flag}")))
}

/// SHA-256 over the concatenated bytes of `paths`.
fn files_digest(paths: &[PathBuf]) -> CliResult<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p).map_err(io_err(p))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn prep(g: &GlobalArgs, a: &PrepArgs) -> CliResult<()> {
    let cfg = resolve_config(g, None, Scale::Full)?;
    let out = require(&g.out, "--out", "prep")?;
    if out.exists() && a.input.exists() && std::fs::canonicalize(out).ok() == std::fs::canonicalize(&a.input).ok() {
        return Err(CliError::Usage("prep --out must differ from --input".into()));
    }
    let size = a.size.unwrap_or(cfg.image_size());
    if size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    let clahe = (!a.no_clahe).then(|| {
        let mut c = cfg.clahe.clone();
        if let Some(v) = a.clip_limit {
            c.clip_limit = v;
        }
        if let Some(t) = a.tile_grid {
            c.tile_grid = (t, t);
        }
        c
    });
    let entries = read_manifest(&a.input)?;
    let mut digests = BTreeMap::new();
    for e in &entries {
        let files = [resolve(&a.input, &e.fundus_path), resolve(&a.input, &e.heightmap_path)];
        digests.insert(e.id.clone(), files_digest(&files)?);
    }
    let record = PrepRecord {
        image_size: size,
        clahe,
        digests,
    };
    if PrepRecord::load(out)?.as_ref() == Some(&record) && outputs_present(out) {
        log::info!("{} is up to date ({} pairs)", out.display(), entries.len());
        return Ok(());
    }
    let stale = out.join(fundus_height::data::PREP_RECORD);
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(io_err(&stale))?;
    }
    // An input that was itself prepared is not contrast-enhanced twice.
    let already = PrepRecord::load(&a.input)?.is_some();
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let p = load_pair(&a.input, e, already)?;
        pairs.push(fundus_height::data::preprocess(&p, size, record.clahe.as_ref())?);
    }
    write_dataset(out, &pairs)?;
    record.save(out)?;
    log::info!("prepared {} pairs into {}", pairs.len(), out.display());
    Ok(())
}

fn outputs_present(root: &Path) -> bool {
    read_manifest(root).is_ok_and(|entries| {
        entries
            .iter()
            .all(|e| resolve(root, &e.fundus_path).exists() && resolve(root, &e.heightmap_path).exists())
    })
}

pub fn synth(g: &GlobalArgs, a: &SynthArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("synth needs -n of at least 1".into()));
    }
    let cfg = resolve_config(g, None, Scale::Full)?;
    let out = g.out.clone().unwrap_or_else(|| cfg.paths.data_root.clone());
    let size = a.size.unwrap_or(cfg.image_size());
    let pairs = synth_generate_with(a.n, cfg.train.seed, (size, size), &cfg.synth, &colormap(&cfg)?)?;
    write_dataset(&out, &pairs)?;
    log::info!("wrote {} synthetic pairs ({size}x{size}) to {}", pairs.len(), out.display());
    Ok(())
}

pub fn train(g: &GlobalArgs, a: &DataArgs) -> CliResult<()> {
    let cfg = resolve_config(g, None, Scale::Full)?;
    let part = partition(&cfg, load_corpus(&cfg, a.data.as_deref())?)?;
    let out = cfg.paths.out_dir.clone();
    let ckpt = train_run(&cfg, &part, &out, g.ckpt.as_deref())?;
    log::info!(
        "finished at stage K={} after {} steps; checkpoints in {}",
        ckpt.meta.stage,
        ckpt.meta.global_step,
        out.join("checkpoints").display()
    );
    Ok(())
}

/// The checkpoint must have been produced by the configuration in use.
fn check_compatible(cfg: &fundus_height::config::RunConfig, ckpt: &Checkpoint, root: Option<&Path>) -> CliResult<()> {
    let (g, m) = (&cfg.generator, &ckpt.meta.generator);
    let mut mismatched = Vec::new();
    if (g.unet_depth, g.base_channels, g.image_size) != (m.unet_depth, m.base_channels, m.image_size) {
        mismatched.push("generator architecture".to_string());
    }
    if let Some(manifest) = root.map(|r| r.join(RUN_MANIFEST)).filter(|p| p.exists()) {
        let recorded = RunManifest::load(&manifest)?.config_digest;
        if recorded != cfg.digest()? {
            mismatched.push(format!("config digest ({} recorded in {})", &recorded[..12], manifest.display()));
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch { mismatched }.into())
    }
}

pub fn eval(g: &GlobalArgs, a: &EvalArgs) -> CliResult<()> {
    let dir = require(&g.ckpt, "--ckpt", "eval")?;
    let ckpt = Checkpoint::load(dir)?;
    let root = run_root_of(dir);
    let cfg = resolve_config(g, root.as_deref(), Scale::Full)?;
    check_compatible(&cfg, &ckpt, root.as_deref())?;
    let gen = generator_from(&ckpt)?;
    let frozen = FrozenDiscriminator::load(a.lpips_ckpt.as_ref().unwrap_or(dir))?;
    let part = partition(&cfg, load_corpus(&cfg, a.data.data.as_deref())?)?;
    let tree = OutputTree::create(&cfg.paths.out_dir)?;
    let report = eval_run(
        &gen,
        &part.test,
        &frozen,
        &colormap(&cfg)?,
        &tree,
        cfg.train.batch_size,
        cfg.ablation.head_dump_samples,
    )?;
    RunManifest::new(&command_line(), &cfg)?.save(&tree.reports().join("eval_manifest.json"))?;
    println!(
        "n={} SSIM {:.4} LPIPS {:.3e} MSE {:.5} PSNR {:.3} dB MAE {:.2} um",
        report.n_samples, report.ssim, report.lpips, report.mse, report.psnr_db, report.mae_um
    );
    Ok(())
}

pub fn infer(g: &GlobalArgs, a: &InferArgs) -> CliResult<()> {
    let dir = require(&g.ckpt, "--ckpt", "infer")?;
    let ckpt = Checkpoint::load(dir)?;
    let cfg = resolve_config(g, run_root_of(dir).as_deref(), Scale::Full)?;
    let out = g.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("infer"));
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let gen = generator_from(&ckpt)?;
    let cmap = colormap(&cfg)?;
    let size = ckpt.meta.generator.image_size;

    let mut stems = BTreeSet::new();
    let mut inputs = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Usage(format!("{} has no file name", path.display())))?;
        if !stems.insert(stem.clone()) {
            return Err(CliError::Usage(format!("two inputs share the name {stem}")));
        }
        let mut f = FundusImage::raw(RgbImage::load_png_raw(path)?)?.resize(size, size);
        if !a.no_clahe {
            f = f.clahe(&cfg.clahe)?;
        }
        inputs.push((stem, f.normalize()?));
    }

    let mut rows = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(cfg.train.batch_size.max(1)) {
        let xs: Vec<RgbImage> = chunk.iter().map(|(_, f)| f.pixels().clone()).collect();
        let pred = gen.predict(&images_to_tensor(&xs, DType::F32)?)?.clamp(0.0, 1.0).map_err(Error::from)?;
        for ((stem, f), img) in chunk.iter().zip(tensor_to_images(&pred)?) {
            img.save_png(&out.join(format!("{stem}_heightmap.png")), 255.0)?;
            let field = decode_height(&HeightmapImage::new(img.clone())?, &cmap);
            let mut text = String::new();
            for r in 0..field.height {
                let row: Vec<String> = (0..field.width).map(|c| format!("{:.3}", field.get(r, c))).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            let csv = out.join(format!("{stem}_um.csv"));
            std::fs::write(&csv, text).map_err(io_err(&csv))?;
            rows.push(hstack(&[f.pixels(), &img], 2));
        }
    }
    vstack(&rows, 2).save_png(&out.join("grid.png"), 255.0)?;
    log::info!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(())
}
