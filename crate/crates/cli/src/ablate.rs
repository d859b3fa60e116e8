//! Sweep points share seed and data split; each trains into its own run tree
//! under `out/ablation/<sweep>/<point>/` and is scored with one pinned LPIPS
//! discriminator so the LPIPS column is comparable across rows.

use std::path::{Path, PathBuf};

use fundus_height::config::{OutputTree, RunConfig, RunManifest, Scale, Sweep, RUN_MANIFEST};
use fundus_height::losses::PixelNorm;
use fundus_height::metrics::{FrozenDiscriminator, MetricReport};
use fundus_height::Error;

use crate::figures::bar_chart;
use crate::run::{
    colormap, command_line, eval_run, generator_from, load_corpus, partition, resolve_config, train_run, CliError,
    CliResult, CONFIG_FILE,
};
use crate::{AblateArgs, GlobalArgs};

pub const TABLE_HEADER: [&str; 5] = ["variant", "SSIM", "LPIPS", "MSE", "PSNR(dB)"];

pub struct SweepPoint {
    pub label: String,
    pub slug: String,
    pub cfg: RunConfig,
    /// Head count the trained generator must expose.
    pub heads: usize,
}

pub fn sweep_slug(s: Sweep) -> &'static str {
    match s {
        Sweep::StackDepth => "stack_depth",
        Sweep::Supervision => "supervision",
        Sweep::PixelNorm => "pixel_norm",
    }
}

pub fn sweep_points(base: &RunConfig, sweep: Sweep) -> Vec<SweepPoint> {
    let final_k = *base.train.stages.last().expect("validated config has stages");
    match sweep {
        Sweep::StackDepth => base
            .ablation
            .stack_depths
            .iter()
            .map(|&k| {
                let mut cfg = base.clone();
                cfg.train.stages = (1..=k).collect();
                cfg.train.stage_epochs = None;
                cfg.generator.num_unets = k;
                SweepPoint {
                    label: format!("K={k}"),
                    slug: format!("k{k}"),
                    cfg,
                    heads: k,
                }
            })
            .collect(),
        Sweep::Supervision => [(true, "w supervision", "with"), (false, "w/o supervision", "without")]
            .into_iter()
            .map(|(on, label, slug)| {
                let mut cfg = base.clone();
                cfg.generator.deep_supervision = on;
                SweepPoint {
                    label: label.into(),
                    slug: slug.into(),
                    cfg,
                    heads: final_k,
                }
            })
            .collect(),
        Sweep::PixelNorm => [(PixelNorm::L1, "L1-Loss", "l1"), (PixelNorm::L2, "L2-Loss", "l2")]
            .into_iter()
            .map(|(norm, label, slug)| {
                let mut cfg = base.clone();
                cfg.losses.pixel_norm = norm;
                SweepPoint {
                    label: label.into(),
                    slug: slug.into(),
                    cfg,
                    heads: final_k,
                }
            })
            .collect(),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::Data(format!("{}: {e}", path.display())))
}

/// `variant,SSIM,LPIPS,MSE,PSNR(dB)` with one row per surviving sweep point.
pub fn write_table(path: &Path, rows: &[(String, MetricReport)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(TABLE_HEADER).map_err(csv_err(path))?;
    for (label, r) in rows {
        w.write_record([
            label.clone(),
            format!("{:.4}", r.ssim),
            format!("{:.2e}", r.lpips),
            format!("{:.4}", r.mse),
            format!("{:.4}", r.psnr_db),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_failures(path: &Path, failures: &[(String, String)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["variant", "error"]).map_err(csv_err(path))?;
    for (label, err) in failures {
        w.write_record([label, err]).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn ablate(g: &GlobalArgs, a: &AblateArgs) -> CliResult<()> {
    let base = resolve_config(g, None, Scale::Desk)?;
    let sweeps: Vec<Sweep> = if a.sweep.is_empty() {
        base.ablation.sweeps.clone()
    } else {
        a.sweep.iter().map(|&s| s.into()).collect()
    };
    if sweeps.is_empty() {
        return Err(CliError::Usage("no sweeps selected".into()));
    }
    let root = base.paths.out_dir.clone();
    let tree = OutputTree::create(&root)?;
    base.save(&root.join(CONFIG_FILE))?;
    RunManifest::new(&command_line(), &base)?.save(&root.join(RUN_MANIFEST))?;
    let part = partition(&base, load_corpus(&base, a.data.data.as_deref())?)?;
    let cmap = colormap(&base)?;
    let mut pinned = a.lpips_ckpt.as_deref().map(FrozenDiscriminator::load).transpose()?;

    let mut completed = 0;
    let mut first_err: Option<CliError> = None;
    for sweep in sweeps {
        let slug = sweep_slug(sweep);
        let mut failures: Vec<(String, String)> = Vec::new();
        let mut trained = Vec::new();
        for p in sweep_points(&base, sweep) {
            let dir: PathBuf = root.join("ablation").join(slug).join(&p.slug);
            log::info!("{slug}: training {} in {}", p.label, dir.display());
            match train_run(&p.cfg, &part, &dir, None) {
                Ok(ckpt) => trained.push((p, dir, ckpt)),
                Err(e) => {
                    log::warn!("{slug}: {} failed: {e}", p.label);
                    failures.push((p.label.clone(), e.to_string()));
                    first_err.get_or_insert(e);
                }
            }
        }
        if pinned.is_none() {
            if let Some((p, dir, _)) = trained.first() {
                log::info!("LPIPS features come from the discriminator of {}", p.label);
                pinned = Some(FrozenDiscriminator::load(&dir.join("checkpoints").join("latest"))?);
            }
        }
        let mut rows = Vec::new();
        for (p, dir, ckpt) in &trained {
            let result = (|| -> CliResult<MetricReport> {
                let gen = generator_from(ckpt)?;
                let frozen = pinned.as_ref().expect("pinned after the first success");
                let point_tree = OutputTree::create(dir)?;
                let report = eval_run(
                    &gen,
                    &part.test,
                    frozen,
                    &cmap,
                    &point_tree,
                    p.cfg.train.batch_size,
                    p.cfg.ablation.head_dump_samples,
                )?;
                if gen.config().num_unets != p.heads {
                    return Err(Error::Data(format!(
                        "expected {} heads, generator has {}",
                        p.heads,
                        gen.config().num_unets
                    ))
                    .into());
                }
                Ok(report)
            })();
            match result {
                Ok(r) => rows.push((p.label.clone(), r)),
                Err(e) => {
                    log::warn!("{slug}: {} failed evaluation: {e}", p.label);
                    failures.push((p.label.clone(), e.to_string()));
                    first_err.get_or_insert(e);
                }
            }
        }
        completed += rows.len();
        let table = tree.reports().join(format!("table_{slug}.csv"));
        write_table(&table, &rows)?;
        let failures_path = tree.reports().join(format!("failures_{slug}.csv"));
        if failures.is_empty() {
            let _ = std::fs::remove_file(&failures_path);
        } else {
            write_failures(&failures_path, &failures)?;
        }
        let metrics: [(&str, fn(&MetricReport) -> f64); 4] = [
            ("ssim", |r| r.ssim),
            ("lpips", |r| r.lpips),
            ("mse", |r| r.mse),
            ("psnr", |r| r.psnr_db),
        ];
        for (name, f) in metrics {
            let values: Vec<f64> = rows.iter().map(|(_, r)| f(r)).collect();
            bar_chart(&values, &tree.figures().join(format!("{slug}_{name}.png")))?;
        }
        log::info!("{slug}: {} rows in {}", rows.len(), table.display());
    }
    match (completed, first_err) {
        (0, Some(e)) => Err(e),
        _ => Ok(()),
    }
}
