//! Alternating discriminator/generator optimization with a step-decayed
//! learning rate and progressive stack growth.
//!
//! Data order and dropout masks are pure functions of `(seed, stage, epoch)` and
//! `(seed, global step)`, so a run resumed from an epoch-boundary checkpoint
//! continues the original trajectory exactly.

pub mod adam;
pub mod checkpoint;
pub mod schedule;

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_tensors, SamplePair, Split};
use crate::discriminator::{build_discriminator, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{build_generator, grow_stack, Generator, GeneratorConfig};
use crate::losses::{
    discriminator_total, generator_total, lsgan_d_loss, lsgan_g_loss, perceptual_loss, pixel_loss,
    GeneratorParts, LossBreakdown, LossWeights, PixelNorm,
};
use crate::nn::layers::{scalar, Mode};
use crate::nn::params::named_rng;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use schedule::{lr_at, AdamConfig, DecayUnit, TrainConfig};

pub const LOSS_CSV_HEADER: &str = "stage,epoch,step,adv,pix,per,total,loss_d";
const RECENT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub generator: LossBreakdown,
    pub discriminator: f64,
}

/// One discriminator update followed by one generator update on the same batch.
/// The generator step scores its output with the already-updated discriminator.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    gen: &Generator,
    disc: &Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    w: &LossWeights,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let out = gen.forward(x, &mut Mode::Train(rng))?;
    let fake = &out.final_output;

    let fake_d = fake.detach();
    let (p_real, taps_real) = disc.forward(x, y, true)?;
    let (p_fake, taps_fake) = disc.forward(x, &fake_d, true)?;
    let adv_d = lsgan_d_loss(&p_real, &p_fake, w.lsgan_targets)?;
    let per_d = perceptual_loss(&taps_real, &taps_fake, &w.lambda_per_tap)?;
    let total_d = discriminator_total(&adv_d, &per_d, w.d_perceptual_weight, w.d_perceptual_sign)?;
    let loss_d = scalar(&total_d)?;
    if !loss_d.is_finite() {
        return Err(Error::Divergence {
            term: "discriminator".into(),
            recent: Vec::new(),
        });
    }
    let grads = total_d.backward()?;
    opt_d.step(disc.store().params(), &grads, lr)?;

    let (p_fake, taps_fake) = disc.forward(x, fake, true)?;
    let taps_real = disc.taps(x, y, true)?.detach();
    let parts = GeneratorParts {
        adversarial: lsgan_g_loss(&p_fake, w.lsgan_targets)?,
        pixel: pixel_loss(fake, y, w.pixel_norm)?,
        perceptual: perceptual_loss(&taps_real, &taps_fake, &w.lambda_per_tap)?,
    };
    let (total_g, breakdown) = generator_total(&parts, w)?;
    let grads = total_g.backward()?;
    opt_g.step(gen.store().params(), &grads, lr)?;
    Ok(StepLosses {
        generator: breakdown,
        discriminator: loss_d,
    })
}

/// Seeded permutation of `0..n` for one epoch of one stage.
pub fn epoch_order(n: usize, seed: u64, stage_index: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut named_rng(seed, &format!("order.stage{stage_index}.epoch{epoch}")));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub losses: StepLosses,
}

impl LossRow {
    pub fn csv_line(&self) -> String {
        let g = &self.losses.generator;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.stage, self.epoch, self.step, g.adversarial, g.pixel, g.perceptual, g.total, self.losses.discriminator
        )
    }
}

/// Which sample a non-training pass read, and from which split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub id: String,
    pub split: Option<Split>,
}

pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    gen: Generator,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    stage_index: usize,
    epoch: usize,
    global_step: u64,
    seed: u64,
    recent: VecDeque<LossBreakdown>,
    out: Option<PathBuf>,
    history: Vec<LossRow>,
    val_history: Vec<(usize, usize, f64)>,
    eval_access: Vec<AccessRecord>,
    stage_checkpoints: Vec<PathBuf>,
}

impl Trainer {
    /// Fresh run at the first stage. `gen_cfg.num_unets` is replaced by the stage size.
    pub fn new(
        gen_cfg: &GeneratorConfig,
        disc_cfg: &DiscriminatorConfig,
        cfg: &TrainConfig,
        weights: &LossWeights,
    ) -> Result<Self> {
        cfg.validate()?;
        if disc_cfg.image_size != gen_cfg.image_size {
            return Err(Error::Config(format!(
                "generator image size {} differs from discriminator image size {}",
                gen_cfg.image_size, disc_cfg.image_size
            )));
        }
        if weights.lambda_per_tap.len() != disc_cfg.tap_indices.len() {
            return Err(Error::Config(format!(
                "{} perceptual weights for {} discriminator taps",
                weights.lambda_per_tap.len(),
                disc_cfg.tap_indices.len()
            )));
        }
        let seed = if cfg.deterministic {
            cfg.seed
        } else {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or_default();
            cfg.seed ^ nanos
        };
        let mut g = gen_cfg.clone();
        g.num_unets = cfg.stages[0];
        Ok(Self {
            gen: build_generator(&g, seed, DType::F32)?,
            disc: build_discriminator(disc_cfg, seed, DType::F32)?,
            opt_g: Adam::new(cfg.adam),
            opt_d: Adam::new(cfg.adam),
            cfg: cfg.clone(),
            weights: weights.clone(),
            stage_index: 0,
            epoch: 0,
            global_step: 0,
            seed,
            recent: VecDeque::new(),
            out: None,
            history: Vec::new(),
            val_history: Vec::new(),
            eval_access: Vec::new(),
            stage_checkpoints: Vec::new(),
        })
    }

    /// Restores a run from a checkpoint. The stage list and seed must match;
    /// a different batch size is allowed but starts a new trajectory.
    pub fn resume(ckpt: &Checkpoint, cfg: &TrainConfig, weights: &LossWeights) -> Result<Self> {
        cfg.validate()?;
        let meta = &ckpt.meta;
        let mut mismatched = Vec::new();
        if cfg.stages != meta.train.stages {
            mismatched.push(format!("stages ({:?} vs {:?})", cfg.stages, meta.train.stages));
        }
        if cfg.seed != meta.train.seed {
            mismatched.push(format!("seed ({} vs {})", cfg.seed, meta.train.seed));
        }
        if !mismatched.is_empty() {
            return Err(Error::CheckpointMismatch { mismatched });
        }
        if cfg.batch_size != meta.train.batch_size {
            log::warn!(
                "resuming with batch size {} instead of {}; the loss trajectory will differ from the original run",
                cfg.batch_size,
                meta.train.batch_size
            );
        }
        let mut g = meta.generator.clone();
        g.num_unets = meta.stage;
        let gen = build_generator(&g, meta.seed, DType::F32)?;
        gen.store().load_tensors(&ckpt.generator)?;
        let disc = build_discriminator(&meta.discriminator, meta.seed, DType::F32)?;
        disc.store().load_tensors(&ckpt.discriminator)?;
        let split = |p: &str| -> BTreeMap<String, Tensor> {
            ckpt.optimizer
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(p).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        Ok(Self {
            gen,
            disc,
            opt_g: Adam::load_state(cfg.adam, meta.adam_g_step, &split("g."))?,
            opt_d: Adam::load_state(cfg.adam, meta.adam_d_step, &split("d."))?,
            cfg: cfg.clone(),
            weights: weights.clone(),
            stage_index: meta.stage_index,
            epoch: meta.epoch,
            global_step: meta.global_step,
            seed: meta.seed,
            recent: VecDeque::new(),
            out: None,
            history: Vec::new(),
            val_history: Vec::new(),
            eval_access: Vec::new(),
            stage_checkpoints: Vec::new(),
        })
    }

    /// Directs checkpoints to `root/checkpoints/` and logs to `root/logs/`.
    /// A fresh run truncates the loss log; a resumed one appends.
    pub fn with_output(mut self, root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let log = root.join("logs").join("losses.csv");
        if self.global_step == 0 || !log.exists() {
            std::fs::write(&log, format!("{LOSS_CSV_HEADER}\n")).map_err(|e| Error::io(&log, e))?;
        }
        self.out = Some(root.to_path_buf());
        Ok(self)
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[LossRow] {
        &self.history
    }

    pub fn val_history(&self) -> &[(usize, usize, f64)] {
        &self.val_history
    }

    /// Samples read by validation passes.
    pub fn eval_access_log(&self) -> &[AccessRecord] {
        &self.eval_access
    }

    pub fn stage_checkpoints(&self) -> &[PathBuf] {
        &self.stage_checkpoints
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn stage(&self) -> usize {
        self.cfg.stages[self.stage_index]
    }

    fn lr(&self) -> f64 {
        let t = match self.cfg.decay_unit {
            DecayUnit::Epoch => self.epoch,
            DecayUnit::Step => self.global_step as usize,
        };
        lr_at(t, &self.cfg)
    }

    /// Runs one training step on an explicit batch; used by `fit` and by
    /// callers that want their own stopping rule.
    pub fn step(&mut self, batch: &[&SamplePair]) -> Result<StepLosses> {
        let (x, y) = batch_tensors(batch, DType::F32)?;
        let lr = self.lr();
        let mut rng = named_rng(self.seed, &format!("dropout.step{}", self.global_step));
        let losses = match train_step(
            &self.gen,
            &self.disc,
            &mut self.opt_g,
            &mut self.opt_d,
            &x,
            &y,
            &self.weights,
            lr,
            &mut rng,
        ) {
            Ok(l) => l,
            Err(Error::Divergence { term, .. }) => {
                return Err(Error::Divergence {
                    term,
                    recent: self.recent.iter().copied().collect(),
                })
            }
            Err(e) => return Err(e),
        };
        if self.recent.len() == RECENT {
            self.recent.pop_front();
        }
        self.recent.push_back(losses.generator);
        let row = LossRow {
            stage: self.stage(),
            epoch: self.epoch,
            step: self.global_step,
            losses,
        };
        if let Some(root) = &self.out {
            append_line(&root.join("logs").join("losses.csv"), &row.csv_line())?;
        }
        self.history.push(row);
        self.global_step += 1;
        Ok(losses)
    }

    fn run_epoch(&mut self, train: &[SamplePair]) -> Result<()> {
        let order = epoch_order(train.len(), self.seed, self.stage_index, self.epoch);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            self.step(&batch)?;
        }
        Ok(())
    }

    /// Mean pixel L2 of the eval-mode generator over `val`; every sample read is
    /// recorded in the access log.
    pub fn validate(&mut self, val: &[SamplePair]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in val.chunks(self.cfg.batch_size) {
            let refs: Vec<&SamplePair> = chunk.iter().collect();
            for p in &refs {
                self.eval_access.push(AccessRecord {
                    id: p.id.clone(),
                    split: p.split,
                });
            }
            let (x, y) = batch_tensors(&refs, DType::F32)?;
            let out = self.gen.forward(&x, &mut Mode::Eval)?;
            total += scalar(&pixel_loss(&out.final_output, &y, PixelNorm::L2)?)? * refs.len() as f64;
        }
        let mean = total / val.len().max(1) as f64;
        self.val_history.push((self.stage(), self.epoch, mean));
        if let Some(root) = &self.out {
            let path = root.join("logs").join("val.csv");
            if !path.exists() {
                append_line(&path, "stage,epoch,val_pixel_l2")?;
            }
            append_line(&path, &format!("{},{},{}", self.stage(), self.epoch, mean))?;
        }
        Ok(mean)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let generator = self.gen.store().to_tensors();
        let discriminator = self.disc.store().to_tensors();
        let mut optimizer = BTreeMap::new();
        for (k, t) in self.opt_g.state() {
            optimizer.insert(format!("g.{k}"), t);
        }
        for (k, t) in self.opt_d.state() {
            optimizer.insert(format!("d.{k}"), t);
        }
        let mut train = self.cfg.clone();
        train.seed = self.seed;
        Ok(Checkpoint {
            meta: CheckpointMeta {
                generator: self.gen.config().clone(),
                discriminator: self.disc.config().clone(),
                train,
                losses: self.weights.clone(),
                seed: self.seed,
                stage_index: self.stage_index,
                stage: self.stage(),
                epoch: self.epoch,
                global_step: self.global_step,
                adam_g_step: self.opt_g.step_count(),
                adam_d_step: self.opt_d.step_count(),
                parameter_count: self.gen.parameter_count(),
                generator_digest: crate::nn::params::tensors_digest(&generator)?,
                discriminator_digest: crate::nn::params::tensors_digest(&discriminator)?,
            },
            generator,
            discriminator,
            optimizer,
        })
    }

    fn save_to(&self, name: &str) -> Result<Option<PathBuf>> {
        let Some(root) = &self.out else {
            return Ok(None);
        };
        let dir = root.join("checkpoints").join(name);
        self.to_checkpoint()?.save(&dir)?;
        Ok(Some(dir))
    }

    /// Grows the generator to the current stage's stack size. The generator's
    /// optimizer state restarts; the discriminator and its optimizer carry on.
    fn enter_stage(&mut self) -> Result<()> {
        let target = self.stage();
        let mut grown = false;
        while self.gen.config().num_unets < target {
            let tensors = self.gen.store().to_tensors();
            self.gen = grow_stack(&self.gen, &tensors, &self.gen.config().clone())?;
            grown = true;
        }
        if grown {
            self.opt_g = Adam::new(self.cfg.adam);
        }
        Ok(())
    }

    /// Trains every remaining stage on `train`, validating on `val`, and returns
    /// the final checkpoint. One checkpoint per stage is written under
    /// `checkpoints/stage{k}` when an output directory is set.
    pub fn fit(&mut self, train: &[SamplePair], val: &[SamplePair]) -> Result<Checkpoint> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if let Some(p) = train.iter().find(|p| p.split.is_some_and(|s| s != Split::Train)) {
            return Err(Error::Data(format!("sample {} is not from the training split", p.id)));
        }
        let budgets = self.cfg.stage_budgets();
        while self.stage_index < self.cfg.stages.len() {
            self.enter_stage()?;
            let budget = budgets[self.stage_index];
            while self.epoch < budget {
                self.run_epoch(train)?;
                self.epoch += 1;
                if self.cfg.val_every > 0 && self.epoch % self.cfg.val_every == 0 && !val.is_empty() {
                    let v = self.validate(val)?;
                    log::info!("stage {} epoch {}: val pixel L2 {v:.5}", self.stage(), self.epoch);
                }
                if self.cfg.checkpoint_every > 0 && self.epoch % self.cfg.checkpoint_every == 0 {
                    self.save_to("latest")?;
                }
            }
            if let Some(dir) = self.save_to(&format!("stage{}", self.stage()))? {
                self.stage_checkpoints.push(dir);
            }
            self.save_to("latest")?;
            if self.stage_index + 1 == self.cfg.stages.len() {
                break;
            }
            self.stage_index += 1;
            self.epoch = 0;
        }
        self.to_checkpoint()
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preprocess, synth_generate};
    use crate::discriminator::DiscriminatorMode;
    use crate::generator::HeadAggregation;

    pub(crate) fn tiny() -> (GeneratorConfig, DiscriminatorConfig) {
        (
            GeneratorConfig {
                num_unets: 1,
                unet_depth: 2,
                base_channels: 4,
                dropout_rate: 0.5,
                deep_supervision: true,
                head_aggregation: HeadAggregation::Mean,
                image_size: 16,
            },
            DiscriminatorConfig {
                mode: DiscriminatorMode::Image,
                base_channels: 4,
                max_channels: 8,
                image_size: 16,
                ..Default::default()
            },
        )
    }

    fn pairs(n: usize) -> Vec<SamplePair> {
        synth_generate(n, 3, (16, 16))
            .unwrap()
            .iter()
            .map(|p| preprocess(p, 16, None).unwrap())
            .collect()
    }

    #[test]
    fn zero_weights_leave_generator_unchanged() {
        let (g, d) = tiny();
        let w = LossWeights {
            alpha_perceptual: 0.0,
            alpha_pixel: 0.0,
            alpha_adv: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(&g, &d, &TrainConfig::default(), &w).unwrap();
        let before = t.generator().store().digest().unwrap();
        let data = pairs(2);
        let params_before: BTreeMap<String, Tensor> = t
            .generator()
            .store()
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().unwrap()))
            .collect();
        t.step(&data.iter().collect::<Vec<_>>()).unwrap();
        for (k, v) in t.generator().store().params() {
            let diff = (v.as_tensor() - &params_before[k]).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0, "{k}");
        }
        // Buffers (normalization statistics) still move in train mode.
        assert_ne!(before, t.generator().store().digest().unwrap());
    }

    #[test]
    fn default_step_is_finite_and_positive() {
        let (g, d) = tiny();
        let mut t = Trainer::new(&g, &d, &TrainConfig::default(), &LossWeights::default()).unwrap();
        let data = pairs(2);
        let l = t.step(&data.iter().collect::<Vec<_>>()).unwrap();
        assert!(l.generator.total.is_finite() && l.generator.total > 0.0);
        assert!(l.discriminator.is_finite());
    }

    #[test]
    fn order_depends_on_epoch_and_seed_only() {
        assert_eq!(epoch_order(10, 1, 0, 3), epoch_order(10, 1, 0, 3));
        assert_ne!(epoch_order(10, 1, 0, 3), epoch_order(10, 1, 0, 4));
        let mut o = epoch_order(10, 1, 2, 0);
        o.sort();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stages_grow_and_checkpoint() {
        let (g, d) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            val_every: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut data = pairs(4);
        for p in &mut data[..3] {
            p.split = Some(Split::Train);
        }
        data[3].split = Some(Split::Val);
        let mut t = Trainer::new(&g, &d, &cfg, &LossWeights::default())
            .unwrap()
            .with_output(dir.path())
            .unwrap();
        let ck = t.fit(&data[..3], &data[3..]).unwrap();
        assert_eq!(ck.meta.stage, 3);
        assert_eq!(t.stage_checkpoints().len(), 3);
        let counts: Vec<usize> = t
            .stage_checkpoints()
            .iter()
            .map(|p| Checkpoint::load(p).unwrap().meta.parameter_count)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        assert!(t.eval_access_log().iter().all(|r| r.split == Some(Split::Val)));
        let log = std::fs::read_to_string(dir.path().join("logs/losses.csv")).unwrap();
        assert_eq!(log.lines().next(), Some(LOSS_CSV_HEADER));
        assert_eq!(log.lines().count(), 1 + 3 * 2);
    }

    #[test]
    fn resume_rejects_changed_stages() {
        let (g, d) = tiny();
        let t = Trainer::new(&g, &d, &TrainConfig::default(), &LossWeights::default()).unwrap();
        let ck = t.to_checkpoint().unwrap();
        let cfg = TrainConfig {
            stages: vec![1, 3],
            ..Default::default()
        };
        assert!(matches!(
            Trainer::resume(&ck, &cfg, &LossWeights::default()),
            Err(Error::CheckpointMismatch { .. })
        ));
    }
}
