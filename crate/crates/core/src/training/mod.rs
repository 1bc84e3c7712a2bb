//! The optimization loop: critics update first on replayed fakes, then the
//! generator side updates with the critics frozen. Every stochastic choice
//! derives from the run seed plus structural indices, so two runs with equal
//! configs produce equal logs and a resumed run continues bit-identically.

mod buffer;
mod checkpoint;
mod metrics;

pub use buffer::ImagePool;
pub use checkpoint::{finish_run_manifest, load_trainer, save_trainer, write_run_manifest};
pub use metrics::MetricsLog;

use crate::config::TrainConfig;
use crate::contrastive::{embed_patches, patch_nce_direction, similarity_loss, FeatureStack};
use crate::error::{Error, Result};
use crate::imagedata::UnpairedDataset;
use crate::networks::NetBundle;
use crate::objectives::{
    cycle_loss, gan_discriminator_loss, gan_generator_loss, identity_loss, mae,
    total_objective_tensor, LossReport, ObjectiveParts, ObjectiveWeights,
};
use autodiff::seed::derive_rng;
use autodiff::{Adam, Tensor, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use std::collections::HashSet;
use std::path::Path;

/// Piecewise learning rate: constant for the first half of training, then
/// linear to zero. Valid for epochs 0 through `epochs` inclusive.
pub fn lr_at_epoch(lr0: f64, epochs: usize, epoch: usize) -> Result<f64> {
    if epoch > epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} is outside the schedule (0..={epochs})"
        )));
    }
    let half = epochs / 2;
    if epoch <= half {
        Ok(lr0)
    } else {
        Ok(lr0 * (epochs - epoch) as f64 / half as f64)
    }
}

/// Drops aliases so each underlying parameter appears once, keeping first
/// occurrences in order.
pub(crate) fn unique_params(params: Vec<Var>) -> Vec<Var> {
    let mut seen = HashSet::new();
    params
        .into_iter()
        .filter(|p| seen.insert(p.storage_ptr()))
        .collect()
}

fn zero_scalar() -> Tensor {
    Tensor::constant(ArrayD::zeros(IxDyn(&[])))
}

/// Forward state for one sample, built once per step and shared by both
/// phases.
struct SampleCache {
    x: Tensor,
    y: Tensor,
    fake_y: Tensor,
    fake_x: Option<Tensor>,
}

pub struct Trainer {
    cfg: TrainConfig,
    nets: NetBundle,
    opt_g: Adam,
    opt_d: Adam,
    pool_x: ImagePool,
    pool_y: ImagePool,
    weights: ObjectiveWeights,
    /// Next epoch to run (0-based).
    epoch: usize,
    /// Optimization steps taken so far.
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Trainer {
        let nets = NetBundle::build(cfg);
        let opt_g = Adam::new(
            nets.generator_params(),
            cfg.lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            1e-8,
        );
        let opt_d = Adam::new(
            nets.discriminator_params(),
            cfg.lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            1e-8,
        );
        let pool_x = ImagePool::new(cfg.buffer_capacity, derive_rng(cfg.seed, "buffer", &[0]));
        let pool_y = ImagePool::new(cfg.buffer_capacity, derive_rng(cfg.seed, "buffer", &[1]));
        let weights = ObjectiveWeights::from_config(cfg);
        Trainer {
            cfg: cfg.clone(),
            nets,
            opt_g,
            opt_d,
            pool_x,
            pool_y,
            weights,
            epoch: 0,
            step: 0,
        }
    }

    pub fn nets(&self) -> &NetBundle {
        &self.nets
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Applies the scheduled rate for `epoch` to both optimizers.
    pub fn apply_lr(&mut self, epoch: usize) -> Result<f64> {
        let lr = lr_at_epoch(self.cfg.lr, self.cfg.epochs, epoch)?;
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
        Ok(lr)
    }

    fn to_tensor(img: &ndarray::Array3<f64>) -> Tensor {
        Tensor::constant(img.clone().insert_axis(Axis(0)).into_dyn())
    }

    fn forward_fakes(
        &self,
        batch: &[(ndarray::Array3<f64>, ndarray::Array3<f64>)],
    ) -> Vec<SampleCache> {
        batch
            .iter()
            .map(|(xa, ya)| {
                let x = Self::to_tensor(xa);
                let y = Self::to_tensor(ya);
                let fake_y = self.nets.gen_xy.forward(&x, false);
                let fake_x = self.nets.gen_yx.as_ref().map(|f| f.forward(&y, false));
                SampleCache {
                    x,
                    y,
                    fake_y,
                    fake_x,
                }
            })
            .collect()
    }

    /// Critic losses on real images and replayed fakes; accumulates critic
    /// gradients only (the fakes enter detached, through the pools).
    fn discriminator_phase(&mut self, caches: &[SampleCache]) -> (f64, f64) {
        let inv = 1.0 / caches.len() as f64;
        let variant = self.cfg.loss.gan_variant;
        let mut d_x_sum = 0.0;
        let mut d_y_sum = 0.0;
        for cache in caches {
            let replay_y = Tensor::constant(self.pool_y.query(cache.fake_y.to_array()));
            let real = self.nets.disc_y.forward(&cache.y, false);
            let fake = self.nets.disc_y.forward(&replay_y, false);
            let d_y = gan_discriminator_loss(variant, &real, &fake);
            d_y_sum += d_y.scalar();
            d_y.mul_scalar(inv).backward();

            if let (Some(disc_x), Some(fake_x)) = (&self.nets.disc_x, &cache.fake_x) {
                let replay_x = Tensor::constant(self.pool_x.query(fake_x.to_array()));
                let real = disc_x.forward(&cache.x, false);
                let fake = disc_x.forward(&replay_x, false);
                let d_x = gan_discriminator_loss(variant, &real, &fake);
                d_x_sum += d_x.scalar();
                d_x.mul_scalar(inv).backward();
            }
        }
        (d_x_sum * inv, d_y_sum * inv)
    }

    /// Contrastive stacks for one sample: keys from the real image through
    /// its own domain embedding, queries from the translation through the
    /// other domain's embedding at the same locations.
    fn nce_stacks(
        &self,
        cache: &SampleCache,
    ) -> Result<(
        FeatureStack,
        FeatureStack,
        Option<(FeatureStack, FeatureStack)>,
    )> {
        let s = self.cfg.nce.num_patches;
        let mut rng_x = derive_rng(self.cfg.seed, "patch", &[self.step, 0]);
        let key_x = embed_patches(
            &self.nets.gen_xy,
            &self.nets.head_x,
            &cache.x,
            s,
            None,
            Some(&mut rng_x),
        )?;
        // Without the reverse translator, the forward encoder doubles as the
        // query encoder for its own translations.
        let query_gen = self.nets.gen_yx.as_ref().unwrap_or(&self.nets.gen_xy);
        let query_x = embed_patches(
            query_gen,
            &self.nets.head_y,
            &cache.fake_y,
            s,
            Some(&key_x.locations),
            None,
        )?;
        let reverse = match (&self.nets.gen_yx, &cache.fake_x) {
            (Some(gen_yx), Some(fake_x)) => {
                let mut rng_y = derive_rng(self.cfg.seed, "patch", &[self.step, 1]);
                let key_y = embed_patches(
                    gen_yx,
                    &self.nets.head_y,
                    &cache.y,
                    s,
                    None,
                    Some(&mut rng_y),
                )?;
                let query_y = embed_patches(
                    &self.nets.gen_xy,
                    &self.nets.head_x,
                    fake_x,
                    s,
                    Some(&key_y.locations),
                    None,
                )?;
                Some((key_y, query_y))
            }
            _ => None,
        };
        Ok((key_x, query_x, reverse))
    }

    /// Generator-side objective; accumulates gradients for the translators,
    /// heads, and light networks with the critics frozen. Returns per-term
    /// batch means.
    fn generator_phase(&mut self, caches: &[SampleCache]) -> Result<(ObjectiveParts<f64>, f64)> {
        let inv = 1.0 / caches.len() as f64;
        let variant = self.cfg.loss.gan_variant;
        let tau = self.cfg.nce.temperature;
        let mut sums = ObjectiveParts {
            gan_g: 0.0,
            gan_f: 0.0,
            nce_x: 0.0,
            nce_y: 0.0,
            idt: 0.0,
            sim: self.weights.sim.map(|_| 0.0),
            cycle: self.weights.cycle.map(|_| 0.0),
        };
        let mut total_sum = 0.0;
        for cache in caches {
            let gan_g = gan_generator_loss(variant, &self.nets.disc_y.forward(&cache.fake_y, true));
            let gan_f = match (&self.nets.disc_x, &cache.fake_x) {
                (Some(d), Some(fx)) => gan_generator_loss(variant, &d.forward(fx, true)),
                _ => zero_scalar(),
            };

            let (key_x, query_x, reverse) = self.nce_stacks(cache)?;
            let external = self.cfg.nce.external_negatives;
            let ext_for_x = if external {
                Some(
                    &reverse
                        .as_ref()
                        .expect("validated: external needs both directions")
                        .1,
                )
            } else {
                None
            };
            let nce_x = patch_nce_direction(&key_x, &query_x, ext_for_x, tau)?.loss;
            let nce_y = match &reverse {
                Some((key_y, query_y)) => {
                    let ext_for_y = external.then_some(&query_x);
                    patch_nce_direction(key_y, query_y, ext_for_y, tau)?.loss
                }
                None => zero_scalar(),
            };

            let idt_g = self.nets.gen_xy.forward(&cache.y, false);
            let idt = match &self.nets.gen_yx {
                Some(f) => identity_loss(&f.forward(&cache.x, false), &cache.x, &idt_g, &cache.y),
                None => mae(&idt_g, &cache.y),
            };

            let sim = match (&self.nets.light, &reverse) {
                (Some(light), Some((key_y, query_y))) => {
                    Some(similarity_loss(light, &key_x, query_y, key_y, &query_x))
                }
                (Some(_), None) => {
                    return Err(Error::Config(
                        "similarity loss needs both directions".to_string(),
                    ))
                }
                _ => None,
            };

            let cycle = match (
                self.weights.cycle.is_some(),
                &self.nets.gen_yx,
                &cache.fake_x,
            ) {
                (true, Some(f), Some(fx)) => {
                    let back_x = f.forward(&cache.fake_y, false);
                    let back_y = self.nets.gen_xy.forward(fx, false);
                    Some(cycle_loss(&back_x, &cache.x, &back_y, &cache.y))
                }
                _ => None,
            };

            let parts = ObjectiveParts {
                gan_g,
                gan_f,
                nce_x,
                nce_y,
                idt,
                sim,
                cycle,
            };
            let total = total_objective_tensor(&self.weights, &parts)?;
            total_sum += total.scalar();
            sums.gan_g += parts.gan_g.scalar();
            sums.gan_f += parts.gan_f.scalar();
            sums.nce_x += parts.nce_x.scalar();
            sums.nce_y += parts.nce_y.scalar();
            sums.idt += parts.idt.scalar();
            if let (Some(acc), Some(t)) = (sums.sim.as_mut(), &parts.sim) {
                *acc += t.scalar();
            }
            if let (Some(acc), Some(t)) = (sums.cycle.as_mut(), &parts.cycle) {
                *acc += t.scalar();
            }
            total.mul_scalar(inv).backward();
        }
        sums.gan_g *= inv;
        sums.gan_f *= inv;
        sums.nce_x *= inv;
        sums.nce_y *= inv;
        sums.idt *= inv;
        if let Some(v) = sums.sim.as_mut() {
            *v *= inv;
        }
        if let Some(v) = sums.cycle.as_mut() {
            *v *= inv;
        }
        Ok((sums, total_sum * inv))
    }

    /// One optimization step over a batch: critic update on replayed fakes,
    /// then the generator-side update with critics frozen. Gradients
    /// accumulate per sample scaled by 1/B, so any batch size computes the
    /// exact mean-loss gradient.
    pub fn train_step(
        &mut self,
        batch: &[(ndarray::Array3<f64>, ndarray::Array3<f64>)],
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".to_string()));
        }
        let caches = self.forward_fakes(batch);

        self.opt_d.zero_grads();
        let (d_x, d_y) = self.discriminator_phase(&caches);
        for (name, v) in [("d_X", d_x), ("d_Y", d_y)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss term {name} is not finite ({v}); aborting"
                )));
            }
        }
        self.opt_d.step();

        self.opt_g.zero_grads();
        let (parts, total_g) = self.generator_phase(&caches)?;
        let report = LossReport {
            gan_g: parts.gan_g,
            gan_f: parts.gan_f,
            d_x,
            d_y,
            nce_x: parts.nce_x,
            nce_y: parts.nce_y,
            idt: parts.idt,
            sim: parts.sim,
            cycle: parts.cycle,
            total_g,
        };
        report.check_finite()?;
        self.opt_g.step();
        self.step += 1;
        Ok(report)
    }

    /// Translates one [3, H, W] image with the forward translator.
    pub fn translate(&self, img: &ndarray::Array3<f64>) -> ndarray::Array3<f64> {
        self.nets.gen_xy.translate(img)
    }

    pub fn pools(&self) -> (&ImagePool, &ImagePool) {
        (&self.pool_x, &self.pool_y)
    }
}

/// Runs (or resumes) the full training loop in `run_dir`: writes the config
/// snapshot and manifest, streams the loss log, and checkpoints on the
/// configured cadence plus a rolling `latest`.
pub fn run_training(cfg: &TrainConfig, run_dir: &Path, resume: bool) -> Result<()> {
    let (dir_x, dir_y) = cfg.train_dirs()?;
    let dataset = UnpairedDataset::open(
        &dir_x,
        &dir_y,
        cfg.seed,
        cfg.data.load_size as usize,
        cfg.data.crop_size as usize,
        cfg.data.flip,
    )?;
    let checkpoints = run_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoints).map_err(|e| Error::io(&checkpoints, e))?;
    checkpoint::write_run_manifest(run_dir, cfg)?;

    let mut trainer = if resume {
        let latest = checkpoints.join("latest");
        if !latest.exists() {
            return Err(Error::Data(format!(
                "nothing to resume: {} has no checkpoint",
                latest.display()
            )));
        }
        checkpoint::load_trainer(cfg, &latest)?
    } else {
        Trainer::new(cfg)
    };

    let epoch_len = dataset.epoch_len();
    let batch = cfg.batch_size;
    let mut log: Option<MetricsLog> = None;
    for epoch in trainer.epoch()..cfg.epochs {
        let lr = trainer.apply_lr(epoch)?;
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        let mut start = 0;
        while start < epoch_len {
            let end = (start + batch).min(epoch_len);
            let mut samples = Vec::with_capacity(end - start);
            for idx in start..end {
                samples.push(dataset.sample(epoch, idx)?);
            }
            let step = trainer.step_count();
            let report = trainer.train_step(&samples)?;
            let log = match log.as_mut() {
                Some(l) => l,
                None => {
                    log = Some(MetricsLog::open(&run_dir.join("metrics.tsv"), &report)?);
                    log.as_mut().unwrap()
                }
            };
            log.append(step, epoch, lr, &report)?;
            epoch_total += report.total_g;
            epoch_steps += 1;
            start = end;
        }
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        trainer.epoch = epoch + 1;
        let completed = epoch + 1;
        checkpoint::save_trainer(&trainer, &checkpoints.join("latest"))?;
        if completed % cfg.checkpoint_every == 0 {
            checkpoint::save_trainer(&trainer, &checkpoints.join(format!("epoch_{completed}")))?;
        }
        println!(
            "epoch {epoch}: {epoch_steps} steps, lr {lr}, mean total_G {:.6}",
            epoch_total / epoch_steps.max(1) as f64
        );
    }
    checkpoint::finish_run_manifest(run_dir)?;
    Ok(())
}
