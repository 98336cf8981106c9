use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::log::{EpochRow, SigmaRow, StepRow, TrainLog};
use crate::arch::Network;
use crate::data::{augment, degrade, denormalize, record_rng, split, ImageRecord};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, combined_generator_loss, PerceptualExtractor};
use crate::metrics::{psnr_values, ssim, Psnr, SsimMode};
use crate::nn::Binder;
use crate::optim::{clip_global_norm, AdamState};
use crate::tensor::{Tape, Tensor};

/// Salt for the latent vectors used in evaluation and reconstruction.
const EVAL_SALT: u64 = u64::MAX;
const EPOCH_ID: &str = "epoch-order";

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub gen: Network,
    pub disc: Network,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    pub extractor: PerceptualExtractor,
    /// Source of training latents.
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already done in the current epoch.
    pub batch_in_epoch: u64,
    /// Mean generator loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub best_ssim: f64,
    pub best_epoch: u64,
    /// Step of the most recent checkpoint written or loaded.
    pub last_saved: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opts = config.arch_options();
        let gspec = config.preset.generator(config.scale, &opts)?;
        let dspec = config.preset.discriminator(config.scale, &opts)?;
        let gen = Network::build(gspec, &mut record_rng(config.seed, "generator", 0), config.sn_warmup)?;
        let disc = Network::build(dspec, &mut record_rng(config.seed, "discriminator", 0), config.sn_warmup)?;
        let adam = |lr| AdamState::with_betas(lr, config.beta1, config.beta2, config.adam_eps);
        let (gen_opt, disc_opt) = (adam(config.gen_lr), adam(config.disc_lr));
        gen_opt.validate()?;
        disc_opt.validate()?;
        Ok(TrainState {
            extractor: PerceptualExtractor::new(config.perceptual_seed),
            rng: record_rng(config.seed, "latent", 0),
            gen,
            disc,
            gen_opt,
            disc_opt,
            config,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            epoch_losses: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            best_ssim: f64::NEG_INFINITY,
            best_epoch: 0,
            last_saved: 0,
        })
    }

    fn non_finite(&self, what: &'static str) -> Error {
        Error::NonFinite {
            what,
            step: self.step + 1,
            last_good: self.last_saved,
        }
    }
}

/// One training batch: targets, generator guides and optional labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub hr: Tensor,
    pub guide: Tensor,
    pub labels: Option<Vec<f64>>,
}

/// Augments (seeded by record and step), then degrades each record.
pub fn make_batch(config: &TrainConfig, records: &[&ImageRecord], step: u64) -> Result<Batch> {
    let mut hr = Vec::with_capacity(records.len());
    let mut guide = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let img = if config.augment.is_identity() {
            r.pixels.clone()
        } else {
            augment(r, &config.augment, &mut record_rng(config.seed, &r.id, step))?.pixels
        };
        guide.push(degrade(&img, config.degrade_factor)?);
        hr.push(img);
        if config.preset.conditional() {
            let l = r
                .label
                .ok_or_else(|| Error::Config(format!("{} needs a label for {}", config.preset, r.id)))?;
            labels.push(l.value());
        }
    }
    Ok(Batch {
        hr: stack_images(&hr)?,
        guide: stack_images(&guide)?,
        labels: config.preset.conditional().then_some(labels),
    })
}

/// Values logged for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_disc: f64,
    pub adv: f64,
    pub pix: f64,
    pub perc: f64,
    /// Largest σ of the normalized weights the discriminator applied, when
    /// measured on this step.
    pub disc_sigma: Option<f64>,
}

/// `(1, H, W)` images to one `(N, 1, H, W)` batch.
fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for t in images {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.dim(0);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}

fn clip(net: &mut Network, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut [f64]> = net.params_mut().into_iter().map(|t| t.grad_mut()).collect();
    clip_global_norm(&mut grads, max_norm)
}

/// Discriminator update(s) on real versus detached fakes, then one
/// generator update through a fresh discriminator pass.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepOutcome> {
    let n = batch.hr.dim(0);
    let latent = state.config.latent_dim;
    let clip_norm = state.config.clip_norm;
    let cond = batch.labels.as_deref();
    let guide = state.gen.spec.guided().then_some(&batch.guide);

    let interval = state.config.sigma_interval;
    let measure = interval > 0 && (state.step + 1) % interval == 0;
    let mut disc_sigma = None;
    let mut disc_loss = 0.0;
    let mut grad_norm_disc = 0.0;
    for _ in 0..state.config.disc_steps {
        if state.disc.spectral_normalized() {
            state.disc.spectral_step(state.config.sn_iters);
            if measure {
                if let Some(s) = max_sigma(&state.disc) {
                    disc_sigma = Some(disc_sigma.map_or(s, |d: f64| d.max(s)));
                }
            }
        }
        let z = Tensor::randn(&[n, latent], 1.0, &mut state.rng);
        let fake = state.gen.generate_tensor(&z, cond, guide)?;
        let both = concat_batch(&batch.hr, &fake)?;
        let cond2: Option<Vec<f64>> = cond.map(|c| c.iter().chain(c).copied().collect());
        let targets: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(both);
        let mut binder = Binder::new(true);
        let p = state.disc.discriminate(&mut tape, x, cond2.as_deref(), &mut binder)?;
        let loss = bce_loss(&mut tape, p, &targets)?;
        disc_loss = tape.value(loss).data()[0];
        tape.backward(loss)?;
        state.disc.zero_grad();
        state.disc.accumulate_grads(&tape, &binder);
        grad_norm_disc = clip(&mut state.disc, clip_norm);
        if !disc_loss.is_finite() || !grad_norm_disc.is_finite() {
            return Err(state.non_finite("discriminator loss"));
        }
        state.disc_opt.step(&mut state.disc.params_mut())?;
    }

    let z = Tensor::randn(&[n, latent], 1.0, &mut state.rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let gv = guide.map(|g| tape.constant(g.clone()));
    let mut binder = Binder::new(true);
    let fake = state.gen.generate(&mut tape, zv, cond, gv, &mut binder)?;
    let p = state.disc.discriminate(&mut tape, fake, cond, &mut Binder::new(false))?;
    let target = tape.constant(batch.hr.clone());
    let gl = combined_generator_loss(&mut tape, p, fake, target, &state.config.weights, &state.extractor)?;
    let gen_loss = tape.value(gl.total).data()[0];
    tape.backward(gl.total)?;
    state.gen.zero_grad();
    state.gen.accumulate_grads(&tape, &binder);
    let grad_norm_gen = clip(&mut state.gen, clip_norm);
    if !gen_loss.is_finite() || !grad_norm_gen.is_finite() {
        return Err(state.non_finite("generator loss"));
    }
    state.gen_opt.step(&mut state.gen.params_mut())?;
    state.step += 1;
    Ok(StepOutcome {
        gen_loss,
        disc_loss,
        grad_norm_gen,
        grad_norm_disc,
        adv: gl.adv,
        pix: gl.pix,
        perc: gl.perc,
        disc_sigma,
    })
}

/// True once each of the last `patience` epoch-to-epoch relative changes
/// `|L_t − L_{t−1}| / max(|L_{t−1}|, 1e-12)` is below `eps_rel`.
pub fn early_stop_check(losses: &[f64], patience: usize, eps_rel: f64) -> bool {
    patience > 0
        && losses.len() > patience
        && losses[losses.len() - patience - 1..]
            .windows(2)
            .all(|w| (w[1] - w[0]).abs() / w[0].abs().max(1e-12) < eps_rel)
}

/// Training-epoch order of `n` items.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut record_rng(seed, EPOCH_ID, epoch));
    idx
}

fn to_8bit(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| denormalize(x) as f64).collect()
}

fn db(p: Psnr) -> f64 {
    match p {
        Psnr::Finite(v) => v,
        Psnr::Infinite => f64::INFINITY,
    }
}

/// Per-image quality of the generator and of its degraded inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub degraded_psnr: f64,
    pub degraded_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub images: Vec<ImageScore>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub degraded_psnr_mean: f64,
    pub degraded_ssim_mean: f64,
}

fn latent_for(config: &TrainConfig, id: &str) -> Tensor {
    Tensor::randn(&[1, config.latent_dim], 1.0, &mut record_rng(config.seed, id, EVAL_SALT))
}

/// Generator outputs for `guides` (each `(1, H, W)`), in batches.
pub fn generate_for(
    gen: &Network,
    config: &TrainConfig,
    ids: &[String],
    guides: &[Tensor],
    labels: Option<&[f64]>,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(guides.len());
    let bs = config.batch_size.max(1);
    for start in (0..guides.len()).step_by(bs) {
        let end = (start + bs).min(guides.len());
        let z: Vec<Tensor> = ids[start..end].iter().map(|id| latent_for(config, id)).collect();
        let z = Tensor::stack(&z)?;
        let g = stack_images(&guides[start..end])?;
        let guide = gen.spec.guided().then_some(&g);
        let y = gen.generate_tensor(&z, labels.map(|l| &l[start..end]), guide)?;
        for i in 0..end - start {
            let item = y.batch_item(i)?;
            let s = item.shape()[1..].to_vec();
            out.push(item.reshape(&s)?);
        }
    }
    Ok(out)
}

/// Scores the generator on `records` with 8-bit PSNR and SSIM.
pub fn evaluate(gen: &Network, config: &TrainConfig, records: &[ImageRecord], mode: SsimMode) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let guides = records
        .iter()
        .map(|r| degrade(&r.pixels, config.degrade_factor))
        .collect::<Result<Vec<_>>>()?;
    let labels: Option<Vec<f64>> = if config.preset.conditional() {
        Some(
            records
                .iter()
                .map(|r| r.label.map(|l| l.value()).ok_or_else(|| Error::Config(format!("no label for {}", r.id))))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let outs = generate_for(gen, config, &ids, &guides, labels.as_deref())?;
    let mut images = Vec::with_capacity(records.len());
    for ((r, g), y) in records.iter().zip(&guides).zip(&outs) {
        let reference = to_8bit(&r.pixels);
        let shape = r.pixels.shape();
        let as_t = |v: Vec<f64>| Tensor::new(shape, v);
        let (rt, yt, gt) = (as_t(reference.clone())?, as_t(to_8bit(y))?, as_t(to_8bit(g))?);
        images.push(ImageScore {
            id: r.id.clone(),
            psnr: db(psnr_values(rt.data(), yt.data(), 255.0)?),
            ssim: ssim(&rt, &yt, 255.0, mode)?,
            degraded_psnr: db(psnr_values(rt.data(), gt.data(), 255.0)?),
            degraded_ssim: ssim(&rt, &gt, 255.0, mode)?,
        });
    }
    let mean = |f: fn(&ImageScore) -> f64| images.iter().map(f).sum::<f64>() / images.len() as f64;
    Ok(EvalSummary {
        psnr_mean: mean(|s| s.psnr),
        ssim_mean: mean(|s| s.ssim),
        degraded_psnr_mean: mean(|s| s.degraded_psnr),
        degraded_ssim_mean: mean(|s| s.degraded_ssim),
        images,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    MaxSteps,
}

/// Where a run writes its checkpoints.
#[derive(Clone, Debug)]
pub struct CheckpointDir {
    pub dir: PathBuf,
}

impl CheckpointDir {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn epoch(&self, e: u64) -> PathBuf {
        self.dir.join(format!("epoch_{e:04}.ckpt"))
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub log: TrainLog,
    pub stop: StopReason,
    pub final_eval: Option<EvalSummary>,
}

fn save(state: &mut TrainState, path: &Path) -> Result<()> {
    save_checkpoint(state, path)?;
    state.last_saved = state.step;
    Ok(())
}

fn max_sigma(net: &Network) -> Option<f64> {
    net.normalized_sigmas().into_iter().map(|(_, s)| s).reduce(f64::max)
}

/// Trains on `records` (split internally) until the epoch budget, the step
/// budget or early stopping ends the run. With `ckpt`, checkpoints go there
/// and `last.ckpt` always holds the final state.
pub fn run(state: &mut TrainState, records: &[ImageRecord], ckpt: Option<&CheckpointDir>) -> Result<RunOutcome> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let size = cfg.image_size()?;
    if let Some(r) = records.iter().find(|r| r.height() != size || r.width() != size) {
        return Err(Error::Config(format!(
            "{} at scale {} produces {size}x{size} images but {} is {}x{}",
            cfg.preset,
            cfg.scale,
            r.id,
            r.height(),
            r.width()
        )));
    }
    if size % cfg.degrade_factor != 0 {
        return Err(Error::Config(format!(
            "degrade_factor {} does not divide image size {size}",
            cfg.degrade_factor
        )));
    }
    if cfg.preset.conditional() {
        if let Some(r) = records.iter().find(|r| r.label.is_none()) {
            return Err(Error::Config(format!("{} is conditional but {} has no label", cfg.preset, r.id)));
        }
    }
    if records.len() < 2 {
        return Err(Error::Data(format!("need at least 2 images to split, got {}", records.len())));
    }
    if let Some(c) = ckpt {
        fs::create_dir_all(&c.dir).map_err(|e| Error::io(&c.dir, e))?;
    }
    let (train, val) = split(records, cfg.split_ratio, cfg.seed)?;
    let bs = cfg.batch_size;
    let per_epoch = train.len().div_ceil(bs) as u64;
    let mut log = TrainLog::default();
    let finish = |state: &mut TrainState, log: TrainLog, stop, final_eval| -> Result<RunOutcome> {
        if let Some(c) = ckpt {
            save(state, &c.last())?;
        }
        Ok(RunOutcome { log, stop, final_eval })
    };

    while state.epoch < cfg.epochs as u64 {
        let order = epoch_order(cfg.seed, state.epoch, train.len());
        while state.batch_in_epoch < per_epoch {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                return finish(state, log, StopReason::MaxSteps, None);
            }
            let b = state.batch_in_epoch as usize;
            let picks: Vec<&ImageRecord> = order[b * bs..((b + 1) * bs).min(train.len())]
                .iter()
                .map(|&i| &train[i])
                .collect();
            let batch = make_batch(&cfg, &picks, state.step)?;
            let out = train_step(state, &batch)?;
            state.batch_in_epoch += 1;
            state.loss_sum += out.gen_loss;
            state.loss_count += 1;
            log.steps.push(StepRow {
                step: state.step,
                epoch: state.epoch + 1,
                gen_loss: out.gen_loss,
                disc_loss: out.disc_loss,
                grad_norm_gen: out.grad_norm_gen,
                grad_norm_disc: out.grad_norm_disc,
            });
            if let Some(s) = out.disc_sigma {
                log.sigmas.push(SigmaRow { step: state.step, max_sigma: s });
            }
        }
        let eval = evaluate(&state.gen, &cfg, &val, SsimMode::WINDOWED)?;
        let mean_loss = state.loss_sum / state.loss_count.max(1) as f64;
        state.epoch_losses.push(mean_loss);
        state.epoch += 1;
        state.batch_in_epoch = 0;
        state.loss_sum = 0.0;
        state.loss_count = 0;
        log.epochs.push(EpochRow {
            epoch: state.epoch,
            psnr_mean: eval.psnr_mean,
            ssim_mean: eval.ssim_mean,
        });
        let improved = eval.ssim_mean > state.best_ssim;
        if improved {
            state.best_ssim = eval.ssim_mean;
            state.best_epoch = state.epoch;
        }
        if let Some(c) = ckpt {
            if improved {
                save(state, &c.best())?;
            }
            if cfg.checkpoint_interval > 0 && state.epoch % cfg.checkpoint_interval as u64 == 0 {
                save(state, &c.epoch(state.epoch))?;
            }
        }
        if early_stop_check(&state.epoch_losses, cfg.patience, cfg.plateau_eps) {
            return finish(state, log, StopReason::EarlyStopped, Some(eval));
        }
        if state.epoch == cfg.epochs as u64 {
            return finish(state, log, StopReason::Completed, Some(eval));
        }
    }
    finish(state, log, StopReason::Completed, None)
}

/// Splits `records` exactly as [`run`] does; returns the held-out part.
pub fn validation_split(config: &TrainConfig, records: &[ImageRecord]) -> Result<Vec<ImageRecord>> {
    Ok(split(records, config.split_ratio, config.seed)?.1)
}
