//! Two-stage unsupervised training.
//!
//! No high-resolution spectral ground truth exists, so supervision comes from
//! the measurements themselves:
//!
//! * **Pretraining** fits the network to reproduce the low-resolution cube
//!   after block-averaging its output, plus the guide image, with the final
//!   squashing disabled and mixing weights clamped into `[-1, 1]` after every
//!   step. The same pair is trained once more at a coarser scale (inputs
//!   downsampled by the factor again) to teach the scale relation.
//! * **Adversarial refinement** switches the final squashing on, drops the
//!   clamp, and alternates single steps between a patch discriminator and the
//!   reconstruction network. Discriminator "real" examples are pseudo-real
//!   blends of the upsampled measurement with the most-correlated guide
//!   channel; both players train only on patches their opponent currently
//!   gets wrong (threshold filtering), which keeps the two losses from
//!   saturating each other.
//!
//! Every random draw comes from fixed, documented streams so a run is
//! reproducible bit for bit, and checkpoints capture enough state (including
//! the RNG word position) that resuming matches an uninterrupted run exactly.

use crate::cube::SpectralCube;
use crate::discriminator::{score_on_tape, stage_patches, DiscriminatorParams, DiscriminatorVars};
use crate::error::{Error, Result};
use crate::generator::{forward_on_tape, Activation, GeneratorParams, GeneratorVars};
use crate::image_ops::{self, FlipAxis, Patch};
use crate::io::{Checkpoint, TrainStage};
use crate::optim::{adam_step, clamp_params, AdamState};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── configuration ───────────────────────────────────────────────────────────

/// Training hyperparameters. Defaults are the desk-scale recipe used by the
/// integration tests: small step counts, everything else as published.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Dictionary atoms / code channels (M).
    pub code_atoms: usize,
    /// Unfolded iteration count (K).
    pub num_layers: usize,
    /// Weight of the guide-image fidelity term.
    pub alpha1: f64,
    /// Weight of the adversarial term in the reconstruction loss.
    /// Zero disables the coupling entirely.
    pub alpha2: f64,
    pub pretrain_steps: u64,
    pub adversarial_steps: u64,
    pub pretrain_lr: f64,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub patch_size: usize,
    /// Patches per batch, for both players.
    pub batch_size: usize,
    /// Pseudo-real blend weights are drawn uniformly from `[0, beta_max)`.
    pub beta_max: f64,
    /// Filtering threshold for samples pushed toward the real label (+1):
    /// only scores strictly below it train.
    pub tau_real: f64,
    /// Filtering threshold for samples pushed toward the fake label (-1):
    /// only scores strictly above it train.
    pub tau_fake: f64,
    /// Pretraining clamp for mixing weights and the raw dictionary.
    pub clamp_bound: f64,
    /// Master seed. Derived streams: network init = seed, discriminator
    /// init = seed + 1, training draws = seed + 2.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            code_atoms: 32,
            num_layers: 5,
            alpha1: 0.003,
            alpha2: 0.5e-6,
            pretrain_steps: 2000,
            adversarial_steps: 5000,
            pretrain_lr: 3e-4,
            gen_lr: 3e-4,
            disc_lr: 3e-6,
            patch_size: 32,
            batch_size: 32,
            beta_max: 0.9,
            tau_real: 1.0,
            tau_fake: -1.0,
            clamp_bound: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published step counts (every other value already matches).
    pub fn paper_scale(mut self) -> Self {
        self.pretrain_steps = 100_000;
        self.adversarial_steps = 2_000_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.code_atoms == 0 || self.num_layers == 0 {
            return bad(format!(
                "need at least one atom and one layer, got M={} K={}",
                self.code_atoms, self.num_layers
            ));
        }
        if !(self.alpha1 > 0.0) || self.alpha2 < 0.0 {
            return bad(format!(
                "loss weights must satisfy alpha1 > 0, alpha2 >= 0, got {} / {}",
                self.alpha1, self.alpha2
            ));
        }
        if !(self.pretrain_lr > 0.0) || !(self.gen_lr > 0.0) || !(self.disc_lr > 0.0) {
            return bad("learning rates must be positive".to_string());
        }
        if self.patch_size < 2 || self.batch_size == 0 {
            return bad(format!(
                "patch size must be >= 2 and batch size >= 1, got {} / {}",
                self.patch_size, self.batch_size
            ));
        }
        if !(self.beta_max > 0.0 && self.beta_max <= 1.0) {
            return bad(format!("beta_max must lie in (0, 1], got {}", self.beta_max));
        }
        if !(self.tau_real >= 0.0) || !(self.tau_fake <= 0.0) {
            return bad(format!(
                "thresholds must satisfy tau_real >= 0 >= tau_fake, got {} / {}",
                self.tau_real, self.tau_fake
            ));
        }
        if !(self.clamp_bound > 0.0) {
            return bad(format!("clamp bound must be positive, got {}", self.clamp_bound));
        }
        Ok(())
    }
}

/// The measured pair: a low-resolution spectral cube and a co-registered
/// high-resolution 3-channel guide image covering the same scene.
#[derive(Debug, Clone)]
pub struct TrainingInputs {
    y_lr: SpectralCube,
    z: SpectralCube,
    factor: usize,
}

impl TrainingInputs {
    pub fn new(y_lr: SpectralCube, z: SpectralCube, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::config(format!(
                "upscaling factor must be >= 2, got {factor}"
            )));
        }
        if z.channels() != 3 {
            return Err(Error::dimension(format!(
                "guide image must have 3 channels, got {}",
                z.channels()
            )));
        }
        if z.height() != y_lr.height() * factor || z.width() != y_lr.width() * factor {
            return Err(Error::dimension(format!(
                "guide image {}x{} is not the spectral cube {}x{} scaled by {factor}",
                z.height(),
                z.width(),
                y_lr.height(),
                y_lr.width()
            )));
        }
        // the coarse training pair downsamples the measurement by the factor
        // once more, so it has to divide evenly
        if y_lr.height() % factor != 0 || y_lr.width() % factor != 0 {
            return Err(Error::dimension(format!(
                "cube extents {}x{} must be divisible by the factor {factor}",
                y_lr.height(),
                y_lr.width()
            )));
        }
        for (name, cube) in [("spectral cube", &y_lr), ("guide image", &z)] {
            if cube.min_value() < 0.0 || cube.max_value() > 1.0 {
                return Err(Error::contract(format!(
                    "{name} samples must lie in [0, 1], found range [{}, {}]",
                    cube.min_value(),
                    cube.max_value()
                )));
            }
        }
        Ok(TrainingInputs { y_lr, z, factor })
    }

    pub fn y_lr(&self) -> &SpectralCube {
        &self.y_lr
    }

    pub fn z(&self) -> &SpectralCube {
        &self.z
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn hr_extents(&self) -> (usize, usize) {
        (self.z.height(), self.z.width())
    }
}

// ── loss pieces (plain versions double as oracles for the taped ones) ───────

/// Network input: the measurement upsampled bilinearly, stacked under the
/// guide image, `[B + 3, H, W]`.
pub fn build_network_input(y_lr: &SpectralCube, z: &SpectralCube, factor: usize) -> Result<Tensor> {
    let up = image_ops::bilinear_upsample(y_lr, factor)?;
    Ok(up.concat_channels(z)?.to_tensor())
}

fn mse_cubes(a: &SpectralCube, b: &SpectralCube) -> Result<f64> {
    if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::dimension("mse over mismatched cubes".to_string()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// Measurement fidelity: the reconstruction must block-average back to the
/// observed cube, and its guide slice must match the guide image.
pub fn fidelity_loss(
    yhat: &SpectralCube,
    zhat: &SpectralCube,
    y_lr: &SpectralCube,
    z: &SpectralCube,
    alpha1: f64,
    factor: usize,
) -> Result<f64> {
    let down = image_ops::block_mean_downsample(yhat, factor)?;
    Ok(mse_cubes(&down, y_lr)? + alpha1 * mse_cubes(zhat, z)?)
}

fn fidelity_on_tape(
    tape: &mut Tape,
    yhat: Var,
    zhat: Var,
    y_lr: Var,
    z: Var,
    alpha1: f64,
    factor: usize,
) -> Result<Var> {
    let down = tape.block_mean_downsample(yhat, factor)?;
    let spectral = tape.mse(down, y_lr)?;
    let guide = tape.mse(zhat, z)?;
    let weighted = tape.scale(guide, alpha1);
    tape.add(spectral, weighted)
}

/// Differentiable consistency projection: subtract the upsampled block-mean
/// residual so the result downsamples exactly to the measurement.
fn project_on_tape(tape: &mut Tape, yhat: Var, y_lr: Var, factor: usize) -> Result<Var> {
    let down = tape.block_mean_downsample(yhat, factor)?;
    let resid = tape.sub(down, y_lr)?;
    let spread = tape.replicate_upsample(resid, factor)?;
    tape.sub(yhat, spread)
}

// ── patch sampling ──────────────────────────────────────────────────────────

/// One sampled patch location plus its augmentation flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDraw {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    /// Mirror left-right.
    pub flip_h: bool,
    /// Mirror top-bottom.
    pub flip_v: bool,
}

/// Fixed draw order: channel, row, col, then the two flips. Changing it
/// would silently re-randomize every seeded run.
pub fn draw_patch_coords(
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> PatchDraw {
    PatchDraw {
        channel: rng.random_range(0..channels),
        row: rng.random_range(0..=height - patch),
        col: rng.random_range(0..=width - patch),
        flip_h: rng.random_bool(0.5),
        flip_v: rng.random_bool(0.5),
    }
}

/// Cuts and flips the drawn patch out of a cube (plain version).
pub fn extract_draw(cube: &SpectralCube, draw: &PatchDraw, size: usize) -> Result<Patch> {
    let mut p = image_ops::extract_patch(cube, draw.channel, draw.row, draw.col, size)?;
    if draw.flip_h {
        p = image_ops::flip_patch(&p, FlipAxis::Horizontal);
    }
    if draw.flip_v {
        p = image_ops::flip_patch(&p, FlipAxis::Vertical);
    }
    Ok(p)
}

/// Same cut-and-flip on a tape, so gradients flow back into the source image.
fn stage_draw(tape: &mut Tape, src: Var, draw: &PatchDraw, size: usize) -> Result<Var> {
    let mut p = tape.extract_patch(src, draw.channel, draw.row, draw.col, size)?;
    if draw.flip_h {
        p = tape.flip_cols(p);
    }
    if draw.flip_v {
        p = tape.flip_rows(p);
    }
    Ok(p)
}

fn pseudo_real_inner(
    y_up: &SpectralCube,
    z: &SpectralCube,
    best: Option<&[usize]>,
    patch_size: usize,
    beta_max: f64,
    rng: &mut impl Rng,
) -> Result<Patch> {
    // draw order: spectral channel, blend weight, row, col, flips; the guide
    // channel is selected by correlation, not drawn
    let i = rng.random_range(0..y_up.channels());
    let j = match best {
        Some(table) => table[i],
        None => image_ops::best_correlated_rgb_channel(y_up.plane(i), z),
    };
    let beta = rng.random_range(0.0..beta_max);
    let row = rng.random_range(0..=y_up.height() - patch_size);
    let col = rng.random_range(0..=y_up.width() - patch_size);
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);

    let spectral = image_ops::extract_patch(y_up, i, row, col, patch_size)?;
    let guide = image_ops::extract_patch(z, j, row, col, patch_size)?;
    let values: Vec<f64> = spectral
        .values
        .iter()
        .zip(&guide.values)
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect();
    let mut p = Patch {
        values,
        size: patch_size,
        channel: i,
        row,
        col,
    };
    if flip_h {
        p = image_ops::flip_patch(&p, FlipAxis::Horizontal);
    }
    if flip_v {
        p = image_ops::flip_patch(&p, FlipAxis::Vertical);
    }
    Ok(p)
}

/// Discriminator "real" example: a random spectral plane of the upsampled
/// measurement blended with the guide channel it correlates with best,
/// `beta * spectral + (1 - beta) * guide`, then flip-augmented. The blend is
/// measurement-derived, so no external ground truth is involved.
pub fn make_pseudo_real_patch(
    y_up: &SpectralCube,
    z: &SpectralCube,
    patch_size: usize,
    beta_max: f64,
    rng: &mut impl Rng,
) -> Result<Patch> {
    pseudo_real_inner(y_up, z, None, patch_size, beta_max, rng)
}

// ── threshold filtering ─────────────────────────────────────────────────────

/// Indices of scores on the wrong side of the threshold, strictly:
/// a positive threshold keeps scores below it, a negative threshold keeps
/// scores above it, zero keeps nothing. Scores exactly at the threshold are
/// already good enough and are excluded.
pub fn filter_misclassified(scores: &[f64], tau: f64) -> Vec<usize> {
    let keep: fn(f64, f64) -> bool = if tau > 0.0 {
        |d, t| d < t
    } else if tau < 0.0 {
        |d, t| d > t
    } else {
        return Vec::new();
    };
    scores
        .iter()
        .enumerate()
        .filter(|(_, &d)| keep(d, tau))
        .map(|(i, _)| i)
        .collect()
}

/// Mean squared distance to the real label over still-misclassified fakes;
/// zero when everything already passes.
pub fn generator_adversarial_loss(scores: &[f64], tau_real: f64) -> f64 {
    let idx = filter_misclassified(scores, tau_real);
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&i| (scores[i] - 1.0).powi(2)).sum::<f64>() / idx.len() as f64
}

/// Both discriminator terms, each averaged over its own misclassified set;
/// an empty set contributes zero.
pub fn discriminator_loss(
    fake_scores: &[f64],
    real_scores: &[f64],
    tau_fake: f64,
    tau_real: f64,
) -> f64 {
    let fi = filter_misclassified(fake_scores, tau_fake);
    let ri = filter_misclassified(real_scores, tau_real);
    let fake_term = if fi.is_empty() {
        0.0
    } else {
        fi.iter().map(|&i| (fake_scores[i] + 1.0).powi(2)).sum::<f64>() / fi.len() as f64
    };
    let real_term = if ri.is_empty() {
        0.0
    } else {
        ri.iter().map(|&i| (real_scores[i] - 1.0).powi(2)).sum::<f64>() / ri.len() as f64
    };
    fake_term + real_term
}

// ── trainer ─────────────────────────────────────────────────────────────────

/// What a single adversarial step did, for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvStepStats {
    pub total_loss: f64,
    pub fidelity: f64,
    /// Unweighted adversarial term (before alpha2).
    pub adversarial: f64,
    /// Misclassified fakes in the reconstruction player's batch.
    pub gen_active: usize,
    pub disc_loss: f64,
    pub disc_fake_active: usize,
    pub disc_real_active: usize,
    /// False when both discriminator sets were empty and its update was
    /// skipped.
    pub disc_updated: bool,
}

/// Outcome of one `step` call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Pretrain(f64),
    Adversarial(AdvStepStats),
}

pub struct Trainer {
    cfg: TrainConfig,
    inputs: TrainingInputs,
    gen: GeneratorParams,
    disc: DiscriminatorParams,
    gen_opt: AdamState,
    disc_opt: AdamState,
    rng: ChaCha8Rng,
    pretrain_done: u64,
    adversarial_done: u64,
    // caches derived from the (fixed) inputs
    x_fine: Tensor,
    x_coarse: Tensor,
    y_lr_t: Tensor,
    z_t: Tensor,
    y_ll_t: Tensor,
    z_l_t: Tensor,
    y_up: SpectralCube,
    /// Best-correlated guide channel per spectral channel. The inputs never
    /// change during a run, so the per-call correlation scan is hoisted here;
    /// a unit test pins the equivalence.
    best_rgb: Vec<usize>,
}

impl Trainer {
    pub fn new(inputs: TrainingInputs, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = GeneratorParams::init(
            inputs.y_lr.channels(),
            inputs.z.channels(),
            cfg.code_atoms,
            cfg.num_layers,
            cfg.seed,
        )?;
        let disc = DiscriminatorParams::init(cfg.patch_size, cfg.seed.wrapping_add(1))?;
        let gen_opt = AdamState::new(&gen.tensors());
        let disc_opt = AdamState::new(&disc.tensors());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        Self::assemble(inputs, cfg, gen, disc, gen_opt, disc_opt, rng, 0, 0)
    }

    /// Rebuilds a trainer mid-run. Continuing from here is bit-identical to
    /// never having stopped.
    pub fn from_checkpoint(inputs: TrainingInputs, cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let gen_ok = ck.generator.spectral_channels() == inputs.y_lr.channels()
            && ck.generator.rgb_channels() == inputs.z.channels()
            && ck.generator.code_atoms() == cfg.code_atoms
            && ck.generator.num_layers() == cfg.num_layers;
        if !gen_ok || ck.discriminator.patch_size() != cfg.patch_size {
            return Err(Error::config(
                "checkpoint was trained with different dimensions than this config/input pair"
                    .to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_word_pos(ck.rng_word_pos);
        Self::assemble(
            inputs,
            cfg,
            ck.generator,
            ck.discriminator,
            ck.gen_opt,
            ck.disc_opt,
            rng,
            ck.pretrain_steps_done,
            ck.adversarial_steps_done,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        inputs: TrainingInputs,
        cfg: TrainConfig,
        gen: GeneratorParams,
        disc: DiscriminatorParams,
        gen_opt: AdamState,
        disc_opt: AdamState,
        rng: ChaCha8Rng,
        pretrain_done: u64,
        adversarial_done: u64,
    ) -> Result<Self> {
        let (h, w) = inputs.hr_extents();
        if cfg.patch_size > h || cfg.patch_size > w {
            return Err(Error::config(format!(
                "patch size {} exceeds the {h}x{w} reconstruction",
                cfg.patch_size
            )));
        }
        let s = inputs.factor;
        let y_up = image_ops::bilinear_upsample(&inputs.y_lr, s)?;
        let x_fine = y_up.concat_channels(&inputs.z)?.to_tensor();
        let y_ll = image_ops::block_mean_downsample(&inputs.y_lr, s)?;
        let z_l = image_ops::block_mean_downsample(&inputs.z, s)?;
        let x_coarse = image_ops::bilinear_upsample(&y_ll, s)?
            .concat_channels(&z_l)?
            .to_tensor();
        let best_rgb = (0..inputs.y_lr.channels())
            .map(|i| image_ops::best_correlated_rgb_channel(y_up.plane(i), &inputs.z))
            .collect();
        Ok(Trainer {
            y_lr_t: inputs.y_lr.to_tensor(),
            z_t: inputs.z.to_tensor(),
            y_ll_t: y_ll.to_tensor(),
            z_l_t: z_l.to_tensor(),
            x_fine,
            x_coarse,
            y_up,
            best_rgb,
            cfg,
            inputs,
            gen,
            disc,
            gen_opt,
            disc_opt,
            rng,
            pretrain_done,
            adversarial_done,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &GeneratorParams {
        &self.gen
    }

    pub fn discriminator(&self) -> &DiscriminatorParams {
        &self.disc
    }

    pub fn pretrain_steps_done(&self) -> u64 {
        self.pretrain_done
    }

    pub fn adversarial_steps_done(&self) -> u64 {
        self.adversarial_done
    }

    /// Pretraining until its step budget is spent, adversarial after.
    pub fn stage(&self) -> TrainStage {
        if self.pretrain_done < self.cfg.pretrain_steps {
            TrainStage::Pretrain
        } else {
            TrainStage::Adversarial
        }
    }

    pub fn is_complete(&self) -> bool {
        self.pretrain_done >= self.cfg.pretrain_steps
            && self.adversarial_done >= self.cfg.adversarial_steps
    }

    /// Runs whichever step the schedule calls for next.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.is_complete() {
            return Err(Error::contract("training schedule already complete".to_string()));
        }
        match self.stage() {
            TrainStage::Pretrain => Ok(StepOutcome::Pretrain(self.pretrain_step()?)),
            TrainStage::Adversarial => Ok(StepOutcome::Adversarial(self.adversarial_step()?)),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.gen.clone(),
            discriminator: self.disc.clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            stage: self.stage(),
            pretrain_steps_done: self.pretrain_done,
            adversarial_steps_done: self.adversarial_done,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn reconstruct(&self) -> Result<Reconstruction> {
        reconstruct_with_input(&self.gen, &self.x_fine, &self.inputs.y_lr, self.inputs.factor)
    }

    /// One fidelity-only step: both scale pairs, squashing off, clamp after.
    pub fn pretrain_step(&mut self) -> Result<f64> {
        let cfg = self.cfg.clone();
        let b = self.inputs.y_lr.channels();
        let rgb = self.inputs.z.channels();
        let s = self.inputs.factor;

        let mut tape = Tape::new();
        let vars = self.gen.stage(&mut tape, true);

        let xf = tape.constant(&self.x_fine);
        let fine = forward_on_tape(&mut tape, &vars, xf, b, rgb, cfg.code_atoms, false, Activation::Sigmoid)?;
        let y_lr = tape.constant(&self.y_lr_t);
        let z = tape.constant(&self.z_t);
        let fid_fine = fidelity_on_tape(&mut tape, fine.yhat, fine.zhat, y_lr, z, cfg.alpha1, s)?;

        let xc = tape.constant(&self.x_coarse);
        let coarse = forward_on_tape(&mut tape, &vars, xc, b, rgb, cfg.code_atoms, false, Activation::Sigmoid)?;
        let y_ll = tape.constant(&self.y_ll_t);
        let z_l = tape.constant(&self.z_l_t);
        let fid_coarse = fidelity_on_tape(&mut tape, coarse.yhat, coarse.zhat, y_ll, z_l, cfg.alpha1, s)?;

        let total = tape.add(fid_fine, fid_coarse)?;
        let loss = tape.scalar_value(total);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "pretraining loss became {loss} at step {}",
                self.pretrain_done
            )));
        }
        let grads = tape.backward(total)?;
        let var_list = gen_var_list(&vars);
        apply_update(self.gen.tensors_mut(), &var_list, &grads, &mut self.gen_opt, cfg.pretrain_lr);
        let mask = self.gen.weight_mask();
        clamp_params(&mut self.gen.tensors_mut(), &mask, cfg.clamp_bound);
        self.pretrain_done += 1;
        Ok(loss)
    }

    /// One adversarial round: the discriminator trains on the current
    /// reconstruction (detached) against pseudo-real blends, then the
    /// reconstruction network trains against the updated discriminator.
    /// Both sides see only their misclassified patches.
    pub fn adversarial_step(&mut self) -> Result<AdvStepStats> {
        let cfg = self.cfg.clone();
        let b = self.inputs.y_lr.channels();
        let rgb = self.inputs.z.channels();
        let s = self.inputs.factor;
        let (h, w) = self.inputs.hr_extents();
        let p = cfg.patch_size;

        // current reconstruction, detached, for the discriminator's fakes
        let (_, yhat, _) = self.gen.forward(&self.x_fine, true)?;
        let proj = image_ops::project_consistent(&SpectralCube::from_tensor(&yhat)?, &self.inputs.y_lr, s)?;

        // discriminator batch: fakes first, pseudo-reals second (fixed order)
        let fake_draws: Vec<PatchDraw> = (0..cfg.batch_size)
            .map(|_| draw_patch_coords(b, h, w, p, &mut self.rng))
            .collect();
        let fake_patches: Vec<Patch> = fake_draws
            .iter()
            .map(|d| extract_draw(&proj, d, p))
            .collect::<Result<_>>()?;
        let real_patches: Vec<Patch> = (0..cfg.batch_size)
            .map(|_| {
                pseudo_real_inner(
                    &self.y_up,
                    &self.inputs.z,
                    Some(&self.best_rgb),
                    p,
                    cfg.beta_max,
                    &mut self.rng,
                )
            })
            .collect::<Result<_>>()?;

        let fake_scores = self.disc.score_patches(&fake_patches)?;
        let real_scores = self.disc.score_patches(&real_patches)?;
        let fi = filter_misclassified(&fake_scores, cfg.tau_fake);
        let ri = filter_misclassified(&real_scores, cfg.tau_real);
        let disc_loss = discriminator_loss(&fake_scores, &real_scores, cfg.tau_fake, cfg.tau_real);
        if !disc_loss.is_finite() {
            return Err(Error::numeric(format!(
                "discriminator loss became {disc_loss} at step {}",
                self.adversarial_done
            )));
        }
        let disc_updated = !(fi.is_empty() && ri.is_empty());
        if disc_updated {
            let mut tape = Tape::new();
            let dvars = self.disc.stage(&mut tape, true);
            let mut loss: Option<Var> = None;
            if !fi.is_empty() {
                let patches = stage_patches(&mut tape, &fake_patches, p)?;
                let scores = score_on_tape(&mut tape, &dvars, patches)?;
                let shifted = tape.add_const(scores, 1.0);
                let sq = tape.square(shifted);
                loss = Some(tape.mean_subset(sq, &fi)?);
            }
            if !ri.is_empty() {
                let patches = stage_patches(&mut tape, &real_patches, p)?;
                let scores = score_on_tape(&mut tape, &dvars, patches)?;
                let shifted = tape.add_const(scores, -1.0);
                let sq = tape.square(shifted);
                let term = tape.mean_subset(sq, &ri)?;
                loss = Some(match loss {
                    Some(l) => tape.add(l, term)?,
                    None => term,
                });
            }
            let loss = loss.expect("disc_updated implies a non-empty set");
            let grads = tape.backward(loss)?;
            let var_list = disc_var_list(&dvars);
            apply_update(self.disc.tensors_mut(), &var_list, &grads, &mut self.disc_opt, cfg.disc_lr);
        }

        // reconstruction update against the (possibly updated) discriminator
        let mut tape = Tape::new();
        let gvars = self.gen.stage(&mut tape, true);
        let xf = tape.constant(&self.x_fine);
        let out = forward_on_tape(&mut tape, &gvars, xf, b, rgb, cfg.code_atoms, true, Activation::Sigmoid)?;
        let y_lr = tape.constant(&self.y_lr_t);
        let z = tape.constant(&self.z_t);
        let fid = fidelity_on_tape(&mut tape, out.yhat, out.zhat, y_lr, z, cfg.alpha1, s)?;
        let projected = project_on_tape(&mut tape, out.yhat, y_lr, s)?;

        let gen_draws: Vec<PatchDraw> = (0..cfg.batch_size)
            .map(|_| draw_patch_coords(b, h, w, p, &mut self.rng))
            .collect();
        let patch_vars: Vec<Var> = gen_draws
            .iter()
            .map(|d| stage_draw(&mut tape, projected, d, p))
            .collect::<Result<_>>()?;
        let batch = tape.stack(&patch_vars)?;
        let dvars = self.disc.stage(&mut tape, false);
        let scores = score_on_tape(&mut tape, &dvars, batch)?;
        let score_vals = tape.value(scores).to_vec();
        let gi = filter_misclassified(&score_vals, cfg.tau_real);
        let adversarial = generator_adversarial_loss(&score_vals, cfg.tau_real);

        // alpha2 == 0 turns the coupling off entirely, so the adversarial
        // branch is left out of the graph rather than multiplied by zero
        let total = if gi.is_empty() || cfg.alpha2 == 0.0 {
            fid
        } else {
            let shifted = tape.add_const(scores, -1.0);
            let sq = tape.square(shifted);
            let mean = tape.mean_subset(sq, &gi)?;
            let weighted = tape.scale(mean, cfg.alpha2);
            tape.add(fid, weighted)?
        };
        let fidelity = tape.scalar_value(fid);
        let total_loss = tape.scalar_value(total);
        if !total_loss.is_finite() {
            return Err(Error::numeric(format!(
                "reconstruction loss became {total_loss} at step {}",
                self.adversarial_done
            )));
        }
        let grads = tape.backward(total)?;
        let var_list = gen_var_list(&gvars);
        apply_update(self.gen.tensors_mut(), &var_list, &grads, &mut self.gen_opt, cfg.gen_lr);
        self.adversarial_done += 1;

        Ok(AdvStepStats {
            total_loss,
            fidelity,
            adversarial,
            gen_active: gi.len(),
            disc_loss,
            disc_fake_active: fi.len(),
            disc_real_active: ri.len(),
            disc_updated,
        })
    }
}

fn gen_var_list(vars: &GeneratorVars) -> Vec<Var> {
    let mut list = Vec::with_capacity(3 * vars.layers.len() + 2);
    for &(w, s, lambda) in &vars.layers {
        list.push(w);
        list.push(s);
        list.push(lambda);
    }
    list.push(vars.d_raw);
    list.push(vars.lambda_out);
    list
}

fn disc_var_list(vars: &DiscriminatorVars) -> Vec<Var> {
    let mut list = Vec::with_capacity(2 * vars.convs.len() + 2);
    for &(w, b) in &vars.convs {
        list.push(w);
        list.push(b);
    }
    list.push(vars.fc_w);
    list.push(vars.fc_b);
    list
}

/// Routes tape gradients to their tensors (canonical order) and applies one
/// optimizer step. Parameters that did not touch the loss get zero gradient.
fn apply_update(
    tensors: Vec<&mut Tensor>,
    var_list: &[Var],
    grads: &Gradients,
    opt: &mut AdamState,
    lr: f64,
) {
    assert_eq!(tensors.len(), var_list.len(), "staging order mismatch");
    let grad_store: Vec<Vec<f64>> = var_list
        .iter()
        .zip(&tensors)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    let grad_refs: Vec<&[f64]> = grad_store.iter().map(|g| g.as_slice()).collect();
    let mut tensors = tensors;
    adam_step(&mut tensors, &grad_refs, opt, lr);
}

// ── inference ───────────────────────────────────────────────────────────────

/// A finished reconstruction: the consistency-projected spectral cube and the
/// network's guide-image slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub spectral: SpectralCube,
    pub guide: SpectralCube,
}

fn reconstruct_with_input(
    params: &GeneratorParams,
    x: &Tensor,
    y_lr: &SpectralCube,
    factor: usize,
) -> Result<Reconstruction> {
    let (_, yhat, zhat) = params.forward(x, true)?;
    let spectral = image_ops::project_consistent(&SpectralCube::from_tensor(&yhat)?, y_lr, factor)?;
    Ok(Reconstruction {
        spectral,
        guide: SpectralCube::from_tensor(&zhat)?,
    })
}

/// Full-resolution reconstruction from trained parameters: forward pass with
/// the final squashing on, then the consistency projection.
pub fn reconstruct(inputs: &TrainingInputs, params: &GeneratorParams) -> Result<Reconstruction> {
    if params.spectral_channels() != inputs.y_lr.channels()
        || params.rgb_channels() != inputs.z.channels()
    {
        return Err(Error::dimension(format!(
            "parameters expect {}+{} channels, inputs have {}+{}",
            params.spectral_channels(),
            params.rgb_channels(),
            inputs.y_lr.channels(),
            inputs.z.channels()
        )));
    }
    let x = build_network_input(&inputs.y_lr, &inputs.z, inputs.factor)?;
    reconstruct_with_input(params, &x, &inputs.y_lr, inputs.factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_inputs(seed: u64) -> TrainingInputs {
        // 16x16 reconstruction from an 8x8 cube, factor 2
        let spec = crate::phantom::PhantomSpec {
            spectral_channels: 3,
            height: 16,
            width: 16,
            regions: 6,
            seed,
            ..Default::default()
        };
        let ph = crate::phantom::synth_phantom(&spec).unwrap();
        let y_lr = image_ops::block_mean_downsample(&ph.spectral, 2).unwrap();
        TrainingInputs::new(y_lr, ph.rgb, 2).unwrap()
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            code_atoms: 8,
            num_layers: 2,
            pretrain_steps: 10,
            adversarial_steps: 10,
            patch_size: 8,
            batch_size: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        let paper = TrainConfig::default().paper_scale();
        assert_eq!(paper.pretrain_steps, 100_000);
        assert_eq!(paper.adversarial_steps, 2_000_000);
        assert!(paper.validate().is_ok());

        let mut c = TrainConfig::default();
        c.alpha1 = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.beta_max = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.tau_real = -0.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn inputs_validate_registration() {
        let y = SpectralCube::zeros(3, 8, 8);
        let z = SpectralCube::zeros(3, 16, 16);
        assert!(TrainingInputs::new(y.clone(), z.clone(), 2).is_ok());
        // wrong factor
        assert!(TrainingInputs::new(y.clone(), z.clone(), 4).is_err());
        // wrong guide channel count
        let z4 = SpectralCube::zeros(4, 16, 16);
        assert!(TrainingInputs::new(y.clone(), z4, 2).is_err());
        // cube extents not divisible by the factor (9x9 at factor 2
        // cannot form the coarse pair)
        let y9 = SpectralCube::zeros(3, 9, 9);
        let z18 = SpectralCube::zeros(3, 18, 18);
        assert!(TrainingInputs::new(y9, z18, 2).is_err());
        // out-of-range samples
        let mut bad = y.clone();
        bad.set(0, 0, 0, 1.5);
        assert!(TrainingInputs::new(bad, z, 2).is_err());
    }

    #[test]
    fn filtering_matches_brute_force_enumeration() {
        let scores = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
        // tau = +1: strictly below 1
        assert_eq!(filter_misclassified(&scores, 1.0), vec![0, 1, 2, 3, 4]);
        // tau = -1: strictly above -1
        assert_eq!(filter_misclassified(&scores, -1.0), vec![2, 3, 4, 5, 6]);
        // boundary scores are excluded on both sides
        assert!(!filter_misclassified(&scores, 1.0).contains(&5));
        assert!(!filter_misclassified(&scores, -1.0).contains(&1));
        // zero threshold trains nothing
        assert!(filter_misclassified(&scores, 0.0).is_empty());
    }

    #[test]
    fn plain_losses_match_hand_computation() {
        let fake = [-2.0, 0.0, 2.0];
        let real = [0.5, 1.5];
        // generator on its fakes at tau = +1: {-2, 0} -> ((−3)^2 + (−1)^2)/2
        assert!((generator_adversarial_loss(&fake, 1.0) - 5.0).abs() < 1e-12);
        // all fakes pass -> zero
        assert_eq!(generator_adversarial_loss(&[1.0, 2.0], 1.0), 0.0);
        // disc: fakes above -1 are {0, 2} -> (1 + 9)/2 = 5;
        // reals below +1 are {0.5} -> 0.25
        assert!((discriminator_loss(&fake, &real, -1.0, 1.0) - 5.25).abs() < 1e-12);
        // both sets empty -> zero
        assert_eq!(discriminator_loss(&[-2.0], &[1.5], -1.0, 1.0), 0.0);
    }

    #[test]
    fn taped_fidelity_matches_plain_recomputation() {
        let inputs = small_inputs(50);
        let cfg = small_config(50);
        let gen = GeneratorParams::init(3, 3, cfg.code_atoms, cfg.num_layers, 50).unwrap();
        let x = build_network_input(inputs.y_lr(), inputs.z(), inputs.factor()).unwrap();

        let (_, yhat, zhat) = gen.forward(&x, true).unwrap();
        let plain = fidelity_loss(
            &SpectralCube::from_tensor(&yhat).unwrap(),
            &SpectralCube::from_tensor(&zhat).unwrap(),
            inputs.y_lr(),
            inputs.z(),
            cfg.alpha1,
            inputs.factor(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let vars = gen.stage(&mut tape, false);
        let xv = tape.constant(&x);
        let out = forward_on_tape(&mut tape, &vars, xv, 3, 3, cfg.code_atoms, true, Activation::Sigmoid).unwrap();
        let ylr = tape.constant(&inputs.y_lr().to_tensor());
        let z = tape.constant(&inputs.z().to_tensor());
        let taped = fidelity_on_tape(&mut tape, out.yhat, out.zhat, ylr, z, cfg.alpha1, inputs.factor()).unwrap();
        assert!((tape.scalar_value(taped) - plain).abs() < 1e-12);
    }

    #[test]
    fn pretraining_reduces_the_loss_and_respects_the_clamp() {
        let inputs = small_inputs(51);
        let mut cfg = small_config(51);
        cfg.pretrain_steps = 40;
        let mut t = Trainer::new(inputs, cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..40 {
            losses.push(t.pretrain_step().unwrap());
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "pretraining failed to descend: first {head}, last {tail}"
        );
        // clamped set stays inside the bound; thresholds are exempt
        let mask = t.gen.weight_mask();
        for (tensor, &clamped) in t.gen.tensors().iter().zip(&mask) {
            if clamped {
                for &v in tensor.values() {
                    assert!(v.abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn pseudo_real_patch_matches_manual_redraw() {
        let inputs = small_inputs(52);
        let y_up = image_ops::bilinear_upsample(inputs.y_lr(), inputs.factor()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut twin = rng.clone();
        let p = make_pseudo_real_patch(&y_up, inputs.z(), 8, 0.9, &mut rng).unwrap();

        // replay the documented draw order by hand
        let i = twin.random_range(0..y_up.channels());
        let j = image_ops::best_correlated_rgb_channel(y_up.plane(i), inputs.z());
        let beta = twin.random_range(0.0..0.9);
        let row = twin.random_range(0..=y_up.height() - 8);
        let col = twin.random_range(0..=y_up.width() - 8);
        let flip_h = twin.random_bool(0.5);
        let flip_v = twin.random_bool(0.5);
        let a = image_ops::extract_patch(&y_up, i, row, col, 8).unwrap();
        let g = image_ops::extract_patch(inputs.z(), j, row, col, 8).unwrap();
        let mut expect = Patch {
            values: a
                .values
                .iter()
                .zip(&g.values)
                .map(|(x, y)| beta * x + (1.0 - beta) * y)
                .collect(),
            size: 8,
            channel: i,
            row,
            col,
        };
        if flip_h {
            expect = image_ops::flip_patch(&expect, FlipAxis::Horizontal);
        }
        if flip_v {
            expect = image_ops::flip_patch(&expect, FlipAxis::Vertical);
        }
        assert_eq!(p, expect);
    }

    #[test]
    fn cached_correlation_table_matches_per_call_selection() {
        let inputs = small_inputs(53);
        let t = Trainer::new(inputs.clone(), small_config(53)).unwrap();
        let y_up = image_ops::bilinear_upsample(inputs.y_lr(), inputs.factor()).unwrap();
        for i in 0..inputs.y_lr().channels() {
            assert_eq!(
                t.best_rgb[i],
                image_ops::best_correlated_rgb_channel(y_up.plane(i), inputs.z())
            );
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = || {
            let mut t = Trainer::new(small_inputs(54), small_config(54)).unwrap();
            for _ in 0..3 {
                t.pretrain_step().unwrap();
            }
            for _ in 0..3 {
                t.adversarial_step().unwrap();
            }
            (
                t.gen.tensors().iter().flat_map(|x| x.values().to_vec()).collect::<Vec<f64>>(),
                t.disc.tensors().iter().flat_map(|x| x.values().to_vec()).collect::<Vec<f64>>(),
            )
        };
        let (g1, d1) = run();
        let (g2, d2) = run();
        for (a, b) in g1.iter().zip(&g2).chain(d1.iter().zip(&d2)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_resume_continues_bit_identically() {
        let inputs = small_inputs(55);
        let cfg = small_config(55);

        let mut full = Trainer::new(inputs.clone(), cfg.clone()).unwrap();
        for _ in 0..4 {
            full.pretrain_step().unwrap();
        }
        let ck = full.checkpoint();
        let bytes = crate::io::checkpoint_to_bytes(&ck);
        for _ in 0..6 {
            full.step().unwrap();
        }

        let restored = crate::io::checkpoint_from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(inputs, cfg, restored).unwrap();
        for _ in 0..6 {
            resumed.step().unwrap();
        }

        assert_eq!(full.pretrain_steps_done(), resumed.pretrain_steps_done());
        assert_eq!(full.adversarial_steps_done(), resumed.adversarial_steps_done());
        for (a, b) in full.gen.tensors().iter().zip(resumed.gen.tensors().iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (a, b) in full.disc.tensors().iter().zip(resumed.disc.tensors().iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let ra = full.reconstruct().unwrap();
        let rb = resumed.reconstruct().unwrap();
        for (x, y) in ra.spectral.data().iter().zip(rb.spectral.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_adversarial_weight_reduces_to_pure_fidelity_dynamics() {
        let inputs = small_inputs(56);
        let mut cfg = small_config(56);
        cfg.pretrain_steps = 0;
        cfg.alpha2 = 0.0;

        let mut t = Trainer::new(inputs.clone(), cfg.clone()).unwrap();
        // manual twin: same init, fidelity-only update with the same optimizer
        let mut gen = GeneratorParams::init(3, 3, cfg.code_atoms, cfg.num_layers, cfg.seed).unwrap();
        let mut opt = AdamState::new(&gen.tensors());
        let x = build_network_input(inputs.y_lr(), inputs.z(), inputs.factor()).unwrap();

        for _ in 0..3 {
            t.adversarial_step().unwrap();

            let mut tape = Tape::new();
            let vars = gen.stage(&mut tape, true);
            let xv = tape.constant(&x);
            let out = forward_on_tape(&mut tape, &vars, xv, 3, 3, cfg.code_atoms, true, Activation::Sigmoid).unwrap();
            let ylr = tape.constant(&inputs.y_lr().to_tensor());
            let z = tape.constant(&inputs.z().to_tensor());
            let fid = fidelity_on_tape(&mut tape, out.yhat, out.zhat, ylr, z, cfg.alpha1, inputs.factor()).unwrap();
            let grads = tape.backward(fid).unwrap();
            let var_list = gen_var_list(&vars);
            apply_update(gen.tensors_mut(), &var_list, &grads, &mut opt, cfg.gen_lr);
        }
        for (a, b) in t.gen.tensors().iter().zip(gen.tensors().iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn reconstruction_downsamples_exactly_to_the_measurement() {
        let inputs = small_inputs(57);
        let mut t = Trainer::new(inputs.clone(), small_config(57)).unwrap();
        for _ in 0..3 {
            t.pretrain_step().unwrap();
        }
        let rec = t.reconstruct().unwrap();
        assert_eq!(rec.spectral.height(), inputs.z().height());
        let down = image_ops::block_mean_downsample(&rec.spectral, inputs.factor()).unwrap();
        for (a, b) in down.data().iter().zip(inputs.y_lr().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // standalone reconstruction from the same parameters is identical
        let rec2 = reconstruct(&inputs, t.generator()).unwrap();
        assert_eq!(rec, rec2);
    }

    #[test]
    fn schedule_walks_both_stages_and_stops() {
        let inputs = small_inputs(58);
        let mut cfg = small_config(58);
        cfg.pretrain_steps = 2;
        cfg.adversarial_steps = 2;
        let mut t = Trainer::new(inputs, cfg).unwrap();
        assert_eq!(t.stage(), TrainStage::Pretrain);
        assert!(matches!(t.step().unwrap(), StepOutcome::Pretrain(_)));
        assert!(matches!(t.step().unwrap(), StepOutcome::Pretrain(_)));
        assert_eq!(t.stage(), TrainStage::Adversarial);
        assert!(matches!(t.step().unwrap(), StepOutcome::Adversarial(_)));
        assert!(matches!(t.step().unwrap(), StepOutcome::Adversarial(_)));
        assert!(t.is_complete());
        assert!(t.step().is_err());
    }
}
