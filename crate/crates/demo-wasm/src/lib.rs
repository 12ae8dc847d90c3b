//! Browser playground: synthesize a phantom scene, compare the bilinear
//! baseline against the network, and watch training improve the
//! reconstruction live.
//!
//! Everything is exported through one `DemoSession` so the page holds a
//! single object. Images cross the boundary as RGBA byte buffers sized
//! `width * height * 4`, ready for `ImageData`. All methods are plain Rust
//! under the bindgen attributes, so the whole crate also compiles and tests
//! natively.

use wasm_bindgen::prelude::*;

use xrfunfold::cube::SpectralCube;
use xrfunfold::eval::{bilinear_baseline, psnr};
use xrfunfold::image_ops::block_mean_downsample;
use xrfunfold::phantom::{synth_phantom, Phantom, PhantomSpec};
use xrfunfold::train::{TrainConfig, Trainer, TrainingInputs};

const FACTOR: usize = 4;

/// Grayscale plane to RGBA.
fn gray_rgba(plane: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(plane.len() * 4);
    for &v in plane {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Three-channel cube to RGBA.
fn color_rgba(cube: &SpectralCube) -> Vec<u8> {
    let n = cube.height() * cube.width();
    let mut out = Vec::with_capacity(n * 4);
    for p in 0..n {
        for c in 0..3 {
            let v = cube.plane(c)[p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Signed error plane to RGBA: zero is white, positive red, negative blue.
fn diff_rgba(a: &[f64], b: &[f64], gain: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for (&x, &y) in a.iter().zip(b) {
        let d = ((x - y) * gain).clamp(-1.0, 1.0);
        let mag = (d.abs() * 255.0).round() as u8;
        let (r, g, b) = if d >= 0.0 {
            (255, 255 - mag, 255 - mag)
        } else {
            (255 - mag, 255 - mag, 255)
        };
        out.extend_from_slice(&[r, g, b, 255]);
    }
    out
}

#[wasm_bindgen]
pub struct DemoSession {
    phantom: Phantom,
    y_lr: SpectralCube,
    baseline: SpectralCube,
    trainer: Option<Trainer>,
    recon: SpectralCube,
}

#[wasm_bindgen]
impl DemoSession {
    /// Synthesizes a scene and precomputes the baseline. The spatial size is
    /// kept small so training steps stay interactive in the browser.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, regions: u32, spectral_channels: u32) -> Result<DemoSession, String> {
        let spec = PhantomSpec {
            spectral_channels: spectral_channels as usize,
            common_atoms: 3,
            unique_spectral_atoms: 1,
            unique_rgb_atoms: 0,
            height: 32,
            width: 32,
            regions: regions as usize,
            sparsity: 2,
            seed: seed as u64,
        };
        let phantom = synth_phantom(&spec).map_err(|e| e.to_string())?;
        let y_lr = block_mean_downsample(&phantom.spectral, FACTOR).map_err(|e| e.to_string())?;
        let baseline = bilinear_baseline(&y_lr, FACTOR).map_err(|e| e.to_string())?;
        Ok(DemoSession {
            recon: baseline.clone(),
            phantom,
            y_lr,
            baseline,
            trainer: None,
        })
    }

    pub fn width(&self) -> u32 {
        self.phantom.spectral.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.phantom.spectral.height() as u32
    }

    pub fn lr_width(&self) -> u32 {
        self.y_lr.width() as u32
    }

    pub fn lr_height(&self) -> u32 {
        self.y_lr.height() as u32
    }

    pub fn spectral_channels(&self) -> u32 {
        self.phantom.spectral.channels() as u32
    }

    pub fn factor(&self) -> u32 {
        FACTOR as u32
    }

    // ── scene views ──────────────────────────────────────────────────────

    pub fn render_truth(&self, channel: u32) -> Result<Vec<u8>, String> {
        self.plane_rgba(&self.phantom.spectral, channel)
    }

    pub fn render_guide(&self) -> Vec<u8> {
        color_rgba(&self.phantom.rgb)
    }

    /// Low-resolution measurement at its native size (let the canvas scale).
    pub fn render_lr(&self, channel: u32) -> Result<Vec<u8>, String> {
        self.plane_rgba(&self.y_lr, channel)
    }

    pub fn render_baseline(&self, channel: u32) -> Result<Vec<u8>, String> {
        self.plane_rgba(&self.baseline, channel)
    }

    pub fn render_reconstruction(&self, channel: u32) -> Result<Vec<u8>, String> {
        self.plane_rgba(&self.recon, channel)
    }

    /// Error map against ground truth; `of_baseline` picks which
    /// reconstruction to show. Errors are amplified 4x for visibility.
    pub fn render_error(&self, channel: u32, of_baseline: bool) -> Result<Vec<u8>, String> {
        let cube = if of_baseline { &self.baseline } else { &self.recon };
        let c = channel as usize;
        if c >= cube.channels() {
            return Err(format!("channel {c} out of range"));
        }
        Ok(diff_rgba(cube.plane(c), self.phantom.spectral.plane(c), 4.0))
    }

    // ── metrics ──────────────────────────────────────────────────────────

    pub fn baseline_psnr(&self) -> f64 {
        psnr(&self.phantom.spectral, &self.baseline).unwrap_or(f64::NAN)
    }

    pub fn reconstruction_psnr(&self) -> f64 {
        psnr(&self.phantom.spectral, &self.recon).unwrap_or(f64::NAN)
    }

    // ── live training ────────────────────────────────────────────────────

    /// (Re)starts training with a fresh network. Steps are split between a
    /// fidelity-only warmup and the adversarial stage in the engine's usual
    /// 2:5 ratio.
    pub fn start_training(&mut self, seed: u32, total_steps: u32) -> Result<(), String> {
        let cfg = TrainConfig {
            code_atoms: 16,
            num_layers: 3,
            pretrain_steps: (total_steps as u64) * 2 / 7,
            adversarial_steps: (total_steps as u64) - (total_steps as u64) * 2 / 7,
            patch_size: 16,
            batch_size: 8,
            seed: seed as u64,
            ..TrainConfig::default()
        };
        let inputs = TrainingInputs::new(self.y_lr.clone(), self.phantom.rgb.clone(), FACTOR)
            .map_err(|e| e.to_string())?;
        self.trainer = Some(Trainer::new(inputs, cfg).map_err(|e| e.to_string())?);
        Ok(())
    }

    /// Runs up to `n` steps, refreshes the reconstruction, and reports
    /// progress as "done/total stage". Stops early at schedule end.
    pub fn train_steps(&mut self, n: u32) -> Result<String, String> {
        let trainer = self.trainer.as_mut().ok_or("call start_training first")?;
        for _ in 0..n {
            if trainer.is_complete() {
                break;
            }
            trainer.step().map_err(|e| e.to_string())?;
        }
        self.recon = trainer.reconstruct().map_err(|e| e.to_string())?.spectral;
        let done = trainer.pretrain_steps_done() + trainer.adversarial_steps_done();
        let total = trainer.config().pretrain_steps + trainer.config().adversarial_steps;
        let stage = if trainer.is_complete() {
            "done"
        } else {
            match trainer.stage() {
                xrfunfold::io::TrainStage::Pretrain => "warmup",
                xrfunfold::io::TrainStage::Adversarial => "adversarial",
            }
        };
        Ok(format!("{done}/{total} {stage}"))
    }

    pub fn training_complete(&self) -> bool {
        self.trainer.as_ref().map(|t| t.is_complete()).unwrap_or(false)
    }

    fn plane_rgba(&self, cube: &SpectralCube, channel: u32) -> Result<Vec<u8>, String> {
        let c = channel as usize;
        if c >= cube.channels() {
            return Err(format!("channel {c} out of range"));
        }
        Ok(gray_rgba(cube.plane(c)))
    }
}
