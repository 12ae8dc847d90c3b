//! One-shot probe of the desk-scale benchmark: synthesize the benchmark
//! phantom (texture knobs overridable from the command line), train end to
//! end, and print the PSNR margin over the bilinear-plus-projection
//! baseline plus wall time per stage.
//!
//! Usage: desk_probe [train_seed] [phantom_seed] [common] [unique_spectral]
//!                   [unique_rgb] [regions]

use std::time::Instant;
use xrfunfold::eval::{bilinear_baseline, psnr};
use xrfunfold::image_ops::block_mean_downsample;
use xrfunfold::phantom::{synth_phantom, PhantomSpec};
use xrfunfold::train::{Trainer, TrainConfig, TrainingInputs};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let phantom_seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let common: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
    let unique_s: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let unique_r: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let regions: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64);

    let spec = PhantomSpec {
        common_atoms: common,
        unique_spectral_atoms: unique_s,
        unique_rgb_atoms: unique_r,
        regions,
        seed: phantom_seed,
        ..PhantomSpec::default()
    };
    println!("phantom: {spec:?}");
    let phantom = synth_phantom(&spec).unwrap();
    let y_lr = block_mean_downsample(&phantom.spectral, 4).unwrap();
    let baseline = bilinear_baseline(&y_lr, 4).unwrap();
    let base_psnr = psnr(&phantom.spectral, &baseline).unwrap();
    println!("baseline psnr: {base_psnr:.4} dB");

    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let inputs = TrainingInputs::new(y_lr, phantom.rgb.clone(), 4).unwrap();
    let mut trainer = Trainer::new(inputs, cfg).unwrap();

    let t0 = Instant::now();
    let mut pre_done = false;
    while !trainer.is_complete() {
        trainer.step().unwrap();
        if !pre_done && trainer.stage() == xrfunfold::io::TrainStage::Adversarial {
            pre_done = true;
            let rec = trainer.reconstruct().unwrap();
            let p = psnr(&phantom.spectral, &rec.spectral).unwrap();
            println!(
                "pretrain done in {:.1}s, psnr {p:.4} dB ({:+.4} vs baseline)",
                t0.elapsed().as_secs_f64(),
                p - base_psnr
            );
        }
    }
    let total = t0.elapsed().as_secs_f64();
    let rec = trainer.reconstruct().unwrap();
    let ours = psnr(&phantom.spectral, &rec.spectral).unwrap();
    println!(
        "seed {seed}: trained in {total:.1}s, psnr {ours:.4} dB, margin {:+.4} dB",
        ours - base_psnr
    );
}
