//! `xrfunfold` — reproducible experiments on the unfolded spectral
//! super-resolution engine.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage error.
//! Every file-producing command writes `<primary output>.manifest` with the
//! fully resolved values before heavy work begins, so any artifact can be
//! traced back to its exact inputs.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::{KeyValues, Manifest};
use xrfunfold::cube::SpectralCube;
use xrfunfold::error::{Error, Result};
use xrfunfold::eval::{append_report_row, bilinear_baseline, psnr_from_rmse, rmse};
use xrfunfold::gradcheck::run_gradient_checks;
use xrfunfold::image_ops::block_mean_downsample;
use xrfunfold::io::{
    load_checkpoint, read_cube, read_ppm, save_checkpoint, write_cube, write_pgm,
};
use xrfunfold::phantom::{synth_phantom, PhantomSpec};
use xrfunfold::train::{reconstruct, StepOutcome, TrainConfig, Trainer, TrainingInputs};

#[derive(Parser)]
#[command(name = "xrfunfold", version, about = "Unsupervised multimodal super-resolution of spectral cubes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a coupled-dictionary phantom scene (HR cube + RGB guide).
    Synth(SynthArgs),
    /// Block-mean downsample a cube by an integer factor.
    Downsample(DownsampleArgs),
    /// Train the network on one LR-cube / HR-guide pair.
    Train(TrainArgs),
    /// Reconstruct an HR cube from a checkpoint, with per-channel maps.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against ground truth into a CSV report.
    Evaluate(EvaluateArgs),
    /// Verify every gradient against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Phantom spec file (`key = value`); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    spectral_channels: Option<usize>,
    #[arg(long)]
    common_atoms: Option<usize>,
    #[arg(long)]
    unique_spectral_atoms: Option<usize>,
    #[arg(long)]
    unique_rgb_atoms: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the HR spectral cube (.xrfc).
    #[arg(long)]
    out_y: PathBuf,
    /// Output path for the co-registered RGB guide (.xrfc).
    #[arg(long)]
    out_z: PathBuf,
}

#[derive(Args)]
struct DownsampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    factor: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Low-resolution spectral cube (.xrfc).
    #[arg(long)]
    lr_xrf: PathBuf,
    /// High-resolution guide image (.xrfc or binary .ppm).
    #[arg(long)]
    hr_rgb: PathBuf,
    /// Upscale factor between the two [default: 4, config key `factor`].
    #[arg(long)]
    factor: Option<usize>,
    /// Training config file (`key = value`); flags below override it. A
    /// train manifest works here verbatim.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restore the published step counts (1e5 pretrain, 2e6 adversarial).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    code_atoms: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    adversarial_steps: Option<u64>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    gen_lr: Option<f64>,
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Progress line every N steps on stderr (0 silences).
    #[arg(long, default_value_t = 500)]
    log_every: u64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    lr_xrf: PathBuf,
    #[arg(long)]
    hr_rgb: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path for the reconstructed HR cube (.xrfc); per-channel
    /// `-ch<N>.pgm` maps are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstruction to score (.xrfc).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth cube (.xrfc).
    #[arg(long)]
    truth: PathBuf,
    /// Method label for the report row.
    #[arg(long)]
    label: String,
    /// Dataset label; defaults to the truth file stem.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out_csv: PathBuf,
    /// Also score the bilinear-plus-projection baseline built from this LR
    /// cube (requires --factor to match).
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    factor: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Worst tolerated |analytic - numeric| / max(|analytic| + |numeric|, 1e-8).
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Downsample(a) => cmd_downsample(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Reads a guide image by extension: binary pixmaps for `.ppm`, the cube
/// container otherwise. Either way the result must have three channels.
fn read_guide(path: &Path) -> Result<SpectralCube> {
    let is_ppm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ppm"))
        .unwrap_or(false);
    let cube = if is_ppm { read_ppm(path)? } else { read_cube(path)? };
    if cube.channels() != 3 {
        return Err(Error::dimension(format!(
            "guide image must have 3 channels, {} has {}",
            path.display(),
            cube.channels()
        )));
    }
    Ok(cube)
}

/// Seed precedence for commands that take one: explicit flag, then config
/// file, then the XRFUNFOLD_SEED environment variable, then the default.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("XRFUNFOLD_SEED") {
        Ok(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("XRFUNFOLD_SEED must be an integer, got `{raw}`"))),
        Err(_) => Ok(None),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = PhantomSpec::default();
    let mut seed_from_file = false;
    if let Some(path) = &a.spec {
        let kv = KeyValues::load(path)?;
        kv.apply_phantom(&mut spec)?;
        seed_from_file = kv.has("seed");
    }
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { spec.$field = v; } )* }
    }
    over!(spectral_channels, common_atoms, unique_spectral_atoms, unique_rgb_atoms, height, width, regions, sparsity);
    if let Some(s) = a.seed {
        spec.seed = s;
    } else if !seed_from_file {
        if let Some(s) = env_seed()? {
            spec.seed = s;
        }
    }

    let mut manifest = Manifest::new("synth");
    manifest
        .push_phantom(&spec)
        .push("out_y", a.out_y.display())
        .push("out_z", a.out_z.display());
    manifest.write_beside(&a.out_y)?;

    let phantom = synth_phantom(&spec)?;
    write_cube(&a.out_y, &phantom.spectral)?;
    write_cube(&a.out_z, &phantom.rgb)?;
    println!(
        "wrote {} ({}x{}x{}) and {} (3x{}x{})",
        a.out_y.display(),
        phantom.spectral.channels(),
        phantom.spectral.height(),
        phantom.spectral.width(),
        a.out_z.display(),
        phantom.rgb.height(),
        phantom.rgb.width()
    );
    Ok(())
}

fn cmd_downsample(a: DownsampleArgs) -> Result<()> {
    let cube = read_cube(&a.input)?;
    let mut manifest = Manifest::new("downsample");
    manifest
        .push("in", a.input.display())
        .push("factor", a.factor)
        .push("out", a.out.display());
    manifest.write_beside(&a.out)?;

    let down = block_mean_downsample(&cube, a.factor)?;
    write_cube(&a.out, &down)?;
    println!(
        "wrote {} ({}x{}x{})",
        a.out.display(),
        down.channels(),
        down.height(),
        down.width()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    let mut seed_resolved = false;
    let mut file_factor = None;
    if let Some(path) = &a.config {
        let kv = KeyValues::load(path)?;
        kv.apply_train(&mut cfg)?;
        seed_resolved = kv.has("seed");
        file_factor = kv.take_opt("factor")?;
    }
    let factor = a.factor.or(file_factor).unwrap_or(4);
    if a.paper_scale {
        cfg = cfg.paper_scale();
    }
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* }
    }
    over!(code_atoms, num_layers, alpha1, alpha2, pretrain_steps, adversarial_steps, pretrain_lr, gen_lr, disc_lr, patch_size, batch_size);
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if !seed_resolved {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    cfg.validate()?;

    let y_lr = read_cube(&a.lr_xrf)?;
    let z = read_guide(&a.hr_rgb)?;
    let inputs = TrainingInputs::new(y_lr, z, factor)?;

    let mut manifest = Manifest::new("train");
    manifest
        .push("lr_xrf", a.lr_xrf.display())
        .push("hr_rgb", a.hr_rgb.display())
        .push("factor", factor)
        .push_train(&cfg)
        .push("out_checkpoint", a.out_checkpoint.display());
    manifest.write_beside(&a.out_checkpoint)?;

    let total = cfg.pretrain_steps + cfg.adversarial_steps;
    let mut trainer = Trainer::new(inputs, cfg)?;
    while !trainer.is_complete() {
        let outcome = trainer.step()?;
        if a.log_every > 0 {
            let done = trainer.pretrain_steps_done() + trainer.adversarial_steps_done();
            if done % a.log_every == 0 || done == total {
                match outcome {
                    StepOutcome::Pretrain(loss) => {
                        eprintln!("step {done}/{total} pretrain loss {loss:.6e}")
                    }
                    StepOutcome::Adversarial(s) => eprintln!(
                        "step {done}/{total} fidelity {:.6e} adversarial {:.6e}",
                        s.fidelity, s.adversarial
                    ),
                }
            }
        }
    }
    save_checkpoint(&a.out_checkpoint, &trainer.checkpoint())?;
    println!("wrote {}", a.out_checkpoint.display());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let y_lr = read_cube(&a.lr_xrf)?;
    let z = read_guide(&a.hr_rgb)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let inputs = TrainingInputs::new(y_lr, z, a.factor)?;

    let mut manifest = Manifest::new("reconstruct");
    manifest
        .push("lr_xrf", a.lr_xrf.display())
        .push("hr_rgb", a.hr_rgb.display())
        .push("checkpoint", a.checkpoint.display())
        .push("factor", a.factor)
        .push("out", a.out.display());
    manifest.write_beside(&a.out)?;

    let rec = reconstruct(&inputs, &ck.generator)?;
    write_cube(&a.out, &rec.spectral)?;
    let stem = a.out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    for c in 0..rec.spectral.channels() {
        let map = a.out.with_file_name(format!("{stem}-ch{c}.pgm"));
        write_pgm(&map, rec.spectral.plane(c), rec.spectral.height(), rec.spectral.width())?;
    }
    println!(
        "wrote {} plus {} channel maps",
        a.out.display(),
        rec.spectral.channels()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let pred = read_cube(&a.pred)?;
    let truth = read_cube(&a.truth)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.truth
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned()
    });

    let mut manifest = Manifest::new("evaluate");
    manifest
        .push("pred", a.pred.display())
        .push("truth", a.truth.display())
        .push("dataset", &dataset)
        .push("label", &a.label)
        .push("out_csv", a.out_csv.display());
    if let Some(b) = &a.baseline {
        manifest.push("baseline", b.display()).push("factor", a.factor);
    }
    manifest.write_beside(&a.out_csv)?;

    let e = rmse(&truth, &pred)?;
    let p = psnr_from_rmse(e)?;
    append_report_row(&a.out_csv, &dataset, &a.label, e, p)?;
    println!("{dataset},{}: rmse {e:.6} psnr {p:.4} dB", a.label);

    if let Some(lr_path) = &a.baseline {
        let y_lr = read_cube(lr_path)?;
        let base = bilinear_baseline(&y_lr, a.factor)?;
        let be = rmse(&truth, &base)?;
        let bp = psnr_from_rmse(be)?;
        append_report_row(&a.out_csv, &dataset, "bilinear", be, bp)?;
        println!("{dataset},bilinear: rmse {be:.6} psnr {bp:.4} dB");
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = run_gradient_checks(a.instances, a.seed)?;
    let mut failed = false;
    for r in &results {
        let verdict = if r.worst_rel_err < a.tolerance { "ok" } else { "FAIL" };
        failed |= r.worst_rel_err >= a.tolerance;
        println!(
            "{:<28} {} instances, worst rel err {:.3e}  {verdict}",
            r.family, r.instances, r.worst_rel_err
        );
    }
    if failed {
        return Err(Error::numeric(format!(
            "gradient check exceeded tolerance {:e}",
            a.tolerance
        )));
    }
    println!("all {} families within {:e}", results.len(), a.tolerance);
    Ok(())
}
