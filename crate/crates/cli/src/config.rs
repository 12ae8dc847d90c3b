//! Plain `key = value` config files and the run manifest.
//!
//! One parser serves both the training config and the phantom spec; a
//! manifest is the same format written back out, so a run can be reproduced
//! by feeding its manifest straight into `--config`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use xrfunfold::error::{Error, Result};
use xrfunfold::phantom::PhantomSpec;
use xrfunfold::train::TrainConfig;

/// Parsed `key = value` lines. Later duplicates win; `#` starts a comment.
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn take<T: std::str::FromStr>(&self, key: &str, into: &mut T) -> Result<()> {
        if let Some(raw) = self.entries.get(key) {
            *into = raw
                .parse()
                .map_err(|_| Error::config(format!("bad value for {key}: `{raw}`")))?;
        }
        Ok(())
    }

    /// Reads one optional value (for keys resolved outside the config
    /// structs, like the train factor).
    pub fn take_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("bad value for {key}: `{raw}`"))),
        }
    }

    /// Applies recognized training keys over `cfg`; unknown keys error so a
    /// typo cannot silently fall back to a default. Manifest provenance and
    /// path keys are tolerated (paths always come from the command line), so
    /// a train manifest is directly reusable as `--config`.
    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        self.reject_unknown(TRAIN_KEYS, TRAIN_MANIFEST_KEYS)?;
        self.take("code_atoms", &mut cfg.code_atoms)?;
        self.take("num_layers", &mut cfg.num_layers)?;
        self.take("alpha1", &mut cfg.alpha1)?;
        self.take("alpha2", &mut cfg.alpha2)?;
        self.take("pretrain_steps", &mut cfg.pretrain_steps)?;
        self.take("adversarial_steps", &mut cfg.adversarial_steps)?;
        self.take("pretrain_lr", &mut cfg.pretrain_lr)?;
        self.take("gen_lr", &mut cfg.gen_lr)?;
        self.take("disc_lr", &mut cfg.disc_lr)?;
        self.take("patch_size", &mut cfg.patch_size)?;
        self.take("batch_size", &mut cfg.batch_size)?;
        self.take("beta_max", &mut cfg.beta_max)?;
        self.take("tau_real", &mut cfg.tau_real)?;
        self.take("tau_fake", &mut cfg.tau_fake)?;
        self.take("clamp_bound", &mut cfg.clamp_bound)?;
        self.take("seed", &mut cfg.seed)?;
        Ok(())
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Applies recognized phantom keys over `spec`; synth manifests are
    /// directly reusable as `--spec`.
    pub fn apply_phantom(&self, spec: &mut PhantomSpec) -> Result<()> {
        self.reject_unknown(PHANTOM_KEYS, PHANTOM_MANIFEST_KEYS)?;
        self.take("spectral_channels", &mut spec.spectral_channels)?;
        self.take("common_atoms", &mut spec.common_atoms)?;
        self.take("unique_spectral_atoms", &mut spec.unique_spectral_atoms)?;
        self.take("unique_rgb_atoms", &mut spec.unique_rgb_atoms)?;
        self.take("height", &mut spec.height)?;
        self.take("width", &mut spec.width)?;
        self.take("regions", &mut spec.regions)?;
        self.take("sparsity", &mut spec.sparsity)?;
        self.take("seed", &mut spec.seed)?;
        Ok(())
    }

    fn reject_unknown(&self, known: &[&str], tolerated: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) && !tolerated.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }
}

const TRAIN_KEYS: &[&str] = &[
    "code_atoms",
    "num_layers",
    "alpha1",
    "alpha2",
    "pretrain_steps",
    "adversarial_steps",
    "pretrain_lr",
    "gen_lr",
    "disc_lr",
    "patch_size",
    "batch_size",
    "beta_max",
    "tau_real",
    "tau_fake",
    "clamp_bound",
    "seed",
];

const PHANTOM_KEYS: &[&str] = &[
    "spectral_channels",
    "common_atoms",
    "unique_spectral_atoms",
    "unique_rgb_atoms",
    "height",
    "width",
    "regions",
    "sparsity",
    "seed",
];

// Extra keys a manifest records beyond the knobs. `factor` is honored by the
// train command (flag wins); the rest are provenance or paths and are
// ignored when a manifest is read back as a config.
const TRAIN_MANIFEST_KEYS: &[&str] =
    &["tool", "version", "command", "lr_xrf", "hr_rgb", "factor", "out_checkpoint"];
const PHANTOM_MANIFEST_KEYS: &[&str] = &["tool", "version", "command", "out_y", "out_z"];

/// Everything needed to rerun a command: resolved values, in/out paths, and
/// the tool version. Written as `<primary output>.manifest` before any heavy
/// work starts.
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            lines: vec![
                ("tool".into(), "xrfunfold".into()),
                ("version".into(), env!("CARGO_PKG_VERSION").into()),
                ("command".into(), command.into()),
            ],
        }
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.lines.push((key.into(), value.to_string()));
        self
    }

    pub fn push_train(&mut self, cfg: &TrainConfig) -> &mut Self {
        self.push("code_atoms", cfg.code_atoms)
            .push("num_layers", cfg.num_layers)
            .push("alpha1", cfg.alpha1)
            .push("alpha2", cfg.alpha2)
            .push("pretrain_steps", cfg.pretrain_steps)
            .push("adversarial_steps", cfg.adversarial_steps)
            .push("pretrain_lr", cfg.pretrain_lr)
            .push("gen_lr", cfg.gen_lr)
            .push("disc_lr", cfg.disc_lr)
            .push("patch_size", cfg.patch_size)
            .push("batch_size", cfg.batch_size)
            .push("beta_max", cfg.beta_max)
            .push("tau_real", cfg.tau_real)
            .push("tau_fake", cfg.tau_fake)
            .push("clamp_bound", cfg.clamp_bound)
            .push("seed", cfg.seed)
    }

    pub fn push_phantom(&mut self, spec: &PhantomSpec) -> &mut Self {
        self.push("spectral_channels", spec.spectral_channels)
            .push("common_atoms", spec.common_atoms)
            .push("unique_spectral_atoms", spec.unique_spectral_atoms)
            .push("unique_rgb_atoms", spec.unique_rgb_atoms)
            .push("height", spec.height)
            .push("width", spec.width)
            .push("regions", spec.regions)
            .push("sparsity", spec.sparsity)
            .push("seed", spec.seed)
    }

    /// Writes `<primary_output>.manifest`.
    pub fn write_beside(&self, primary_output: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(text, "{k} = {v}");
        }
        let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest");
        std::fs::write(primary_output.with_file_name(name), text)?;
        Ok(())
    }
}
