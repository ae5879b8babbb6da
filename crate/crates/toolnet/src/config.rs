//! Layered run configuration: command-line flags override values from a TOML
//! file, which override built-in defaults. The resolved values are written next
//! to every run's outputs as `run_config.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toolnet_core::arch::{ArchConfig, Architecture};

use crate::train::TrainConfig;
use crate::{io_error, Error, Result};

pub const RUN_CONFIG: &str = "run_config.toml";

/// ToolNet learning-rate range before scaling.
pub const TOOLNET_LR: (f64, f64) = (1e-7, 1e-5);
/// Baseline learning-rate range before scaling.
pub const BASELINE_LR: (f64, f64) = (1e-10, 1e-8);

/// Training options. Every field is optional so flags and files can be layered.
#[derive(Debug, Clone, Default, PartialEq, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// toolnet-ms, toolnet-h or baseline.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lower learning-rate bound before scaling (default 1e-7, baseline 1e-10).
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Upper learning-rate bound before scaling (default 1e-5, baseline 1e-8).
    #[arg(long)]
    pub max_lr: Option<f64>,
    /// Factor applied to both learning-rate bounds (default 1).
    #[arg(long)]
    pub lr_scale: Option<f64>,
    /// Iterations per half-cycle (default twice the training-split size).
    #[arg(long)]
    pub stepsize: Option<u64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub width_multiplier: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub renormalize_fused: Option<bool>,
    /// Periodic checkpoint interval (default: one stepsize; 0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Write wall-clock milliseconds into the TrainLog itself.
    #[arg(long)]
    pub log_timing: Option<bool>,
}

macro_rules! overlay {
    ($a:expr, $b:expr, $($f:ident),*) => {
        TrainSettings { $($f: $a.$f.or($b.$f)),* }
    };
}

impl TrainSettings {
    /// Values from `self`, falling back to `lower`.
    pub fn over(self, lower: TrainSettings) -> TrainSettings {
        overlay!(
            self,
            lower,
            arch,
            manifest,
            out,
            seed,
            base_lr,
            max_lr,
            lr_scale,
            stepsize,
            momentum,
            weight_decay,
            scales,
            base_width,
            width_multiplier,
            dropout,
            renormalize_fused,
            checkpoint_every,
            log_timing
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `config` (if any) beneath these flags.
    pub fn layered(self, config: Option<&Path>) -> Result<Self> {
        match config {
            Some(p) => Ok(self.over(TrainSettings::from_file(p)?)),
            None => Ok(self),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.arch
            .as_deref()
            .ok_or_else(|| Error::Config("--arch is required (toolnet-ms, toolnet-h or baseline)".into()))?
            .parse()
            .map_err(|e: toolnet_core::Error| Error::Config(e.to_string()))
    }

    /// Fills every default. `train_size` sets the default stepsize and
    /// `frame` the network input size.
    pub fn resolve(&self, train_size: usize, frame: (usize, usize)) -> Result<ResolvedTrain> {
        let arch = self.architecture()?;
        let (base, max) = if arch == Architecture::Baseline { BASELINE_LR } else { TOOLNET_LR };
        let defaults = ArchConfig::full_scale();
        let lr_scale = self.lr_scale.unwrap_or(1.0);
        let stepsize = self.stepsize.unwrap_or(2 * train_size as u64);
        let r = ResolvedTrain {
            subcommand: "train".into(),
            arch: arch.tag().into(),
            manifest: self.manifest.clone().ok_or_else(|| Error::Config("--manifest is required".into()))?,
            out: self.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?,
            seed: self.seed.unwrap_or(1),
            base_lr: self.base_lr.unwrap_or(base),
            max_lr: self.max_lr.unwrap_or(max),
            lr_scale,
            effective_base_lr: self.base_lr.unwrap_or(base) * lr_scale,
            effective_max_lr: self.max_lr.unwrap_or(max) * lr_scale,
            stepsize,
            total_iterations: 6 * stepsize,
            momentum: self.momentum.unwrap_or(0.99),
            weight_decay: self.weight_decay.unwrap_or(0.0005),
            scales: self.scales.unwrap_or(defaults.scales),
            base_width: self.base_width.unwrap_or(defaults.base_width),
            width_growth: defaults.width_growth,
            width_cap: defaults.width_cap,
            width_multiplier: self.width_multiplier.unwrap_or(defaults.width_multiplier),
            dropout: self.dropout.unwrap_or(defaults.dropout),
            renormalize_fused: self.renormalize_fused.unwrap_or(defaults.renormalize_fused),
            input_height: frame.0,
            input_width: frame.1,
            checkpoint_every: self.checkpoint_every.unwrap_or(stepsize),
            log_timing: self.log_timing.unwrap_or(false),
        };
        r.train_config()?.cfg.validate()?;
        Ok(r)
    }
}

/// Fully resolved training run, persisted as `run_config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub subcommand: String,
    pub arch: String,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub base_lr: f64,
    pub max_lr: f64,
    pub lr_scale: f64,
    pub effective_base_lr: f64,
    pub effective_max_lr: f64,
    pub stepsize: u64,
    pub total_iterations: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scales: usize,
    pub base_width: usize,
    pub width_growth: usize,
    pub width_cap: usize,
    pub width_multiplier: f64,
    pub dropout: f64,
    pub renormalize_fused: bool,
    pub input_height: usize,
    pub input_width: usize,
    pub checkpoint_every: u64,
    pub log_timing: bool,
}

impl ResolvedTrain {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let arch: Architecture = self.arch.parse()?;
        Ok(TrainConfig {
            arch,
            cfg: ArchConfig {
                scales: self.scales,
                base_width: self.base_width,
                width_growth: self.width_growth,
                width_cap: self.width_cap,
                width_multiplier: self.width_multiplier,
                dropout: self.dropout,
                renormalize_fused: self.renormalize_fused,
                input_height: self.input_height,
                input_width: self.input_width,
                ..ArchConfig::full_scale()
            },
            base_lr: self.effective_base_lr,
            max_lr: self.effective_max_lr,
            stepsize: self.stepsize,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            out_dir: self.out.clone(),
            log_timing: self.log_timing,
        })
    }
}

/// Serializes `value` to `dir/run_config.toml`.
pub fn write_run_config<T: Serialize>(dir: &Path, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let path = dir.join(RUN_CONFIG);
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(io_error(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: TrainSettings = toml::from_str("arch = \"toolnet-h\"\nseed = 5\nlr_scale = 10.0\nstepsize = 7\n").unwrap();
        let flags = TrainSettings {
            seed: Some(9),
            manifest: Some("m.txt".into()),
            out: Some("o".into()),
            ..Default::default()
        };
        let r = flags.over(file).resolve(16, (64, 64)).unwrap();
        assert_eq!(r.seed, 9);
        assert_eq!(r.stepsize, 7);
        assert_eq!(r.total_iterations, 42);
        assert_eq!(r.arch, "toolnet-h");
        assert_eq!(r.effective_max_lr, 1e-5 * 10.0);
        assert_eq!(r.momentum, 0.99);
        assert_eq!(r.checkpoint_every, 7);
        let back: ResolvedTrain = toml::from_str(&toml::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn defaults_follow_architecture_and_data() {
        let s = TrainSettings {
            arch: Some("baseline".into()),
            manifest: Some("m".into()),
            out: Some("o".into()),
            ..Default::default()
        };
        let r = s.resolve(10, (64, 64)).unwrap();
        assert_eq!((r.base_lr, r.max_lr), BASELINE_LR);
        assert_eq!(r.stepsize, 20);
        assert!(toml::from_str::<TrainSettings>("bogus = 1").is_err());
        let bad = TrainSettings {
            arch: Some("fcn".into()),
            ..s
        };
        assert!(bad.resolve(10, (64, 64)).is_err());
    }
}
