//! Run settings merged from flags, an optional `key=value` file and
//! defaults, in that order of precedence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use eam_core::attention::AttentionVariant;
use eam_core::multiscale::{ModelConfig, Strategy};
use eam_core::training::{SplitRatio, TrainConfig};

use crate::UsageError;

/// Source of a synthetic dataset: classes, samples per class, extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub extent: usize,
}

impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("`{s}` is not K,N,EXT"))?;
        match nums[..] {
            [classes, per_class, extent] => Ok(SyntheticSpec {
                classes,
                per_class,
                extent,
            }),
            _ => Err(format!("`{s}` is not K,N,EXT")),
        }
    }
}

fn parse_ratio(s: &str) -> Result<SplitRatio, String> {
    s.parse().map_err(|e: eam_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: eam_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<AttentionVariant, String> {
    s.parse().map_err(|e: eam_core::Error| e.to_string())
}

/// Flags shared by `train`, `evaluate` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// key=value settings file; flags override it
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Procedural dataset: classes, samples per class, image side
    #[arg(long, value_name = "K,N,EXT", value_parser = SyntheticSpec::from_str)]
    pub synthetic: Option<SyntheticSpec>,
    /// Directory with one subdirectory of P6 images per class
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Train:test proportion, e.g. 20:80
    #[arg(long, value_name = "A:B", value_parser = parse_ratio)]
    pub ratio: Option<SplitRatio>,
    #[arg(long, value_parser = parse_strategy, help = "gap | aspp+gap | eam+gap | eam+aspp+gap")]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_variant, help = "icbam | cbam")]
    pub variant: Option<AttentionVariant>,
    /// Drop the reduced features from the attention-module output
    #[arg(long)]
    pub no_conv_features: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay (L2 added to the gradient)
    #[arg(long)]
    pub wd: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for independent splits
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Channels of the first backbone stage
    #[arg(long)]
    pub c2: Option<usize>,
    /// Channels after the attention module's reduction
    #[arg(long)]
    pub c_prime: Option<usize>,
    /// Disable flip/crop augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// Share of the training split held out for validation curves
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub data: Option<PathBuf>,
    pub ratio: SplitRatio,
    pub strategy: Strategy,
    pub variant: AttentionVariant,
    /// Whether `variant` was set explicitly rather than defaulted.
    pub variant_requested: bool,
    pub conv_features: bool,
    pub lr: f64,
    pub wd: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub c2: usize,
    pub c_prime: usize,
    pub augment: bool,
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            synthetic: None,
            data: None,
            ratio: SplitRatio::new(50.0, 50.0).expect("valid ratio"),
            strategy: Strategy::EamAsppGap,
            variant: AttentionVariant::Icbam,
            variant_requested: false,
            conv_features: true,
            lr: t.lr,
            wd: t.weight_decay,
            batch: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            out: None,
            jobs: 1,
            c2: 16,
            c_prime: 64,
            augment: t.augment,
            val_fraction: t.validation_fraction,
        }
    }
}

const KEYS: [&str; 17] = [
    "synthetic",
    "data",
    "ratio",
    "strategy",
    "variant",
    "conv_features",
    "lr",
    "wd",
    "batch",
    "epochs",
    "seed",
    "out",
    "jobs",
    "c2",
    "c_prime",
    "augment",
    "val_fraction",
];

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, UsageError> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            UsageError(format!("{}:{}: expected key=value, found `{line}`", origin.display(), no + 1))
        })?;
        let k = k.trim().replace('-', "_");
        if !KEYS.contains(&k.as_str()) {
            return Err(UsageError(format!(
                "{}:{}: unknown key `{k}` (known keys: {})",
                origin.display(),
                no + 1,
                KEYS.join(", ")
            )));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

fn value<T: FromStr>(file: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, UsageError>
where
    T::Err: std::fmt::Display,
{
    file.get(key)
        .map(|v| v.parse::<T>().map_err(|e| UsageError(format!("config key `{key}`: {e}"))))
        .transpose()
}

fn value_with<T>(
    file: &BTreeMap<String, String>,
    key: &str,
    parse: fn(&str) -> Result<T, String>,
) -> Result<Option<T>, UsageError> {
    file.get(key)
        .map(|v| parse(v).map_err(|e| UsageError(format!("config key `{key}`: {e}"))))
        .transpose()
}

impl RunConfig {
    pub fn resolve(flags: &RunFlags) -> Result<Self, UsageError> {
        let file = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
                parse_config_text(&text, path)?
            }
            None => BTreeMap::new(),
        };
        let d = RunConfig::default();
        let file_variant = value_with(&file, "variant", parse_variant)?;
        let cfg = RunConfig {
            synthetic: flags.synthetic.or(value_with(&file, "synthetic", SyntheticSpec::from_str)?),
            data: flags.data.clone().or(value(&file, "data")?),
            ratio: flags.ratio.or(value_with(&file, "ratio", parse_ratio)?).unwrap_or(d.ratio),
            strategy: flags.strategy.or(value_with(&file, "strategy", parse_strategy)?).unwrap_or(d.strategy),
            variant_requested: flags.variant.is_some() || file_variant.is_some(),
            variant: flags.variant.or(file_variant).unwrap_or(d.variant),
            conv_features: if flags.no_conv_features {
                false
            } else {
                value(&file, "conv_features")?.unwrap_or(d.conv_features)
            },
            lr: flags.lr.or(value(&file, "lr")?).unwrap_or(d.lr),
            wd: flags.wd.or(value(&file, "wd")?).unwrap_or(d.wd),
            batch: flags.batch.or(value(&file, "batch")?).unwrap_or(d.batch),
            epochs: flags.epochs.or(value(&file, "epochs")?).unwrap_or(d.epochs),
            seed: flags.seed.or(value(&file, "seed")?).unwrap_or(d.seed),
            out: flags.out.clone().or(value(&file, "out")?),
            jobs: flags.jobs.or(value(&file, "jobs")?).unwrap_or(d.jobs),
            c2: flags.c2.or(value(&file, "c2")?).unwrap_or(d.c2),
            c_prime: flags.c_prime.or(value(&file, "c_prime")?).unwrap_or(d.c_prime),
            augment: if flags.no_augment {
                false
            } else {
                value(&file, "augment")?.unwrap_or(d.augment)
            },
            val_fraction: flags.val_fraction.or(value(&file, "val_fraction")?).unwrap_or(d.val_fraction),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("--lr must be positive, got {}", self.lr));
        }
        if !(self.wd >= 0.0 && self.wd.is_finite()) {
            return bad(format!("--wd must be non-negative, got {}", self.wd));
        }
        if self.batch == 0 {
            return bad("--batch must be at least 1".into());
        }
        if self.jobs == 0 {
            return bad("--jobs must be at least 1".into());
        }
        if self.c2 == 0 || self.c_prime == 0 {
            return bad("--c2 and --c-prime must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("--val-fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.wd,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            augment: self.augment,
            validation_fraction: self.val_fraction,
            freeze_backbone: false,
        }
    }

    pub fn model_config(&self, classes: usize, extent: usize) -> ModelConfig {
        let mut m = ModelConfig::with_widths(classes, extent, self.c2, self.c_prime);
        m.strategy = self.strategy;
        m.eam.variant = self.variant;
        m.eam.include_conv_features = self.conv_features;
        m
    }

    pub fn out_dir(&self) -> Result<&Path, UsageError> {
        self.out
            .as_deref()
            .ok_or_else(|| UsageError("--out DIR is required".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nlr = 0.01\nepochs=7 # trailing\nstrategy=gap\n").unwrap();
        let flags = RunFlags {
            config: Some(path),
            epochs: Some(3),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.strategy, Strategy::Gap);
        assert_eq!(cfg.batch, 16);
        assert!(!cfg.variant_requested);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config_text("learning_rate=1\n", Path::new("x.cfg")).unwrap_err();
        assert!(err.0.contains("learning_rate"));
    }

    #[test]
    fn synthetic_spec_parses() {
        assert_eq!(
            "4,50,64".parse::<SyntheticSpec>().unwrap(),
            SyntheticSpec {
                classes: 4,
                per_class: 50,
                extent: 64
            }
        );
        assert!("4,50".parse::<SyntheticSpec>().is_err());
    }
}
