//! Subcommand implementations. Each returns its results so callers other
//! than the binary can inspect them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use eam_core::attention::AttentionVariant;
use eam_core::autodiff::{run_gradcheck_suite, GradCheckConfig, GradCheckReport};
use eam_core::checkpoint::{expect_variant, load_checkpoint, save_checkpoint};
use eam_core::gradcam::{grad_cam, Heatmap};
use eam_core::imageio::{read_ppm, write_pgm, write_ppm, RgbImage};
use eam_core::multiscale::Strategy;
use eam_core::training::{
    curves_csv, evaluate, five_split_protocol, load_dataset, metrics_csv, split_seed, stratified_split,
    synth_dataset, train, ConfusionMatrix, Metrics, MetricsRow, SceneSample, Split, TrainOutcome, SPLITS,
    SYNTH_CLASSES,
};

use crate::config::RunConfig;
use crate::UsageError;

pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub class_names: Vec<String>,
    pub extent: usize,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

pub fn load_source(cfg: &RunConfig) -> Result<Dataset> {
    let (samples, class_names) = match (&cfg.synthetic, &cfg.data) {
        (Some(_), Some(_)) => return Err(UsageError("use either --synthetic or --data, not both".into()).into()),
        (None, None) => return Err(UsageError("a dataset is required: --synthetic K,N,EXT or --data DIR".into()).into()),
        (Some(s), None) => {
            let samples = synth_dataset(s.classes, s.per_class, s.extent, cfg.seed)?;
            let names = SYNTH_CLASSES[..s.classes].iter().map(|n| n.to_string()).collect();
            (samples, names)
        }
        (None, Some(dir)) => load_dataset(dir)?,
    };
    let (h, w) = samples[0].extent();
    if h != w {
        bail!("images must be square, found {h}x{w}");
    }
    Ok(Dataset {
        samples,
        class_names,
        extent: h,
    })
}

/// The train/test split used by `train` and `evaluate`.
pub fn holdout_split(data: &Dataset, cfg: &RunConfig) -> Result<Split> {
    Ok(stratified_split(&data.labels(), cfg.ratio.train_fraction(), split_seed(cfg.seed, 0))?)
}

fn pick(samples: &[SceneSample], idx: &[usize]) -> Vec<SceneSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub struct TrainReport {
    pub outcome: TrainOutcome<f32>,
    pub metrics_csv: String,
    pub files: Vec<PathBuf>,
}

/// Trains one model on the holdout split and writes `model.eamc`,
/// `metrics.csv` and `curves.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let out = cfg.out_dir()?.to_path_buf();
    let data = load_source(cfg)?;
    let split = holdout_split(&data, cfg)?;
    let model_cfg = cfg.model_config(data.classes(), data.extent);
    log::info!(
        "training {} on {} samples ({} held out), {} classes",
        model_cfg.strategy,
        split.train.len(),
        split.test.len(),
        data.classes()
    );
    let outcome = train::<f32>(
        &pick(&data.samples, &split.train),
        &pick(&data.samples, &split.test),
        model_cfg,
        &cfg.train_config(),
    )?;
    prepare_out(&out)?;
    let rows = [MetricsRow {
        split: 0,
        ratio: cfg.ratio.to_string(),
        strategy: cfg.strategy.to_string(),
        variant: cfg.variant.to_string(),
        accuracy: outcome.metrics.overall_accuracy,
    }];
    let metrics = metrics_csv(&rows);
    let files = vec![out.join("model.eamc"), out.join("metrics.csv"), out.join("curves.csv")];
    save_checkpoint(&files[0], &outcome.model, &outcome.store)?;
    write_file(&files[1], &metrics)?;
    write_file(&files[2], curves_csv(&outcome.curve))?;
    print!("{metrics}");
    println!("train_accuracy={:.6}", outcome.train_accuracy);
    println!("confusion (rows = truth):\n{}", outcome.metrics.confusion);
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(TrainReport {
        outcome,
        metrics_csv: metrics,
        files,
    })
}

/// Evaluates a checkpoint on the holdout split, or on every sample.
pub fn cmd_evaluate(cfg: &RunConfig, model_path: &Path, all: bool) -> Result<ConfusionMatrix> {
    let (model, store) = load_checkpoint::<f32>(model_path)?;
    if cfg.variant_requested {
        expect_variant(&model, cfg.variant)?;
    }
    let data = load_source(cfg)?;
    if data.extent != model.config.image_extent || data.classes() != model.config.num_classes {
        bail!(
            "dataset ({} classes, {}x{}) does not match the model ({} classes, {}x{})",
            data.classes(),
            data.extent,
            data.extent,
            model.config.num_classes,
            model.config.image_extent,
            model.config.image_extent
        );
    }
    let idx: Vec<usize> = if all {
        (0..data.samples.len()).collect()
    } else {
        holdout_split(&data, cfg)?.test
    };
    let samples: Vec<&SceneSample> = idx.iter().map(|&i| &data.samples[i]).collect();
    let (loss, confusion) = evaluate(&model, &store, &samples, cfg.batch)?;
    println!("samples={} loss={loss:.6} accuracy={:.6}", samples.len(), confusion.accuracy());
    println!("confusion (rows = truth):\n{confusion}");
    Ok(confusion)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub variant: AttentionVariant,
    pub conv_features: bool,
    pub metrics: Metrics,
}

pub const ABLATION_HEADER: &str = "strategy,variant,conv_features,ratio,split0,split1,split2,split3,split4,mean,std,summary";

pub fn ablation_csv(rows: &[AblationRow], ratio: &str) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let splits: Vec<String> = r.metrics.per_split.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{}",
            r.strategy,
            r.variant,
            if r.conv_features { "w" } else { "w/o" },
            ratio,
            splits.join(","),
            r.metrics.mean,
            r.metrics.std,
            r.metrics.summary()
        );
    }
    out
}

/// Strategy × variant × conv-feature grid under the five-split protocol;
/// writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, strategies: &[Strategy]) -> Result<Vec<AblationRow>> {
    let out = cfg.out_dir()?.to_path_buf();
    let data = load_source(cfg)?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        for variant in [AttentionVariant::Icbam, AttentionVariant::Cbam] {
            for conv_features in [true, false] {
                let cell = RunConfig {
                    strategy,
                    variant,
                    conv_features,
                    ..cfg.clone()
                };
                let model_cfg = cell.model_config(data.classes(), data.extent);
                let metrics = five_split_protocol::<f32>(&data.samples, cfg.ratio, model_cfg, &cell.train_config(), cfg.jobs)?;
                println!(
                    "{strategy} {variant} {} conv features: {}",
                    if conv_features { "with" } else { "without" },
                    metrics.summary()
                );
                rows.push(AblationRow {
                    strategy,
                    variant,
                    conv_features,
                    metrics,
                });
            }
        }
    }
    let mean_of = |s: Strategy| {
        let v: Vec<f64> = rows.iter().filter(|r| r.strategy == s).map(|r| r.metrics.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    if let (Some(full), Some(gap)) = (mean_of(Strategy::EamAsppGap), mean_of(Strategy::Gap)) {
        println!(
            "trend: eam+aspp+gap {full:.6} vs gap {gap:.6} ({})",
            if full >= gap { "eam+aspp+gap >= gap" } else { "eam+aspp+gap < gap" }
        );
    }
    prepare_out(&out)?;
    let csv = ablation_csv(&rows, &cfg.ratio.to_string());
    let path = out.join("ablation.csv");
    write_file(&path, &csv)?;
    println!("wrote {} ({} rows over {SPLITS} splits each)", path.display(), rows.len());
    Ok(rows)
}

/// Runs the finite-difference suite; the caller decides the exit status.
pub fn cmd_gradcheck(op: Option<&str>, tol: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let cfg = match tol {
        Some(t) if !(t > 0.0 && t.is_finite()) => {
            return Err(UsageError(format!("--tol must be positive, got {t}")).into());
        }
        Some(t) => GradCheckConfig::with_tolerance(t),
        None => GradCheckConfig::default(),
    };
    let reports = run_gradcheck_suite(op, &cfg).map_err(|e| match e {
        eam_core::Error::Config(m) => anyhow::Error::from(UsageError(m)),
        other => other.into(),
    })?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!(
        "{} of {} checks passed (tol_rel {:e}, tol_abs {:e})",
        reports.len() - failed,
        reports.len(),
        cfg.tol_rel,
        cfg.tol_abs
    );
    Ok(reports)
}

/// `0.5 * image + 0.5 * heatmap` in the red channel, `0.5 * image` elsewhere.
pub fn overlay(image: &RgbImage, heat: &Heatmap) -> RgbImage {
    let pixels = image
        .pixels
        .chunks(3)
        .zip(heat.to_u8())
        .flat_map(|(px, h)| {
            let half = |v: u8| v as f64 * 0.5;
            [
                (half(px[0]) + half(h)).round() as u8,
                half(px[1]).round() as u8,
                half(px[2]).round() as u8,
            ]
        })
        .collect();
    RgbImage {
        width: image.width,
        height: image.height,
        pixels,
    }
}

/// Writes `heatmap.pgm` and `overlay.ppm` into `out`.
pub fn cmd_gradcam(model_path: &Path, image_path: &Path, class: usize, level: usize, out: &Path) -> Result<Heatmap> {
    let (model, store) = load_checkpoint::<f32>(model_path)?;
    if class >= model.config.num_classes {
        return Err(UsageError(format!(
            "--class {class} out of range for {} classes",
            model.config.num_classes
        ))
        .into());
    }
    if !(2..=5).contains(&level) {
        return Err(UsageError(format!("--level must be in 2..=5, got {level}")).into());
    }
    let image = read_ppm(image_path)?;
    let e = model.config.image_extent;
    if image.width != e || image.height != e {
        bail!("image is {}x{}, the model expects {e}x{e}", image.width, image.height);
    }
    let sample = SceneSample::from_rgb(&image, 0);
    let heat = grad_cam(&model, &store, &sample.image, class, level)?;
    prepare_out(out)?;
    let heat_path = out.join("heatmap.pgm");
    let overlay_path = out.join("overlay.ppm");
    write_pgm(&heat_path, heat.width, heat.height, &heat.to_u8())?;
    write_ppm(&overlay_path, &overlay(&image, &heat))?;
    println!("wrote {}", heat_path.display());
    println!("wrote {}", overlay_path.display());
    Ok(heat)
}
