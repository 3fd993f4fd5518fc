//! Mini-batch training, evaluation and the five-split protocol.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::multiscale::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Element;

use super::augment::augment;
use super::data::{batch_images, SceneSample};
use super::metrics::{stratified_split, ConfusionMatrix, Metrics, Split, SplitRatio};
use super::optim::{adam_step, AdamState};

/// Number of splits in the evaluation protocol.
pub const SPLITS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Share of the training split held out for the validation curve.
    pub validation_fraction: f64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            augment: true,
            validation_fraction: 0.1,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be finite and non-negative", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc";

pub fn curves_csv(curve: &[EpochRecord]) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for r in curve {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    /// Held-out metrics of this run.
    pub metrics: Metrics,
    /// Accuracy on the (unaugmented) training samples after the last epoch.
    pub train_accuracy: f64,
    pub curve: Vec<EpochRecord>,
    /// Loss of the first mini-batch before any update.
    pub initial_loss: f64,
}

/// Mean loss and confusion matrix of `model` over `samples`.
pub fn evaluate<T: Element>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[&SceneSample],
    batch_size: usize,
) -> Result<(f64, ConfusionMatrix)> {
    let k = model.config.num_classes;
    let mut confusion = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let images = batch_images::<T>(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let logits = model.logits(store, &images)?;
        loss_sum += crate::ops::cross_entropy(&logits, &labels)?.to_f64_lossy() * chunk.len() as f64;
        for (&t, p) in labels.iter().zip(crate::ops::argmax_rows(&logits)) {
            confusion.record(t, p)?;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((loss_sum / n, confusion))
}

fn check_samples(samples: &[SceneSample], cfg: &ModelConfig, what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.label >= cfg.num_classes {
            return Err(Error::Dataset(format!(
                "{what} sample {i}: label {} outside {} classes",
                s.label, cfg.num_classes
            )));
        }
        let shape = s.image.shape();
        if (shape.n, shape.c, shape.h, shape.w) != (1, cfg.backbone.in_channels, cfg.image_extent, cfg.image_extent) {
            return Err(Error::Dataset(format!(
                "{what} sample {i}: image shape {shape} does not match a {}-channel {}x{} model input",
                cfg.backbone.in_channels, cfg.image_extent, cfg.image_extent
            )));
        }
    }
    Ok(())
}

/// Carves a stratified validation subset out of `train`; classes too small
/// to spare a sample stay entirely in training.
fn validation_split(train: &[SceneSample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..train.len()).collect();
    if fraction <= 0.0 {
        return (all, Vec::new());
    }
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let mut keep = Vec::new();
    let mut val = Vec::new();
    let eligible: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() >= 2)
        .collect();
    if let Ok(Split { train: t, test: v }) =
        stratified_split(&eligible.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 1.0 - fraction, seed)
    {
        keep.extend(t.iter().map(|&j| eligible[j]));
        val.extend(v.iter().map(|&j| eligible[j]));
    } else {
        keep.extend(eligible.iter().copied());
    }
    keep.extend(all.iter().copied().filter(|i| !eligible.contains(i)));
    keep.sort_unstable();
    (keep, val)
}

/// Trains a fresh model on `train_set` and evaluates it on `test_set`.
pub fn train<T: Element>(
    train_set: &[SceneSample],
    test_set: &[SceneSample],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut present: Vec<usize> = train_set.iter().map(|s| s.label).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Dataset("training set needs at least 2 classes".into()));
    }
    check_samples(train_set, &model_cfg, "training")?;
    check_samples(test_set, &model_cfg, "test")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = Model::new(model_cfg, &mut store, &mut rng)?;
    if cfg.freeze_backbone {
        store.freeze_prefix("backbone.");
    }
    let mut adam = AdamState::new(&store);

    let (fit_idx, val_idx) = validation_split(train_set, cfg.validation_fraction, cfg.seed ^ 0x5eed);
    let val: Vec<&SceneSample> = val_idx.iter().map(|&i| &train_set[i]).collect();
    let mut order = fit_idx.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i], &mut rng)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SceneSample> = batch.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let x = g.constant(batch_images::<T>(&refs)?);
            let out = model.forward(&mut g, &store, x)?;
            let loss_var = g.cross_entropy(out.logits, &labels)?;
            let loss = g.value(loss_var).data()[0].to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            initial_loss.get_or_insert(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += crate::ops::argmax_rows(g.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, t)| p == t)
                .count();
            let grads = g.backward(loss_var)?;
            store.zero_grads();
            grads.accumulate_into(&mut store)?;
            adam_step(&mut store, &mut adam, cfg.lr, cfg.weight_decay).map_err(|e| match e {
                Error::NonFiniteGradient(param) => Error::DivergedGradient { epoch, param },
                other => other,
            })?;
        }
        let n = order.len() as f64;
        let (val_loss, val_conf) = if val.is_empty() {
            (f64::NAN, ConfusionMatrix::new(model_cfg.num_classes))
        } else {
            evaluate(&model, &store, &val, cfg.batch_size)?
        };
        if !val_loss.is_finite() && !val.is_empty() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc: if val.is_empty() { f64::NAN } else { val_conf.accuracy() },
        };
        log::debug!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        curve.push(record);
    }

    let fit: Vec<&SceneSample> = fit_idx.iter().map(|&i| &train_set[i]).collect();
    let (_, train_conf) = evaluate(&model, &store, &fit, cfg.batch_size)?;
    let test: Vec<&SceneSample> = test_set.iter().collect();
    let (_, test_conf) = evaluate(&model, &store, &test, cfg.batch_size)?;
    let initial_loss = match initial_loss {
        Some(l) => l,
        None => evaluate(&model, &store, &fit, cfg.batch_size)?.0,
    };
    Ok(TrainOutcome {
        model,
        store,
        metrics: Metrics::from_splits(&[test_conf])?,
        train_accuracy: train_conf.accuracy(),
        curve,
        initial_loss,
    })
}

/// Seed of split `index` under base seed `seed`.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Runs `evaluate_split(index, split)` on five seeded stratified splits,
/// spreading them over `jobs` threads. Results are ordered by split index.
pub fn run_splits<F>(labels: &[usize], ratio: SplitRatio, seed: u64, jobs: usize, evaluate_split: F) -> Result<Metrics>
where
    F: Fn(usize, &Split) -> Result<ConfusionMatrix> + Sync,
{
    let splits: Vec<Split> = (0..SPLITS)
        .map(|i| stratified_split(labels, ratio.train_fraction(), split_seed(seed, i)))
        .collect::<Result<_>>()?;
    let jobs = jobs.clamp(1, SPLITS);
    let mut results: Vec<Option<Result<ConfusionMatrix>>> = (0..SPLITS).map(|_| None).collect();
    if jobs == 1 {
        for (i, s) in splits.iter().enumerate() {
            results[i] = Some(evaluate_split(i, s));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|worker| {
                    let splits = &splits;
                    let f = &evaluate_split;
                    scope.spawn(move || {
                        (worker..SPLITS)
                            .step_by(jobs)
                            .map(|i| (i, f(i, &splits[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("split worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let confusions: Vec<ConfusionMatrix> = results
        .into_iter()
        .map(|r| r.expect("every split evaluated"))
        .collect::<Result<_>>()?;
    Metrics::from_splits(&confusions)
}

/// Trains and evaluates one model per split.
pub fn five_split_protocol<T: Element>(
    samples: &[SceneSample],
    ratio: SplitRatio,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Metrics> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    run_splits(&labels, ratio, cfg.seed, jobs, |i, split| {
        let pick = |idx: &[usize]| idx.iter().map(|&j| samples[j].clone()).collect::<Vec<_>>();
        let run_cfg = TrainConfig {
            seed: split_seed(cfg.seed, i),
            ..cfg.clone()
        };
        let outcome = train::<T>(&pick(&split.train), &pick(&split.test), model_cfg, &run_cfg)?;
        Ok(outcome.metrics.confusion)
    })
}
