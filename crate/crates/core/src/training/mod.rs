//! Datasets, augmentation, optimization and evaluation.

pub mod augment;
pub mod data;
pub mod metrics;
pub mod optim;
#[allow(clippy::module_inception)]
pub mod train;

pub use augment::{augment, crop_resize, hflip, CROP_FRACTION};
pub use data::{batch_images, load_dataset, save_dataset, synth_dataset, SceneSample, SYNTH_CLASSES};
pub use metrics::{
    mean_std, metrics_csv, stratified_split, ConfusionMatrix, Metrics, MetricsRow, Split, SplitRatio,
    METRICS_HEADER,
};
pub use optim::{adam_step, AdamState};
pub use train::{
    curves_csv, evaluate, five_split_protocol, run_splits, split_seed, train, EpochRecord, TrainConfig,
    TrainOutcome, CURVES_HEADER, SPLITS,
};
