//! Confusion matrices, split statistics and CSV reports.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `K×K` counts, rows indexed by the true class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_predictions(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let mut m = Self::new(k);
        if truth.len() != predicted.len() {
            return Err(Error::Config(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::Config(format!(
                "class pair ({truth}, {predicted}) outside {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|j| self.get(truth, j)).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Config(format!("cannot merge {}- and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|j| self.get(i, j).to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Summed over all evaluated splits.
    pub confusion: ConfusionMatrix,
    pub overall_accuracy: f64,
    pub per_split: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_split`.
    pub std: f64,
}

impl Metrics {
    pub fn from_splits(splits: &[ConfusionMatrix]) -> Result<Self> {
        let first = splits.first().ok_or_else(|| Error::Config("no splits to summarize".into()))?;
        let mut confusion = ConfusionMatrix::new(first.classes());
        for s in splits {
            confusion.merge(s)?;
        }
        let per_split: Vec<f64> = splits.iter().map(ConfusionMatrix::accuracy).collect();
        let (mean, std) = mean_std(&per_split);
        Ok(Metrics {
            overall_accuracy: confusion.accuracy(),
            confusion,
            per_split,
            mean,
            std,
        })
    }

    /// `mean±std` with six decimals.
    pub fn summary(&self) -> String {
        format!("{:.6}±{:.6}", self.mean, self.std)
    }
}

/// Train:test proportion, written `A:B` (e.g. `20:80`) or as a train
/// fraction in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatio {
    pub train: f64,
    pub test: f64,
}

impl SplitRatio {
    pub fn new(train: f64, test: f64) -> Result<Self> {
        if !(train > 0.0 && test > 0.0 && train.is_finite() && test.is_finite()) {
            return Err(Error::Config(format!("invalid split ratio {train}:{test}")));
        }
        Ok(SplitRatio { train, test })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train / (self.train + self.test)
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.train, self.test)
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid split ratio `{s}`; expected A:B or a fraction in (0,1)"));
        match s.split_once(':') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                SplitRatio::new(a, b).map_err(|_| bad())
            }
            None => {
                let f: f64 = s.trim().parse().map_err(|_| bad())?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(bad());
                }
                SplitRatio::new(f, 1.0 - f)
            }
        }
    }
}

/// Train and test index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class train counts: largest-remainder allocation of
/// `round(N * fraction)` in proportion to class sizes, each clamped to
/// `[1, n_c - 1]`.
fn allocate(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let ideal: Vec<f64> = class_sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).filter(|&c| class_sizes[c] > 0).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let mut assigned: usize = counts.iter().sum();
    for &c in order.iter().cycle().take(order.len()) {
        if assigned >= target {
            break;
        }
        counts[c] += 1;
        assigned += 1;
    }
    for (c, n) in counts.iter_mut().enumerate() {
        if class_sizes[c] > 0 {
            *n = (*n).clamp(1, class_sizes[c] - 1);
        }
    }
    counts
}

/// Seeded stratified split. Every class keeps at least one sample on each
/// side, so every class needs two or more samples.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = (0..k).find(|&c| by_class[c].len() == 1) {
        return Err(Error::Dataset(format!("class {c} has fewer than 2 samples and cannot be stratified")));
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = allocate(&sizes, train_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (members, &n_train) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        split.train.extend_from_slice(&members[..n_train.min(members.len())]);
        split.test.extend_from_slice(&members[n_train.min(members.len())..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub split: usize,
    pub ratio: String,
    pub strategy: String,
    pub variant: String,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "split,ratio,strategy,variant,accuracy";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.split, r.ratio, r.strategy, r.variant, r.accuracy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_accuracy_is_trace_over_total() {
        let m = ConfusionMatrix::from_predictions(3, &[0, 0, 1, 2, 2], &[0, 1, 1, 2, 0]).unwrap();
        assert_eq!(m.total(), 5);
        assert_eq!(m.trace(), 3);
        assert_eq!(m.accuracy(), 0.6);
        assert_eq!(m.row_sum(0), 2);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[0.25; 5]), (0.25, 0.0));
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("20:80".parse::<SplitRatio>().unwrap().train_fraction(), 0.2);
        assert_eq!("0.5".parse::<SplitRatio>().unwrap().train_fraction(), 0.5);
        assert!("0:10".parse::<SplitRatio>().is_err());
        assert!("1.5".parse::<SplitRatio>().is_err());
        assert_eq!("50:50".parse::<SplitRatio>().unwrap().to_string(), "50:50");
    }

    #[test]
    fn split_sizes_at_twenty_eighty() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let s = stratified_split(&labels, 0.2, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (20, 80));
        for c in 0..4 {
            assert_eq!(s.train.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
    }

    #[test]
    fn singleton_class_cannot_stratify() {
        assert!(stratified_split(&[0, 0, 1], 0.5, 0).is_err());
    }
}
