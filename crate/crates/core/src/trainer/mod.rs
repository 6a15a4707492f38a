//! Small-MLP training harness: every linear layer is one of the three
//! [`LinearKind`] variants, trained with plain minibatch SGD and early
//! stopping on a validation split.

pub mod data;
pub mod mlp;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LinearKind;
use crate::rng;

pub use data::{load_idx_dataset, make_synthetic_dataset, Dataset, SyntheticParams};
pub use mlp::Mlp;

pub const OPTIMIZER: &str = "sgd";
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MnistIdx,
    Synthetic,
}

/// Quantity watched by early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValAccuracy,
    ValLoss,
}

fn default_blk() -> usize {
    32
}

/// Training configuration. The JSON form uses these field names and
/// rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: LinearKind,
    pub p: f64,
    pub hidden_dim: usize,
    /// Number of hidden activations; the MLP has `n_hidden_layers + 1`
    /// linear layers.
    pub n_hidden_layers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    /// Examples used in total; the last 20% become the validation split.
    pub train_subset: usize,
    pub dataset: DatasetKind,
    /// Mask block height (over the batch dimension).
    #[serde(default = "default_blk")]
    pub m_blk: usize,
    /// Mask block width (over the feature dimension).
    #[serde(default = "default_blk")]
    pub k_blk: usize,
    #[serde(default)]
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: LinearKind::Dense,
            p: 0.0,
            hidden_dim: 256,
            n_hidden_layers: 2,
            batch_size: 64,
            learning_rate: 0.05,
            max_epochs: 40,
            patience: 5,
            seed: 0,
            train_subset: 5120,
            dataset: DatasetKind::Synthetic,
            m_blk: 32,
            k_blk: 32,
            monitor: Monitor::ValAccuracy,
        }
    }
}

impl TrainConfig {
    /// Full-size geometry: hidden width 1024, 16,384 examples, 100 epochs,
    /// 128x128 mask blocks.
    pub fn paper_scale(self) -> Self {
        Self {
            hidden_dim: 1024,
            train_subset: 16_384,
            max_epochs: 100,
            batch_size: 128,
            m_blk: 128,
            k_blk: 128,
            ..self
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidRate(self.p));
        }
        if self.hidden_dim == 0 || self.batch_size == 0 || self.m_blk == 0 || self.k_blk == 0 {
            return Err(Error::Config("hidden_dim, batch_size and block sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.variant == LinearKind::SparseDrop && !self.batch_size.is_multiple_of(self.m_blk) {
            return Err(Error::Indivisible {
                dim: "batch_size",
                size: self.batch_size,
                block: self.m_blk,
            });
        }
        Ok(())
    }

    pub fn widths(&self, input_dim: usize, n_classes: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(std::iter::repeat_n(self.hidden_dim, self.n_hidden_layers));
        w.push(n_classes);
        w
    }
}

/// Where the training data comes from when launched from a config.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic(SyntheticParams),
}

impl DataSource {
    pub fn load(&self, limit: usize) -> Result<Dataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx_dataset(images, labels, limit),
            DataSource::Synthetic(params) => SyntheticParams {
                n: limit,
                ..*params
            }
            .generate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Metrics of the checkpoint selected by the early-stopping monitor.
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub train_loss_at_best: f64,
    pub best_epoch: usize,
    /// Mean training loss (dropout active) of the last epoch run.
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub wall_time_seconds: f64,
    pub per_epoch_history: Vec<EpochRecord>,
}

impl TrainReport {
    /// `best_val_loss - train_loss_at_best`.
    pub fn generalisation_gap(&self) -> f64 {
        self.best_val_loss - self.train_loss_at_best
    }

    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_time_seconds: 0.0,
            ..self.clone()
        } == Self {
            wall_time_seconds: 0.0,
            ..other.clone()
        }
    }
}

/// The JSON document written by the `train` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub version: String,
    pub optimizer: String,
    pub config: TrainConfig,
    #[serde(flatten)]
    pub report: TrainReport,
}

impl ReportDocument {
    pub fn new(config: TrainConfig, report: TrainReport) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            optimizer: OPTIMIZER.to_string(),
            config,
            report,
        }
    }
}

/// Splits off the last 20% of the first `train_subset` examples for
/// validation, in file order.
pub fn split_train_val(config: &TrainConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let n = config.train_subset.min(dataset.len());
    let n_val = n / 5;
    if n_val == 0 || n - n_val < config.batch_size {
        return Err(Error::Config(format!(
            "{n} examples are too few for batch size {} with a 20% validation split",
            config.batch_size
        )));
    }
    Ok((dataset.slice(0, n - n_val)?, dataset.slice(n - n_val, n)?))
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let (train_set, val_set) = split_train_val(config, dataset)?;
    train_split(config, &train_set, &val_set)
}

/// Trains on explicit splits.
pub fn train_split(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainReport> {
    config.validate()?;
    let started = Instant::now();
    let widths = config.widths(train_set.dim(), train_set.n_classes);
    let mut model = Mlp::new(config.variant, &widths, config.p, config.m_blk, config.k_blk, config.seed)?;
    let lr = config.learning_rate as f32;
    let batches = train_set.len() / config.batch_size;

    let mut history = Vec::new();
    let mut best: Option<EpochRecord> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=config.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::hash2(config.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let (x, labels) = train_set.gather(&order[b * config.batch_size..(b + 1) * config.batch_size]);
            let loss = model.train_step(&x, &labels, step, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss;
            step += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let (val_loss, val_accuracy) = model.evaluate(&val_set.features, &val_set.labels, EVAL_BATCH)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        };
        history.push(record);
        let improved = match (&best, config.monitor) {
            (None, _) => true,
            (Some(b), Monitor::ValAccuracy) => val_accuracy > b.val_accuracy,
            (Some(b), Monitor::ValLoss) => val_loss < b.val_loss,
        };
        if improved {
            best = Some(record);
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }

    let best = best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    Ok(TrainReport {
        best_val_accuracy: best.val_accuracy,
        best_val_loss: best.val_loss,
        train_loss_at_best: best.train_loss,
        best_epoch: best.epoch,
        final_train_loss: history.last().map_or(f64::NAN, |r| r.train_loss),
        epochs_run: history.len(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        per_epoch_history: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub variant: LinearKind,
    pub p: f64,
    pub seed: u64,
    pub report: TrainReport,
}

/// Aggregate over seeds for one `(variant, p)` cell. Spreads are sample
/// standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: LinearKind,
    pub p: f64,
    pub runs: usize,
    pub mean_val_accuracy: f64,
    pub std_val_accuracy: f64,
    pub mean_val_loss: f64,
    pub std_val_loss: f64,
    pub mean_train_loss_at_best: f64,
    pub mean_wall_time_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub runs: Vec<SweepRun>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl SweepTable {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut keys: Vec<(LinearKind, f64)> = Vec::new();
        for r in &self.runs {
            if !keys.iter().any(|&(v, p)| v == r.variant && p == r.p) {
                keys.push((r.variant, r.p));
            }
        }
        keys.into_iter()
            .map(|(variant, p)| {
                let runs: Vec<&SweepRun> = self.runs.iter().filter(|r| r.variant == variant && r.p == p).collect();
                let col = |f: fn(&TrainReport) -> f64| runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
                let (mean_val_accuracy, std_val_accuracy) = mean_std(&col(|r| r.best_val_accuracy));
                let (mean_val_loss, std_val_loss) = mean_std(&col(|r| r.best_val_loss));
                SweepCell {
                    variant,
                    p,
                    runs: runs.len(),
                    mean_val_accuracy,
                    std_val_accuracy,
                    mean_val_loss,
                    std_val_loss,
                    mean_train_loss_at_best: mean_std(&col(|r| r.train_loss_at_best)).0,
                    mean_wall_time_seconds: mean_std(&col(|r| r.wall_time_seconds)).0,
                }
            })
            .collect()
    }

    /// Best cell for `variant` by mean validation accuracy; ties go to the
    /// lower `p`.
    pub fn best(&self, variant: LinearKind) -> Option<SweepCell> {
        let mut cells: Vec<SweepCell> = self.cells().into_iter().filter(|c| c.variant == variant).collect();
        cells.sort_by(|a, b| a.p.total_cmp(&b.p));
        cells.into_iter().fold(None, |best: Option<SweepCell>, c| match best {
            Some(b) if b.mean_val_accuracy >= c.mean_val_accuracy => Some(b),
            _ => Some(c),
        })
    }

    pub fn runs_for(&self, variant: LinearKind, p: f64) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(move |r| r.variant == variant && r.p == p)
    }
}

/// One run per `(variant, p, seed)`. The dense variant ignores `p` and is
/// run once per seed, recorded with `p = 0`.
pub fn sweep(
    base: &TrainConfig,
    variants: &[LinearKind],
    p_values: &[f64],
    seeds: &[u64],
    dataset: &Dataset,
) -> Result<SweepTable> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(Error::InvalidRate(bad));
    }
    let mut jobs = Vec::new();
    for &variant in variants {
        let ps: Vec<f64> = if variant == LinearKind::Dense {
            vec![0.0]
        } else {
            p_values.to_vec()
        };
        for p in ps {
            for &seed in seeds {
                jobs.push((variant, p, seed));
            }
        }
    }
    let (train_set, val_set) = split_train_val(base, dataset)?;
    let run = |&(variant, p, seed): &(LinearKind, f64, u64)| -> Result<SweepRun> {
        let cfg = TrainConfig {
            variant,
            p,
            seed,
            ..base.clone()
        };
        Ok(SweepRun {
            variant,
            p,
            seed,
            report: train_split(&cfg, &train_set, &val_set)?,
        })
    };
    #[cfg(feature = "parallel")]
    let runs = jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let runs = jobs.iter().map(run).collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { runs })
}

/// Single-seed sweep over all three variants.
pub fn sweep_p(base: &TrainConfig, p_values: &[f64], dataset: &Dataset) -> Result<SweepTable> {
    sweep(base, &LinearKind::ALL, p_values, &[base.seed], dataset)
}
