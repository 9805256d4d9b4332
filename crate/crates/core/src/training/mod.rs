//! Listener pretraining, speaker training against a frozen population, and
//! seed replication.

mod listener;
mod speaker;
mod state;

pub use listener::{caption_utterances, listener_accuracy, retry_seed, train_listener, train_listener_gated, ListenerOutcome};
pub use speaker::{population_accuracy, train_speaker};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListenerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the split held out for validation, taken from its tail.
    pub val_fraction: f64,
    /// Minimum train and validation accuracy for admission.
    pub gate: f64,
    /// Fresh-seed attempts after a gate failure.
    pub max_retries: usize,
}

impl Default for ListenerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            val_fraction: 0.1,
            gate: 0.90,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gumbel-Softmax temperature.
    pub temperature: f64,
    pub val_fraction: f64,
}

impl Default for SpeakerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.001,
            temperature: 1.0,
            val_fraction: 0.1,
        }
    }
}

fn check_common(epochs: usize, batch_size: usize, lr: f64, val_fraction: f64) -> Result<()> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    Ok(())
}

impl ListenerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.epochs, self.batch_size, self.lr, self.val_fraction)
    }
}

impl SpeakerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.epochs, self.batch_size, self.lr, self.val_fraction)?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the training batches as they were seen.
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Equality of everything except wall-clock times.
    pub fn same_metrics(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.epoch, a.loss, a.train_acc, a.val_acc) == (b.epoch, b.loss, b.train_acc, b.val_acc)
            })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::agents::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Mean and standard error `s / sqrt(k)` with the sample deviation `s`.
///
/// A single value has standard error 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let k = values.len();
    if k == 0 {
        return Aggregate {
            mean: f64::NAN,
            stderr: f64::NAN,
            n: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let stderr = if k > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        var.sqrt() / (k as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, stderr, n: k }
}

/// Per-seed seed for replicate `i` of a run seeded with `base`.
pub fn replicate_seed(base: u64, i: usize) -> u64 {
    crate::rng::RngStream::new(base).derive_index("replicate", i as u64).next_u64()
}

/// Runs `job` once per replicate seed and aggregates each named metric.
pub fn run_replicates<F>(base_seed: u64, n_seeds: usize, mut job: F) -> Result<BTreeMap<String, Aggregate>>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..n_seeds {
        for (k, v) in job(replicate_seed(base_seed, i))? {
            columns.entry(k).or_default().push(v);
        }
    }
    Ok(columns.into_iter().map(|(k, v)| (k, aggregate(&v))).collect())
}

/// Fraction of rows whose argmax (lowest index on ties) equals the target.
pub fn accuracy(probs: &[Vec<f64>], targets: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(targets)
        .filter(|(p, &t)| crate::populations::argmax(p) == t)
        .count();
    hits as f64 / probs.len() as f64
}

fn check_loss(value: f64, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}
