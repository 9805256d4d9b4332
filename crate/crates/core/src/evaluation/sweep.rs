use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eval_accuracy_grid, AccuracyGrid, GridInputs, GridSample};
use crate::agents::{Decode, Listener, ModelConfig, Speaker};
use crate::error::{Error, Result};
use crate::populations::{Population, PopulationKind};
use crate::training::{replicate_seed, train_speaker, SpeakerTrainConfig, TrainLog};
use crate::vocab::Vocab;
use crate::worldgen::DatasetSplit;

/// Everything fixed across a population-size sweep.
pub struct SweepSetup<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a SpeakerTrainConfig,
    /// Speaker split; its validation tail is val-D.
    pub split: &'a DatasetSplit,
    /// Trained listeners the populations draw from, member 0 first.
    pub pool: &'a [Listener],
    pub val_listeners: &'a [Listener],
    pub vocab: &'a Vocab,
    pub decode: Decode,
    pub seed: u64,
    pub n_seeds: usize,
    /// Run artifacts go in `<dir>/<kind>-<n>-s<i>.*` and training state in
    /// `<dir>/state/`; finished runs found there are loaded, not retrained.
    pub dir: Option<&'a Path>,
    pub jobs: usize,
}

pub struct SpeakerRun {
    pub kind: PopulationKind,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub speaker: Speaker,
    pub log: TrainLog,
    pub sample: GridSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: PopulationKind,
    pub n: usize,
    pub grid: AccuracyGrid,
}

/// `single_l0` ignores `n`; ensembles take the first `n` pool members;
/// dropout runs `n` passes of member 0.
pub fn build_population(kind: PopulationKind, n: usize, pool: &[Listener]) -> Result<Population> {
    let first = pool
        .first()
        .ok_or_else(|| Error::Config("listener pool is empty".into()))?;
    match kind {
        PopulationKind::SingleL0 => Ok(Population::single(first.clone())),
        PopulationKind::Ensemble => {
            if n > pool.len() {
                return Err(Error::Config(format!(
                    "ensemble of {n} needs {n} listeners, pool has {}",
                    pool.len()
                )));
            }
            Population::ensemble(pool[..n].to_vec())
        }
        PopulationKind::Dropout => Population::dropout(first.clone(), n),
    }
}

/// An ensemble of one is the single listener; both map to one run.
pub fn canonical(kind: PopulationKind, n: usize) -> (PopulationKind, usize) {
    match (kind, n) {
        (PopulationKind::SingleL0, _) | (PopulationKind::Ensemble, 1) => (PopulationKind::SingleL0, 1),
        other => other,
    }
}

pub fn run_name(kind: PopulationKind, n: usize, replicate: usize) -> String {
    let (kind, n) = canonical(kind, n);
    format!("{}-{n}-s{replicate}", kind.name())
}

fn load_trained(dir: &Path, name: &str) -> Result<Option<(Speaker, TrainLog)>> {
    let ckpt = dir.join(format!("{name}.ckpt"));
    let log = dir.join(format!("{name}.log.jsonl"));
    if !(ckpt.exists() && log.exists()) {
        return Ok(None);
    }
    Ok(Some((Speaker::load(&ckpt)?, TrainLog::load(&log)?)))
}

/// Reuses a finished speaker from `setup.dir` when present; its grid is
/// read back, or recomputed when only the grid file is missing.
fn run_one(setup: &SweepSetup, kind: PopulationKind, n: usize, replicate: usize) -> Result<SpeakerRun> {
    let (kind, n) = canonical(kind, n);
    let name = run_name(kind, n, replicate);
    let seed = replicate_seed(setup.seed, replicate);
    let pop = build_population(kind, n, setup.pool)?;
    let state = setup.dir.map(|d| d.join("state").join(&name));
    let cached = match setup.dir {
        Some(dir) => load_trained(dir, &name)?,
        None => None,
    };
    let trained = cached.is_some();
    let (speaker, log) = match cached {
        Some((speaker, log)) => {
            if speaker.seed != seed || speaker.config != *setup.model {
                return Err(Error::Invalid(format!("{name} was trained under a different configuration")));
            }
            (speaker, log)
        }
        None => {
            log::info!("training speaker {name}");
            train_speaker(setup.model, setup.train, setup.split, &pop, seed, state.as_deref())?
        }
    };
    let grid_path = setup.dir.map(|d| d.join(format!("{name}.grid.json")));
    let sample = match &grid_path {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        _ => {
            let (train_d, val_d) = setup.split.split_tail(setup.train.val_fraction);
            let inputs = GridInputs {
                train_pop: &pop,
                val_listeners: setup.val_listeners,
                train_games: &train_d,
                val_games: &val_d,
                vocab: setup.vocab,
            };
            eval_accuracy_grid(&speaker, &inputs, setup.decode, seed)?
        }
    };
    if let Some(dir) = setup.dir {
        if !trained {
            speaker.save(&dir.join(format!("{name}.ckpt")))?;
            log.save(&dir.join(format!("{name}.log.jsonl")))?;
        }
        if let Some(p) = &grid_path {
            if !p.exists() {
                crate::agents::write_atomic(p, serde_json::to_string_pretty(&sample)?.as_bytes())?;
            }
        }
        if let Some(state) = state.as_ref().filter(|s| s.exists()) {
            std::fs::remove_dir_all(state).map_err(|e| Error::io(state, e))?;
        }
    }
    Ok(SpeakerRun {
        kind,
        n,
        replicate,
        seed,
        speaker,
        log,
        sample,
    })
}

/// Trains and scores one speaker per `(n, replicate)` and aggregates each
/// size over replicates. Runs use up to `jobs` threads; results do not
/// depend on the thread count.
pub fn population_sweep(
    setup: &SweepSetup,
    kind: PopulationKind,
    sizes: &[usize],
) -> Result<(Vec<SweepPoint>, Vec<SpeakerRun>)> {
    if setup.n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    if let Some(dir) = setup.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let keys: BTreeSet<(PopulationKind, usize)> = sizes.iter().map(|&n| canonical(kind, n)).collect();
    let tasks: Vec<(PopulationKind, usize, usize)> = keys
        .iter()
        .flat_map(|&(k, n)| (0..setup.n_seeds).map(move |r| (k, n, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(k, n, r)| run_one(setup, k, n, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let points = sizes
        .iter()
        .map(|&n| {
            let key = canonical(kind, n);
            let samples: Vec<GridSample> = runs
                .iter()
                .filter(|r| (r.kind, r.n) == key)
                .map(|r| r.sample.clone())
                .collect();
            Ok(SweepPoint {
                kind,
                n,
                grid: AccuracyGrid::from_samples(&samples)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((points, runs))
}
