use serde::{Deserialize, Serialize};

use super::mean_stderr;
use crate::agents::{Decode, Listener, Speaker};
use crate::error::{Error, Result};
use crate::populations::{argmax, Population};
use crate::rng::RngStream;
use crate::training::{aggregate, Aggregate};
use crate::vocab::{token_overlap, Utterance, Vocab};
use crate::worldgen::ReferenceGame;

/// What a speaker is scored against.
pub struct GridInputs<'a> {
    pub train_pop: &'a Population,
    /// Held-out listeners; val-L accuracy is their mean.
    pub val_listeners: &'a [Listener],
    pub train_games: &'a [&'a ReferenceGame],
    pub val_games: &'a [&'a ReferenceGame],
    pub vocab: &'a Vocab,
}

/// One speaker's grid. Each cell carries a per-game standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSample {
    pub train_l_train_d: Aggregate,
    pub train_l_val_d: Aggregate,
    pub val_l_train_d: Aggregate,
    pub val_l_val_d: Aggregate,
    /// Percent of content tokens that are domain tokens, on val-D utterances.
    pub overlap: Aggregate,
}

impl GridSample {
    pub fn cells(&self) -> [(&'static str, Aggregate); 4] {
        [
            ("train_L/train_D", self.train_l_train_d),
            ("train_L/val_D", self.train_l_val_d),
            ("val_L/train_D", self.val_l_train_d),
            ("val_L/val_D", self.val_l_val_d),
        ]
    }
}

/// Grid averaged over seeds. With one seed the per-game errors are kept;
/// otherwise each cell's error is the across-seed `s / sqrt(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub train_l_train_d: Aggregate,
    pub train_l_val_d: Aggregate,
    pub val_l_train_d: Aggregate,
    pub val_l_val_d: Aggregate,
    pub overlap: Aggregate,
    pub seeds: usize,
}

impl AccuracyGrid {
    pub fn from_samples(samples: &[GridSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Eval("accuracy grid needs at least one sample".into()))?;
        if samples.len() == 1 {
            return Ok(Self {
                train_l_train_d: first.train_l_train_d,
                train_l_val_d: first.train_l_val_d,
                val_l_train_d: first.val_l_train_d,
                val_l_val_d: first.val_l_val_d,
                overlap: first.overlap,
                seeds: 1,
            });
        }
        let over = |f: fn(&GridSample) -> Aggregate| {
            let v: Vec<f64> = samples.iter().map(|s| f(s).mean).collect();
            aggregate(&v)
        };
        Ok(Self {
            train_l_train_d: over(|s| s.train_l_train_d),
            train_l_val_d: over(|s| s.train_l_val_d),
            val_l_train_d: over(|s| s.val_l_train_d),
            val_l_val_d: over(|s| s.val_l_val_d),
            overlap: over(|s| s.overlap),
            seeds: samples.len(),
        })
    }

    pub fn cells(&self) -> [(&'static str, Aggregate); 4] {
        [
            ("train_L/train_D", self.train_l_train_d),
            ("train_L/val_D", self.train_l_val_d),
            ("val_L/train_D", self.val_l_train_d),
            ("val_L/val_D", self.val_l_val_d),
        ]
    }
}

fn correct(probs: &[Vec<f64>], games: &[&ReferenceGame]) -> Vec<f64> {
    probs
        .iter()
        .zip(games)
        .map(|(p, g)| (argmax(p) == g.target_index) as u8 as f64)
        .collect()
}

fn check_disjoint(inputs: &GridInputs) -> Result<()> {
    if inputs.val_listeners.is_empty() {
        return Err(Error::Eval("at least one validation listener is required".into()));
    }
    let train = inputs.train_pop.member_hashes();
    for (i, v) in inputs.val_listeners.iter().enumerate() {
        if train.contains(&v.params.content_hash()) {
            return Err(Error::Eval(format!(
                "validation listener {i} is also a member of the training population"
            )));
        }
    }
    Ok(())
}

/// Scores fixed utterances (one per game) on all four cells.
pub fn grid_from_utterances(
    inputs: &GridInputs,
    train_utts: &[Utterance],
    val_utts: &[Utterance],
    seed: u64,
) -> Result<GridSample> {
    check_disjoint(inputs)?;
    if train_utts.len() != inputs.train_games.len() || val_utts.len() != inputs.val_games.len() {
        return Err(Error::Eval("one utterance per game is required".into()));
    }
    let root = RngStream::new(seed).derive("eval/grid");
    let score_pop = |games: &[&ReferenceGame], utts: &[Utterance], label: &str| -> Result<Vec<f64>> {
        let refs: Vec<&Utterance> = utts.iter().collect();
        let p = inputs.train_pop.prob(games, &refs, &mut root.derive(label))?;
        Ok(correct(&p, games))
    };
    let score_val = |games: &[&ReferenceGame], utts: &[Utterance]| -> Result<Vec<f64>> {
        let refs: Vec<&Utterance> = utts.iter().collect();
        let mut acc = vec![0.0; games.len()];
        for l in inputs.val_listeners {
            let p = l.probs(games, &refs, None)?;
            acc.iter_mut().zip(correct(&p, games)).for_each(|(a, c)| *a += c);
        }
        let k = inputs.val_listeners.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    };
    let overlaps: Vec<f64> = val_utts.iter().map(|u| token_overlap(u, inputs.vocab)).collect();
    Ok(GridSample {
        train_l_train_d: mean_stderr(&score_pop(inputs.train_games, train_utts, "train_d")?),
        train_l_val_d: mean_stderr(&score_pop(inputs.val_games, val_utts, "val_d")?),
        val_l_train_d: mean_stderr(&score_val(inputs.train_games, train_utts)?),
        val_l_val_d: mean_stderr(&score_val(inputs.val_games, val_utts)?),
        overlap: mean_stderr(&overlaps),
    })
}

/// Decodes one utterance per game and scores the grid.
pub fn eval_accuracy_grid(speaker: &Speaker, inputs: &GridInputs, decode: Decode, seed: u64) -> Result<GridSample> {
    let root = RngStream::new(seed).derive("eval/decode");
    let train = speaker.utterances(inputs.train_games, decode, 1.0, &mut root.derive("train_d"), 128)?;
    let val = speaker.utterances(inputs.val_games, decode, 1.0, &mut root.derive("val_d"), 128)?;
    grid_from_utterances(inputs, &train, &val, seed)
}
