use serde::{Deserialize, Serialize};

use crate::agents::{Decode, Speaker};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::{token_overlap, Utterance, Vocab};
use crate::worldgen::ReferenceGame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapLevel {
    Low,
    Medium,
    High,
}

impl OverlapLevel {
    pub const ALL: [OverlapLevel; 3] = [OverlapLevel::Low, OverlapLevel::Medium, OverlapLevel::High];

    pub fn name(self) -> &'static str {
        match self {
            OverlapLevel::Low => "low",
            OverlapLevel::Medium => "medium",
            OverlapLevel::High => "high",
        }
    }
}

/// Utterances paired with the index of the game they describe.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapSet {
    pub level: OverlapLevel,
    pub items: Vec<(usize, Utterance)>,
    /// Mean token overlap (percent) of the kept utterances.
    pub mean_overlap: f64,
    /// Utterances drawn before filtering.
    pub drawn: usize,
}

impl OverlapSet {
    fn new(level: OverlapLevel, items: Vec<(usize, Utterance)>, drawn: usize, vocab: &Vocab) -> Self {
        let mean_overlap = if items.is_empty() {
            0.0
        } else {
            items.iter().map(|(_, u)| token_overlap(u, vocab)).sum::<f64>() / items.len() as f64
        };
        Self {
            level,
            items,
            mean_overlap,
            drawn,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Kept fraction of drawn utterances.
    pub fn yield_rate(&self) -> f64 {
        self.items.len() as f64 / self.drawn.max(1) as f64
    }
}

/// Inputs for building the three overlap levels over one game list.
pub struct OverlapSources<'a> {
    pub games: &'a [&'a ReferenceGame],
    pub vocab: &'a Vocab,
    /// Speaker trained against an ensemble (medium level).
    pub ensemble_speaker: Option<&'a Speaker>,
    /// Speaker trained against a single listener (low level).
    pub single_speaker: Option<&'a Speaker>,
    pub max_len: usize,
    pub seed: u64,
    /// Minimum number of zero-overlap utterances for the low level.
    pub min_low: usize,
    /// Sampling rounds over all games for the low level.
    pub max_rounds: usize,
}

/// Builds the utterance set for one level.
///
/// High is the ground-truth captions, medium one sampled utterance per game
/// from the ensemble-trained speaker, low single-listener speaker samples
/// kept only at exactly 0% overlap.
pub fn sample_overlap_utterances(level: OverlapLevel, src: &OverlapSources) -> Result<OverlapSet> {
    let root = RngStream::new(src.seed).derive("eval/overlap");
    match level {
        OverlapLevel::High => {
            let items = src
                .games
                .iter()
                .enumerate()
                .map(|(i, g)| Ok((i, src.vocab.encode(&g.caption, src.max_len)?)))
                .collect::<Result<Vec<_>>>()?;
            let n = items.len();
            Ok(OverlapSet::new(level, items, n, src.vocab))
        }
        OverlapLevel::Medium => {
            let sp = src
                .ensemble_speaker
                .ok_or_else(|| Error::Eval("medium overlap level needs an ensemble-trained speaker".into()))?;
            let utts = sp.utterances(src.games, Decode::SampleHard, 1.0, &mut root.derive("medium"), 128)?;
            let items: Vec<(usize, Utterance)> = utts.into_iter().enumerate().collect();
            let n = items.len();
            Ok(OverlapSet::new(level, items, n, src.vocab))
        }
        OverlapLevel::Low => {
            let sp = src
                .single_speaker
                .ok_or_else(|| Error::Eval("low overlap level needs a single-listener speaker".into()))?;
            let target = src.games.len();
            let mut items = Vec::with_capacity(target);
            let mut drawn = 0;
            for round in 0..src.max_rounds.max(1) {
                let mut rng = root.derive_index("low", round as u64);
                let utts = sp.utterances(src.games, Decode::SampleHard, 1.0, &mut rng, 128)?;
                drawn += utts.len();
                items.extend(
                    utts.into_iter()
                        .enumerate()
                        .filter(|(_, u)| token_overlap(u, src.vocab) == 0.0),
                );
                if items.len() >= target {
                    break;
                }
            }
            items.truncate(target);
            if items.len() < src.min_low {
                return Err(Error::Eval(format!(
                    "only {} of {drawn} sampled utterances had 0% overlap; {} required",
                    items.len(),
                    src.min_low
                )));
            }
            Ok(OverlapSet::new(level, items, drawn, src.vocab))
        }
    }
}
