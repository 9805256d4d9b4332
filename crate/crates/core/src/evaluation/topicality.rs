use serde::{Deserialize, Serialize};

use super::{mean_stderr, EmbeddingTable};
use crate::error::{Error, Result};
use crate::training::Aggregate;
use crate::vocab::{Utterance, Vocab};
use crate::worldgen::ReferenceGame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicalityRow {
    pub kind: String,
    /// `d(z_GT, sum of uttered word vectors)`.
    pub sum: Aggregate,
    /// `d(z_GT, vector of the first uttered word)`.
    pub first: Aggregate,
    /// Fraction of looked-up words present in the table; the rest count as
    /// zero vectors.
    pub coverage: f64,
}

struct Lookup<'a> {
    table: &'a EmbeddingTable,
    hits: usize,
    total: usize,
}

impl Lookup<'_> {
    fn add(&mut self, acc: &mut [f64], word: &str) {
        self.total += 1;
        if let Some(v) = self.table.get(word) {
            self.hits += 1;
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Embedding distances between each game's caption and each speaker's
/// utterance for that game, averaged over games. Special tokens are
/// excluded; an utterance with no content words embeds as zero.
pub fn topicality(
    speakers: &[(&str, &[Utterance])],
    games: &[&ReferenceGame],
    vocab: &Vocab,
    table: &EmbeddingTable,
) -> Result<Vec<TopicalityRow>> {
    let d = table.dim();
    let mut rows = Vec::with_capacity(speakers.len());
    for (kind, utts) in speakers {
        if utts.len() != games.len() {
            return Err(Error::Eval(format!("{kind}: one utterance per game is required")));
        }
        let mut look = Lookup {
            table,
            hits: 0,
            total: 0,
        };
        let (mut sums, mut firsts) = (Vec::with_capacity(games.len()), Vec::with_capacity(games.len()));
        for (g, u) in games.iter().zip(utts.iter()) {
            let mut z_gt = vec![0.0; d];
            for w in &g.caption {
                look.add(&mut z_gt, w);
            }
            let words = vocab.decode(u);
            let mut z_sum = vec![0.0; d];
            for w in &words {
                look.add(&mut z_sum, w);
            }
            let mut z_first = vec![0.0; d];
            if let Some(w) = words.first() {
                if let Some(v) = table.get(w) {
                    z_first.copy_from_slice(v);
                }
            }
            sums.push(dist(&z_gt, &z_sum));
            firsts.push(dist(&z_gt, &z_first));
        }
        rows.push(TopicalityRow {
            kind: kind.to_string(),
            sum: mean_stderr(&sums),
            first: mean_stderr(&firsts),
            coverage: look.hits as f64 / look.total.max(1) as f64,
        });
    }
    Ok(rows)
}
