//! Listener populations: a single listener, an ensemble of independently
//! trained listeners, or one listener under MC dropout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{listener_images, Dropout, Listener, UttInput};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Tape, Var};
use crate::vocab::Utterance;
use crate::worldgen::ReferenceGame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    SingleL0,
    Ensemble,
    Dropout,
}

impl PopulationKind {
    pub fn name(self) -> &'static str {
        match self {
            PopulationKind::SingleL0 => "single_l0",
            PopulationKind::Ensemble => "ensemble",
            PopulationKind::Dropout => "dropout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_l0" | "single" => Ok(PopulationKind::SingleL0),
            "ensemble" => Ok(PopulationKind::Ensemble),
            "dropout" => Ok(PopulationKind::Dropout),
            _ => Err(Error::Config(format!("unknown population kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub kind: PopulationKind,
    pub members: Vec<Listener>,
    /// Ensemble size or number of dropout passes.
    pub n: usize,
}

impl Population {
    pub fn single(listener: Listener) -> Self {
        Self {
            kind: PopulationKind::SingleL0,
            members: vec![listener],
            n: 1,
        }
    }

    pub fn ensemble(members: Vec<Listener>) -> Result<Self> {
        let pop = Self {
            kind: PopulationKind::Ensemble,
            n: members.len(),
            members,
        };
        pop.validate()?;
        Ok(pop)
    }

    pub fn dropout(listener: Listener, passes: usize) -> Result<Self> {
        let pop = Self {
            kind: PopulationKind::Dropout,
            members: vec![listener],
            n: passes,
        };
        pop.validate()?;
        Ok(pop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.n == 0 {
            return Err(Error::Invalid("empty population".into()));
        }
        match self.kind {
            PopulationKind::SingleL0 if self.n != 1 || self.members.len() != 1 => {
                Err(Error::Invalid("single_l0 population must hold exactly one listener".into()))
            }
            PopulationKind::Ensemble if self.members.len() != self.n => Err(Error::Invalid(format!(
                "ensemble of size {} holds {} members",
                self.n,
                self.members.len()
            ))),
            PopulationKind::Dropout if self.members.len() != 1 => {
                Err(Error::Invalid("dropout population must hold exactly one listener".into()))
            }
            PopulationKind::Dropout if self.members[0].config.dropout <= 0.0 => {
                Err(Error::Invalid("dropout population needs a listener with dropout > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of distributions averaged per prediction.
    pub fn passes(&self) -> usize {
        match self.kind {
            PopulationKind::Dropout => self.n,
            _ => self.members.len(),
        }
    }

    /// Content hashes of every member, in member order.
    pub fn member_hashes(&self) -> Vec<String> {
        self.members.iter().map(|m| m.params.content_hash()).collect()
    }

    /// Average target distribution for each game under a hard utterance.
    pub fn prob(
        &self,
        games: &[&ReferenceGame],
        utterances: &[&Utterance],
        rng: &mut RngStream,
    ) -> Result<Vec<Vec<f64>>> {
        let frozen = FrozenPopulation::new(self, games)?;
        let all: Vec<usize> = (0..games.len()).collect();
        let mut out = Vec::with_capacity(games.len());
        for chunk in all.chunks(EVAL_CHUNK) {
            let ids: Vec<&[usize]> = chunk.iter().map(|&i| utterances[i].ids()).collect();
            let mut tape = Tape::new();
            let logits = frozen.member_logits(&mut tape, chunk, &UttInput::Ids(&ids), rng)?;
            out.extend(mean_probs(&tape, &logits));
        }
        Ok(out)
    }

    /// Dropout population with explicit mask seeds, one per pass.
    pub fn prob_with_mask_seeds(
        &self,
        games: &[&ReferenceGame],
        utterances: &[&Utterance],
        seeds: &[u64],
    ) -> Result<Vec<Vec<f64>>> {
        if self.kind != PopulationKind::Dropout || seeds.len() != self.n {
            return Err(Error::Invalid(format!(
                "expected {} mask seeds for a dropout population",
                self.n
            )));
        }
        let member = &self.members[0];
        let per_pass = seeds
            .iter()
            .map(|&s| member.probs(games, utterances, Some(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..games.len())
            .map(|g| {
                let rows: Vec<&[f64]> = per_pass.iter().map(|p| &p[g][..]).collect();
                mean_distribution(&rows)
            })
            .collect())
    }

    /// Entropy (nats) of [`Population::prob`] per game.
    pub fn entropy(
        &self,
        games: &[&ReferenceGame],
        utterances: &[&Utterance],
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        Ok(self.prob(games, utterances, rng)?.iter().map(|p| entropy(p)).collect())
    }
}

const EVAL_CHUNK: usize = 64;

/// A population prepared for repeated scoring of one fixed game list.
///
/// Deterministic members (single and ensemble) have their image embeddings
/// computed once; dropout passes re-encode images with fresh masks.
pub struct FrozenPopulation<'a> {
    pop: &'a Population,
    games: Vec<&'a ReferenceGame>,
    n_images: usize,
    cache: Vec<Vec<f64>>,
}

impl<'a> FrozenPopulation<'a> {
    pub fn new(pop: &'a Population, games: &[&'a ReferenceGame]) -> Result<Self> {
        pop.validate()?;
        let n_images = games
            .first()
            .ok_or_else(|| Error::Invalid("population needs at least one game".into()))?
            .n_images();
        if games.iter().any(|g| g.n_images() != n_images) {
            return Err(Error::Invalid("games must have equal image counts".into()));
        }
        let cache = if pop.kind == PopulationKind::Dropout {
            Vec::new()
        } else {
            let pixels = listener_images(games);
            pop.members
                .iter()
                .map(|m| m.image_embeddings(&pixels, 256, &mut Dropout::off()))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            pop,
            games: games.to_vec(),
            n_images,
            cache,
        })
    }

    pub fn population(&self) -> &Population {
        self.pop
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn game(&self, i: usize) -> &ReferenceGame {
        self.games[i]
    }

    /// Logits `[B, n]` of every member (or dropout pass) for the games at
    /// `batch`. Listener parameters enter the tape frozen.
    pub fn member_logits(
        &self,
        tape: &mut Tape,
        batch: &[usize],
        utt: &UttInput,
        rng: &mut RngStream,
    ) -> Result<Vec<Var>> {
        let n = self.n_images;
        let mut out = Vec::with_capacity(self.pop.passes());
        match self.pop.kind {
            PopulationKind::SingleL0 | PopulationKind::Ensemble => {
                for (member, cache) in self.pop.members.iter().zip(&self.cache) {
                    let h = member.config.hidden_dim;
                    let mut feats = Vec::with_capacity(batch.len() * n * h);
                    for &gi in batch {
                        feats.extend_from_slice(&cache[gi * n * h..(gi + 1) * n * h]);
                    }
                    let bound = member.bind(tape, true);
                    let f = tape.constant(&[batch.len() * n, h], feats)?;
                    let g = member.encode_utterance(tape, &bound, utt, &mut Dropout::off())?;
                    out.push(member.logits(tape, f, g, n)?);
                }
            }
            PopulationKind::Dropout => {
                let member = &self.pop.members[0];
                let h = member.config.hidden_dim;
                let games: Vec<&ReferenceGame> = batch.iter().map(|&i| self.games[i]).collect();
                let pixels = listener_images(&games);
                let bound = member.bind(tape, true);
                for _ in 0..self.pop.n {
                    let mut masks = RngStream::new(rng.next_u64());
                    let mut dropout = Dropout::new(member.config.dropout, &mut masks);
                    let feats = member.image_embeddings(&pixels, 256, &mut dropout)?;
                    let f = tape.constant(&[batch.len() * n, h], feats)?;
                    let g = member.encode_utterance(tape, &bound, utt, &mut dropout)?;
                    out.push(member.logits(tape, f, g, n)?);
                }
            }
        }
        Ok(out)
    }
}

/// Mean of per-member softmax distributions, read off tape values.
pub fn mean_probs(tape: &Tape, logits: &[Var]) -> Vec<Vec<f64>> {
    let Some(first) = logits.first() else {
        return Vec::new();
    };
    let n = tape.shape(*first)[1];
    let rows: Vec<Vec<Vec<f64>>> = logits
        .iter()
        .map(|&l| tape.value(l).chunks(n).map(softmax).collect())
        .collect();
    (0..rows[0].len())
        .map(|b| {
            let dists: Vec<&[f64]> = rows.iter().map(|m| &m[b][..]).collect();
            mean_distribution(&dists)
        })
        .collect()
}

/// Differentiable population distribution `(1/k) Σ softmax(logits_j)`.
pub fn population_prob_var(tape: &mut Tape, logits: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &l in logits {
        let p = tape.softmax(l);
        acc = Some(match acc {
            None => p,
            Some(a) => tape.add(a, p)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Invalid("empty population".into()))?;
    Ok(tape.scale(acc, 1.0 / logits.len() as f64))
}

/// `log((1/k) Σ_j L_j(t_b | u_b))` per game, computed stably as a
/// log-sum-exp over member log-probabilities.
pub fn target_log_prob(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var> {
    let b = targets.len();
    let mut cols = Vec::with_capacity(logits.len());
    for &l in logits {
        let lp = tape.log_softmax(l);
        let picked = tape.pick(lp, targets)?;
        cols.push(tape.reshape(picked, &[b, 1])?);
    }
    if cols.is_empty() {
        return Err(Error::Invalid("empty population".into()));
    }
    if cols.len() == 1 {
        return tape.reshape(cols[0], &[b]);
    }
    // logsumexp(x) = x_0 - log_softmax(x)_0
    let x = tape.concat(&cols)?;
    let ls = tape.log_softmax(x);
    let zero = vec![0; b];
    let x0 = tape.pick(x, &zero)?;
    let ls0 = tape.pick(ls, &zero)?;
    let lse = tape.sub(x0, ls0)?;
    Ok(tape.add_scalar(lse, -(logits.len() as f64).ln()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Elementwise mean of equal-length distributions, taken as
/// `d_0 + sum_j (d_j - d_0) / k` so identical inputs return `d_0` exactly.
pub fn mean_distribution(dists: &[&[f64]]) -> Vec<f64> {
    let Some(first) = dists.first() else {
        return Vec::new();
    };
    let k = dists.len() as f64;
    let mut out = first.to_vec();
    for d in &dists[1..] {
        out.iter_mut().zip(d.iter().zip(first.iter())).for_each(|(o, (p, p0))| *o += (p - p0) / k);
    }
    out
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    crate::tensor::argmax(p)
}

/// On-disk description of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationManifest {
    pub kind: PopulationKind,
    pub n: usize,
    pub members: Vec<ManifestMember>,
    /// Members are cut down to their first `vocab_prefix` embedding rows
    /// after loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_prefix: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub val_accuracy: f64,
    pub content_hash: String,
}

impl PopulationManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::agents::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every member checkpoint and checks its hash.
    pub fn instantiate(&self, manifest_path: &Path) -> Result<Population> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut members = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let path = dir.join(&m.checkpoint);
            let l = Listener::load(&path)?;
            let h = l.params.content_hash();
            if h != m.content_hash {
                return Err(Error::Invalid(format!(
                    "{}: content hash {h} does not match manifest {}",
                    path.display(),
                    m.content_hash
                )));
            }
            members.push(match self.vocab_prefix {
                Some(rows) => l.with_vocab_prefix(rows)?,
                None => l,
            });
        }
        let pop = Population {
            kind: self.kind,
            members,
            n: self.n,
        };
        pop.validate()?;
        Ok(pop)
    }
}
