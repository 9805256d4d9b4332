use super::{
    embedding_table, listener_images, param, table_prefix, zeros, BnMode, ConvEncoder, Dropout, Gru,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{BatchStats, Bound, ParamId, ParamStore, Tape, Var};
use crate::vocab::Utterance;
use crate::worldgen::ReferenceGame;

/// Utterances for a batch of `B` games.
pub enum UttInput<'a> {
    /// Hard token ids per game; each sequence is read in full.
    Ids(&'a [&'a [usize]]),
    /// One `[B, V]` row block per time step (Gumbel-Softmax samples);
    /// game `b` reads its first `lengths[b]` steps.
    Soft { steps: &'a [Var], lengths: &'a [usize] },
}

impl UttInput<'_> {
    fn batch(&self, tape: &Tape) -> usize {
        match self {
            UttInput::Ids(ids) => ids.len(),
            UttInput::Soft { steps, lengths } => {
                steps.first().map_or(lengths.len(), |s| tape.shape(*s)[0])
            }
        }
    }

    fn lengths(&self) -> Vec<usize> {
        match self {
            UttInput::Ids(ids) => ids.iter().map(|s| s.len()).collect(),
            UttInput::Soft { lengths, .. } => lengths.to_vec(),
        }
    }
}

/// `L(t | u) ∝ exp(f(i_t) · g(u))` with a conv image encoder `f` and a GRU
/// language encoder `g`.
#[derive(Debug, Clone)]
pub struct Listener {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    encoder: ConvEncoder,
    proj_w: ParamId,
    proj_b: ParamId,
    embedding: ParamId,
    gru: Gru,
}

impl Listener {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = RngStream::new(seed).derive("listener/init");
        let mut params = ParamStore::new();
        let encoder = ConvEncoder::build(&mut params, &rng, "img", config);
        let fd = config.image_feature_dim();
        let h = config.hidden_dim;
        let proj_w = param(&mut params, &rng, "img.proj.w", &[fd, h], fd);
        let proj_b = zeros(&mut params, "img.proj.b", &[h]);
        let embedding = embedding_table(&mut params, &rng, "lang.embedding", config.vocab_size, config.embed_dim);
        let gru = Gru::build(&mut params, &rng, "lang.gru", config.embed_dim, h, config.gru_layers);
        Ok(Self {
            config: config.clone(),
            seed,
            params,
            encoder,
            proj_w,
            proj_b,
            embedding,
            gru,
        })
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> Bound {
        self.params.bind(tape, frozen)
    }

    /// `pixels: [N, 3, R, R]` to image embeddings `[N, hidden]`.
    pub fn encode_images(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pixels: &[f64],
        bn: BnMode,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let r = self.config.resolution;
        let n = pixels.len() / (3 * r * r);
        if n == 0 || n * 3 * r * r != pixels.len() {
            return Err(Error::shape("listener images", &[pixels.len()], &[3, r, r]));
        }
        let x = tape.constant(&[n, 3, r, r], pixels.to_vec())?;
        let (feat, stats) = self.encoder.forward(tape, &self.params, bound, x, bn, dropout)?;
        let e = tape.matmul(feat, bound[self.proj_w])?;
        Ok((tape.add_row(e, bound[self.proj_b])?, stats))
    }

    /// Final top-layer GRU state `[B, hidden]`; a zero-length utterance
    /// leaves the zero initial state.
    pub fn encode_utterance(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        utt: &UttInput,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let b = utt.batch(tape);
        let lengths = utt.lengths();
        if lengths.len() != b {
            return Err(Error::shape("listener utterance lengths", &[b], &[lengths.len()]));
        }
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let h = self.config.hidden_dim;
        let zero = tape.constant(&[b, h], vec![0.0; b * h])?;
        let mut state = vec![zero; self.config.gru_layers];
        let mut top = zero;
        for t in 0..steps {
            let x = match utt {
                UttInput::Ids(ids) => {
                    let col: Vec<usize> = ids
                        .iter()
                        .map(|s| s.get(t).copied().unwrap_or(self.config.specials.pad))
                        .collect();
                    tape.embedding(bound[self.embedding], &col)?
                }
                UttInput::Soft { steps: rows, .. } => {
                    let row = *rows.get(t).ok_or_else(|| {
                        Error::Invalid(format!("soft utterance has {} steps, need {steps}", rows.len()))
                    })?;
                    tape.matmul(row, bound[self.embedding])?
                }
            };
            let keep: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let all = keep.iter().all(|&k| k == 1.0);
            top = self.gru.step(tape, bound, x, &mut state, (!all).then_some(&keep[..]), dropout)?;
        }
        Ok(top)
    }

    /// Dot-product scores `[B, n]` from image embeddings `[B * n, d]` and
    /// utterance embeddings `[B, d]`.
    pub fn logits(&self, tape: &mut Tape, images: Var, utterances: Var, n_images: usize) -> Result<Var> {
        tape.group_dot(images, utterances, n_images)
    }

    /// Full forward pass returning logits `[B, n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pixels: &[f64],
        n_images: usize,
        utt: &UttInput,
        bn: BnMode,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let (f, stats) = self.encode_images(tape, bound, pixels, bn, dropout)?;
        let g = self.encode_utterance(tape, bound, utt, dropout)?;
        Ok((self.logits(tape, f, g, n_images)?, stats))
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        self.encoder.update_running(&mut self.params, stats);
    }

    /// Eval-mode target distributions for hard utterances, one per game.
    ///
    /// With `dropout_seed` the dropout layers stay active and their masks
    /// come from a stream seeded by it.
    pub fn probs(
        &self,
        games: &[&ReferenceGame],
        utterances: &[&Utterance],
        dropout_seed: Option<u64>,
    ) -> Result<Vec<Vec<f64>>> {
        let n = check_batch(games, utterances.len(), self.config.resolution)?;
        let ids: Vec<&[usize]> = utterances.iter().map(|u| u.ids()).collect();
        let mut rng = dropout_seed.map(RngStream::new);
        let mut dropout = match rng.as_mut() {
            Some(r) => Dropout::new(self.config.dropout, r),
            None => Dropout::off(),
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let pixels = listener_images(games);
        let (logits, _) = self.forward(
            &mut tape,
            &bound,
            &pixels,
            n,
            &UttInput::Ids(&ids),
            BnMode::Eval,
            &mut dropout,
        )?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).chunks(n).map(<[f64]>::to_vec).collect())
    }

    /// Eval-mode image embeddings `[N, hidden]` for frozen use, computed in
    /// chunks of `chunk` images.
    pub fn image_embeddings(&self, pixels: &[f64], chunk: usize, dropout: &mut Dropout) -> Result<Vec<f64>> {
        let per = 3 * self.config.resolution * self.config.resolution;
        let mut out = Vec::with_capacity(pixels.len() / per * self.config.hidden_dim);
        for part in pixels.chunks(chunk.max(1) * per) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, true);
            let (e, _) = self.encode_images(&mut tape, &bound, part, BnMode::Eval, dropout)?;
            out.extend_from_slice(tape.value(e));
        }
        Ok(out)
    }

    /// Copy whose token table keeps only the first `rows` ids.
    ///
    /// Tables are drawn row by row in id order and unused rows never receive
    /// gradient, so this equals a listener built and trained with the
    /// smaller vocabulary.
    pub fn with_vocab_prefix(&self, rows: usize) -> Result<Self> {
        if rows == 0 || rows > self.config.vocab_size {
            return Err(Error::Invalid(format!(
                "vocab prefix {rows} outside 1..={}",
                self.config.vocab_size
            )));
        }
        let mut out = self.clone();
        out.config.vocab_size = rows;
        out.config.validate()?;
        let t = table_prefix(self.params.get(self.embedding), rows);
        *out.params.get_mut(self.embedding) = t;
        Ok(out)
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }
}

/// Checks that every game has the same image count and returns it.
pub(crate) fn check_batch(games: &[&ReferenceGame], n_utt: usize, resolution: usize) -> Result<usize> {
    let n = games
        .first()
        .ok_or_else(|| Error::Invalid("empty game batch".into()))?
        .n_images();
    if games.iter().any(|g| g.n_images() != n) {
        return Err(Error::Invalid("games in a batch must have equal image counts".into()));
    }
    if n_utt != games.len() {
        return Err(Error::shape("utterance batch", &[games.len()], &[n_utt]));
    }
    if n < 2 {
        return Err(Error::Invalid(format!("a game needs at least 2 images, got {n}")));
    }
    if let Some(img) = games.iter().flat_map(|g| &g.images).find(|i| i.resolution != resolution) {
        return Err(Error::Invalid(format!(
            "model expects {resolution}px images, got {}px",
            img.resolution
        )));
    }
    Ok(n)
}
