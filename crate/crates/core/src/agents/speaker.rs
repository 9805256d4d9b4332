use super::listener::check_batch;
use super::{embedding_table, param, speaker_images, zeros, BnMode, ConvEncoder, Dropout, Gru, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gumbel_softmax, BatchStats, Bound, ParamId, ParamStore, Tape, Var};
use crate::vocab::Utterance;
use crate::worldgen::ReferenceGame;

/// Logit offset that removes `<pad>` and `<s>` from the output distribution.
const BANNED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    /// Straight-through Gumbel-Softmax rows; gradients reach the speaker.
    SampleSoft,
    /// The same Gumbel sampling with constant one-hot rows.
    SampleHard,
    /// Argmax decoding, lowest id on ties.
    Greedy,
    /// Plain Gumbel-Softmax rows without the straight-through step; the
    /// forward value is smooth in the parameters (used for gradient checks).
    Relaxed,
}

/// Emitted tokens for a batch of `B` games.
#[derive(Debug, Clone)]
pub struct SpeakerOutput {
    /// `[B, V]` row block per emitted step.
    pub steps: Vec<Var>,
    /// Emitted ids per game, one per step.
    pub raw: Vec<Vec<usize>>,
    /// Steps a listener reads: through the first `</s>`, else all.
    pub lengths: Vec<usize>,
}

impl SpeakerOutput {
    pub fn utterances(&self, end_id: usize) -> Vec<Utterance> {
        self.raw.iter().map(|ids| Utterance::from_ids(ids, end_id)).collect()
    }
}

/// `S(u | I) = p_GRU(u | f(i_t), f(i_1), ...)`: the concatenated image
/// embeddings (target first) are projected to every GRU layer's initial state.
#[derive(Debug, Clone)]
pub struct Speaker {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    encoder: ConvEncoder,
    init_w: ParamId,
    init_b: ParamId,
    embedding: ParamId,
    gru: Gru,
    out_w: ParamId,
    out_b: ParamId,
}

impl Speaker {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = RngStream::new(seed).derive("speaker/init");
        let mut params = ParamStore::new();
        let encoder = ConvEncoder::build(&mut params, &rng, "img", config);
        let h = config.hidden_dim;
        let fin = config.n_images * config.image_feature_dim();
        let init_w = param(&mut params, &rng, "init.w", &[fin, config.gru_layers * h], fin);
        let init_b = zeros(&mut params, "init.b", &[config.gru_layers * h]);
        let embedding = embedding_table(&mut params, &rng, "lang.embedding", config.vocab_size, config.embed_dim);
        let gru = Gru::build(&mut params, &rng, "lang.gru", config.embed_dim, h, config.gru_layers);
        let out_w = param(&mut params, &rng, "out.w", &[h, config.vocab_size], h);
        let out_b = zeros(&mut params, "out.b", &[config.vocab_size]);
        Ok(Self {
            config: config.clone(),
            seed,
            params,
            encoder,
            init_w,
            init_b,
            embedding,
            gru,
            out_w,
            out_b,
        })
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> Bound {
        self.params.bind(tape, frozen)
    }

    pub fn output_weight_id(&self) -> ParamId {
        self.out_w
    }

    /// Emits up to `max_len` tokens per game.
    ///
    /// `pixels` holds `B * n_images` images, each game's target first.
    /// Decoding stops early once every game has emitted `</s>`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pixels: &[f64],
        bn: BnMode,
        decode: Decode,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<(SpeakerOutput, Vec<BatchStats>)> {
        let cfg = &self.config;
        let (r, n, h, v) = (cfg.resolution, cfg.n_images, cfg.hidden_dim, cfg.vocab_size);
        let per_game = n * 3 * r * r;
        let b = pixels.len() / per_game;
        if b == 0 || b * per_game != pixels.len() {
            return Err(Error::shape("speaker images", &[pixels.len()], &[n, 3, r, r]));
        }
        let x = tape.constant(&[b * n, 3, r, r], pixels.to_vec())?;
        let (feat, stats) = self.encoder.forward(tape, &self.params, bound, x, bn, &mut Dropout::off())?;
        let joined = tape.reshape(feat, &[b, n * cfg.image_feature_dim()])?;
        let init = tape.matmul(joined, bound[self.init_w])?;
        let init = tape.add_row(init, bound[self.init_b])?;
        let mut state = (0..cfg.gru_layers)
            .map(|l| tape.slice_cols(init, l * h, (l + 1) * h))
            .collect::<Result<Vec<_>>>()?;

        let sp = cfg.specials;
        let mut banned = vec![0.0; v];
        banned[sp.pad] = BANNED;
        if sp.start != sp.end {
            banned[sp.start] = BANNED;
        }
        let banned = tape.constant(&[v], banned)?;

        let mut x = tape.embedding(bound[self.embedding], &vec![sp.start; b])?;
        let mut out = SpeakerOutput {
            steps: Vec::with_capacity(cfg.max_len),
            raw: vec![Vec::with_capacity(cfg.max_len); b],
            lengths: vec![cfg.max_len; b],
        };
        let mut ended = vec![false; b];
        for t in 0..cfg.max_len {
            let top = self.gru.step(tape, bound, x, &mut state, None, &mut Dropout::off())?;
            let logits = tape.matmul(top, bound[self.out_w])?;
            let logits = tape.add_row(logits, bound[self.out_b])?;
            let logits = tape.add_row(logits, banned)?;
            let (row, ids) = match decode {
                Decode::SampleSoft | Decode::SampleHard => {
                    let y = gumbel_softmax(tape, logits, temperature, true, rng)?;
                    let ids = row_argmax(tape.value(y), v);
                    if decode == Decode::SampleSoft {
                        (y, ids)
                    } else {
                        (one_hot(tape, &ids, v)?, ids)
                    }
                }
                Decode::Greedy => {
                    let ids = row_argmax(tape.value(logits), v);
                    (one_hot(tape, &ids, v)?, ids)
                }
                Decode::Relaxed => {
                    let y = gumbel_softmax(tape, logits, temperature, false, rng)?;
                    (y, row_argmax(tape.value(y), v))
                }
            };
            for (gi, &id) in ids.iter().enumerate() {
                out.raw[gi].push(id);
                if !ended[gi] && id == sp.end {
                    ended[gi] = true;
                    out.lengths[gi] = t + 1;
                }
            }
            out.steps.push(row);
            if ended.iter().all(|&e| e) {
                break;
            }
            x = if matches!(decode, Decode::SampleSoft | Decode::Relaxed) {
                tape.matmul(row, bound[self.embedding])?
            } else {
                tape.embedding(bound[self.embedding], &ids)?
            };
        }
        Ok((out, stats))
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        self.encoder.update_running(&mut self.params, stats);
    }

    /// Eval-mode utterances for `games`, decoded in chunks of `chunk`.
    pub fn utterances(
        &self,
        games: &[&ReferenceGame],
        decode: Decode,
        temperature: f64,
        rng: &mut RngStream,
        chunk: usize,
    ) -> Result<Vec<Utterance>> {
        let n = check_batch(games, games.len(), self.config.resolution)?;
        if n != self.config.n_images {
            return Err(Error::Invalid(format!(
                "speaker expects {} images per game, got {n}",
                self.config.n_images
            )));
        }
        let mut out = Vec::with_capacity(games.len());
        for part in games.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, true);
            let pixels = speaker_images(part);
            let (o, _) = self.forward(&mut tape, &bound, &pixels, BnMode::Eval, decode, temperature, rng)?;
            out.extend(o.utterances(self.config.specials.end));
        }
        Ok(out)
    }
}

fn row_argmax(values: &[f64], v: usize) -> Vec<usize> {
    values.chunks(v).map(crate::tensor::argmax).collect()
}

fn one_hot(tape: &mut Tape, ids: &[usize], v: usize) -> Result<Var> {
    let mut data = vec![0.0; ids.len() * v];
    for (r, &i) in ids.iter().enumerate() {
        data[r * v + i] = 1.0;
    }
    tape.constant(&[ids.len(), v], data)
}
