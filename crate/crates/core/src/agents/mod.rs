//! Listener and speaker networks.
//!
//! Both agents share two building blocks: a convolutional image encoder
//! (conv 3x3, batch norm, ReLU, 2x2 max pool per block) and a stacked GRU.

mod checkpoint;
mod listener;
mod speaker;

pub(crate) use checkpoint::{restore_from, write_atomic};
pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use listener::{Listener, UttInput};
pub use speaker::{Decode, Speaker, SpeakerOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{BatchStats, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::worldgen::ReferenceGame;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyperparameters shared by listeners and speakers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub conv_blocks: usize,
    pub filters: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub gru_layers: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Images per game seen by the speaker's hidden-state projection.
    #[serde(default = "default_n_images")]
    pub n_images: usize,
    /// Listener-only; speakers ignore it.
    pub dropout: f64,
    #[serde(default)]
    pub specials: Specials,
}

fn default_n_images() -> usize {
    3
}

/// Ids of `<pad>`, `<s>` and `</s>` in the model's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: usize,
    pub start: usize,
    pub end: usize,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            pad: 0,
            start: 1,
            end: 2,
        }
    }
}

impl Specials {
    pub fn of(vocab: &crate::vocab::Vocab) -> Self {
        Self {
            pad: vocab.pad_id,
            start: vocab.start_id,
            end: vocab.end_id,
        }
    }
}

impl ModelConfig {
    /// 32x32 input, 4 blocks of 16 filters, 64-d embeddings and GRU state.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            resolution: 32,
            conv_blocks: 4,
            filters: 16,
            embed_dim: 64,
            hidden_dim: 64,
            gru_layers: 2,
            max_len: crate::vocab::DEFAULT_MAX_LEN,
            vocab_size,
            n_images: default_n_images(),
            dropout: 0.0,
            specials: Specials::default(),
        }
    }

    /// Full-size architecture: 64x64 input, 64 filters, 512-d embeddings, hidden 100.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            resolution: 64,
            filters: 64,
            embed_dim: 512,
            hidden_dim: 100,
            ..Self::desk(vocab_size)
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    /// Spatial side of the final conv feature map.
    pub fn feature_side(&self) -> usize {
        self.resolution >> self.conv_blocks
    }

    /// Length of the flattened conv output.
    pub fn image_feature_dim(&self) -> usize {
        self.filters * self.feature_side() * self.feature_side()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("conv_blocks", self.conv_blocks),
            ("filters", self.filters),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("gru_layers", self.gru_layers),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if self.n_images < 2 {
            return Err(Error::Config(format!("n_images must be at least 2, got {}", self.n_images)));
        }
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.resolution % (1 << self.conv_blocks) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{} conv blocks",
                self.resolution, self.conv_blocks
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let sp = self.specials;
        if [sp.pad, sp.start, sp.end].iter().any(|&i| i >= self.vocab_size) {
            return Err(Error::Config("special token ids must lie inside the vocabulary".into()));
        }
        Ok(())
    }
}

/// Batch norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and report them for running averages.
    Train,
    /// Fixed affine map from running statistics.
    Eval,
}

/// Dropout masks for one forward pass: active only with a stream and rate > 0.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut RngStream>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut RngStream) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (rate, Some(rng)) = (self.rate, self.rng.as_deref_mut()) else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..tape.value(x).len())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        tape.mask_mul(x, mask)
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights from a per-name stream.
fn uniform_init(rng: &RngStream, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng.derive(name);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape").with_grad()
}

fn param(store: &mut ParamStore, rng: &RngStream, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
    store.add(name, uniform_init(rng, name, shape, fan_in))
}

fn zeros(store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::zeros(shape).with_grad())
}

fn buffer(store: &mut ParamStore, name: &str, shape: &[usize], value: f64) -> ParamId {
    store.add(name, Tensor::filled(shape, value))
}

/// Token table with rows drawn in id order, so a smaller vocabulary's table
/// is a prefix of a larger one built from the same seed.
fn embedding_table(store: &mut ParamStore, rng: &RngStream, name: &str, rows: usize, dim: usize) -> ParamId {
    store.add(name, uniform_init(rng, name, &[rows, dim], 1))
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvEncoder {
    blocks: Vec<ConvBlock>,
}

impl ConvEncoder {
    fn build(store: &mut ParamStore, rng: &RngStream, prefix: &str, cfg: &ModelConfig) -> Self {
        let mut blocks = Vec::with_capacity(cfg.conv_blocks);
        let mut c_in = 3;
        for i in 0..cfg.conv_blocks {
            let p = format!("{prefix}.conv{i}");
            let f = cfg.filters;
            blocks.push(ConvBlock {
                w: param(store, rng, &format!("{p}.w"), &[f, c_in, 3, 3], c_in * 9),
                b: zeros(store, &format!("{p}.b"), &[f]),
                gamma: store.add(format!("{p}.bn.gamma"), Tensor::filled(&[f], 1.0).with_grad()),
                beta: zeros(store, &format!("{p}.bn.beta"), &[f]),
                running_mean: buffer(store, &format!("{p}.bn.running_mean"), &[f], 0.0),
                running_var: buffer(store, &format!("{p}.bn.running_var"), &[f], 1.0),
            });
            c_in = f;
        }
        Self { blocks }
    }

    /// `x: [N, 3, H, W]` to flattened features `[N, F * s * s]`.
    ///
    /// Dropout follows every block but the last.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        x: Var,
        bn: BnMode,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let mut h = x;
        let mut stats = Vec::new();
        let last = self.blocks.len() - 1;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = tape.conv2d(h, bound[blk.w], bound[blk.b], 1, 1)?;
            h = match bn {
                BnMode::Train => {
                    let (y, s) = tape.batch_norm_train(h, bound[blk.gamma], bound[blk.beta], BN_EPS)?;
                    stats.push(s);
                    y
                }
                BnMode::Eval => tape.batch_norm_eval(
                    h,
                    bound[blk.gamma],
                    bound[blk.beta],
                    store.get(blk.running_mean).data(),
                    store.get(blk.running_var).data(),
                    BN_EPS,
                )?,
            };
            h = tape.relu(h);
            h = tape.max_pool2d(h)?;
            if i < last {
                h = dropout.apply(tape, h)?;
            }
        }
        let n = tape.shape(h)[0];
        let d = tape.value(h).len() / n;
        Ok((tape.reshape(h, &[n, d])?, stats))
    }

    /// Folds training-batch statistics into the running averages.
    fn update_running(&self, store: &mut ParamStore, stats: &[BatchStats]) {
        for (blk, s) in self.blocks.iter().zip(stats) {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            let rm = store.get_mut(blk.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = store.get_mut(blk.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct GruLayer {
    w_in: ParamId,
    b_in: ParamId,
    w_hid: ParamId,
    b_hid: ParamId,
}

/// Stacked GRU with gate order (reset, update, candidate).
#[derive(Debug, Clone)]
pub(crate) struct Gru {
    layers: Vec<GruLayer>,
    hidden: usize,
}

impl Gru {
    fn build(store: &mut ParamStore, rng: &RngStream, prefix: &str, input: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                let i = if l == 0 { input } else { hidden };
                GruLayer {
                    w_in: param(store, rng, &format!("{p}.w_in"), &[i, 3 * hidden], hidden),
                    b_in: zeros(store, &format!("{p}.b_in"), &[3 * hidden]),
                    w_hid: param(store, rng, &format!("{p}.w_hid"), &[hidden, 3 * hidden], hidden),
                    b_hid: zeros(store, &format!("{p}.b_hid"), &[3 * hidden]),
                }
            })
            .collect();
        Self { layers, hidden }
    }

    fn cell(&self, tape: &mut Tape, bound: &Bound, layer: usize, x: Var, h: Var) -> Result<Var> {
        let l = &self.layers[layer];
        let hd = self.hidden;
        let gx = tape.matmul(x, bound[l.w_in])?;
        let gx = tape.add_row(gx, bound[l.b_in])?;
        let gh = tape.matmul(h, bound[l.w_hid])?;
        let gh = tape.add_row(gh, bound[l.b_hid])?;
        let rz_x = tape.slice_cols(gx, 0, 2 * hd)?;
        let rz_h = tape.slice_cols(gh, 0, 2 * hd)?;
        let rz = tape.add(rz_x, rz_h)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, hd)?;
        let z = tape.slice_cols(rz, hd, 2 * hd)?;
        let n_x = tape.slice_cols(gx, 2 * hd, 3 * hd)?;
        let n_h = tape.slice_cols(gh, 2 * hd, 3 * hd)?;
        let n_h = tape.mul(r, n_h)?;
        let n = tape.add(n_x, n_h)?;
        let n = tape.tanh(n);
        // h' = (1 - z) * n + z * h
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Advances every layer one step; dropout hits the outputs of all
    /// layers but the last. Returns the top layer's output.
    fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        state: &mut [Var],
        keep: Option<&[f64]>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let mut input = x;
        let last = self.layers.len() - 1;
        for l in 0..self.layers.len() {
            let next = self.cell(tape, bound, l, input, state[l])?;
            state[l] = match keep {
                Some(mask) => tape.blend_rows(next, state[l], mask.to_vec())?,
                None => next,
            };
            input = if l < last {
                dropout.apply(tape, state[l])?
            } else {
                state[l]
            };
        }
        Ok(input)
    }
}

/// Channel-major pixels for a batch of images, `[N, 3, H, W]` flattened.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a crate::worldgen::Image>) -> Vec<f64> {
    let mut out = Vec::new();
    for img in images {
        img.to_chw(&mut out);
    }
    out
}

/// Images of `games` in game order (listener view).
pub fn listener_images(games: &[&ReferenceGame]) -> Vec<f64> {
    image_batch(games.iter().flat_map(|g| g.images.iter()))
}

/// Images of `games` with each target moved to the front (speaker view).
pub fn speaker_images(games: &[&ReferenceGame]) -> Vec<f64> {
    image_batch(games.iter().flat_map(|g| target_first(g).map(|i| &g.images[i])))
}

/// Image order seen by the speaker: target, then distractors in game order.
pub fn target_first(game: &ReferenceGame) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(game.target_index).chain((0..game.n_images()).filter(move |&i| i != game.target_index))
}

/// Leading `rows` rows of an embedding table tensor.
fn table_prefix(t: &Tensor, rows: usize) -> Tensor {
    let d = t.shape()[1];
    let mut out = Tensor::new(vec![rows, d], t.data()[..rows * d].to_vec()).expect("prefix shape");
    out.set_requires_grad(t.requires_grad());
    out
}
