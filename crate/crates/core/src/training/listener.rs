use std::path::Path;
use std::time::Instant;

use super::{accuracy, check_loss, state, EpochRecord, ListenerTrainConfig, TrainLog};
use crate::agents::{listener_images, BnMode, Dropout, Listener, ModelConfig, UttInput};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{AdamConfig, AdamState, Tape};
use crate::vocab::{Utterance, Vocab};
use crate::worldgen::{DatasetSplit, ReferenceGame};

/// Caption utterances of `games`, each terminated by `</s>` when it fits.
pub fn caption_utterances(games: &[&ReferenceGame], vocab: &Vocab, max_len: usize) -> Result<Vec<Utterance>> {
    games.iter().map(|g| vocab.encode(&g.caption, max_len)).collect()
}

/// Eval-mode accuracy of `listener` on ground-truth captions.
pub fn listener_accuracy(listener: &Listener, games: &[&ReferenceGame], vocab: &Vocab) -> Result<f64> {
    let utts = caption_utterances(games, vocab, listener.config.max_len)?;
    let mut correct = 0usize;
    for (gs, us) in games.chunks(128).zip(utts.chunks(128)) {
        let refs: Vec<&Utterance> = us.iter().collect();
        let p = listener.probs(gs, &refs, None)?;
        let t: Vec<usize> = gs.iter().map(|g| g.target_index).collect();
        correct += (accuracy(&p, &t) * gs.len() as f64).round() as usize;
    }
    Ok(correct as f64 / games.len().max(1) as f64)
}

fn check_vocab(model: &ModelConfig, vocab: &Vocab) -> Result<()> {
    if model.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab size {} differs from vocabulary size {}",
            model.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

/// Trains a listener on ground-truth captions with cross-entropy.
///
/// With `state_dir`, progress is saved after every epoch and an existing
/// state for the same run is resumed, so an interrupted run continues to
/// the same result as an uninterrupted one.
pub fn train_listener(
    model: &ModelConfig,
    cfg: &ListenerTrainConfig,
    split: &DatasetSplit,
    vocab: &Vocab,
    seed: u64,
    state_dir: Option<&Path>,
) -> Result<(Listener, TrainLog)> {
    cfg.validate()?;
    check_vocab(model, vocab)?;
    let (train, val) = split.split_tail(cfg.val_fraction);
    if train.is_empty() {
        return Err(Error::Invalid("listener training split is empty".into()));
    }
    let n = split.n_images();
    let utts = caption_utterances(&train, vocab, model.max_len)?;
    let mut listener = Listener::build(model, seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &listener.params);
    let mut log = TrainLog::default();
    let mut start = 0;

    let fp = state::fingerprint(&serde_json::json!({
        "model": model,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "val_fraction": cfg.val_fraction,
        "data": split.content_hash(),
        "seed": seed,
    }));
    if let Some(dir) = state_dir {
        if let Some(r) = state::load(dir, "listener", &fp, &mut listener.params)? {
            start = r.epochs_done;
            adam = r.adam;
            log = r.log;
        }
    }

    let root = RngStream::new(seed).derive("listener/train");
    for epoch in start..cfg.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.derive_index("shuffle", epoch as u64).shuffle(&mut order);
        let mut masks = root.derive_index("dropout", epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let games: Vec<&ReferenceGame> = batch.iter().map(|&i| train[i]).collect();
            let ids: Vec<&[usize]> = batch.iter().map(|&i| utts[i].ids()).collect();
            let targets: Vec<usize> = games.iter().map(|g| g.target_index).collect();
            let mut tape = Tape::new();
            let bound = listener.bind(&mut tape, false);
            let mut dropout = Dropout::new(model.dropout, &mut masks);
            let (logits, stats) = listener.forward(
                &mut tape,
                &bound,
                &listener_images(&games),
                n,
                &UttInput::Ids(&ids),
                BnMode::Train,
                &mut dropout,
            )?;
            let lp = tape.log_softmax(logits);
            let picked = tape.pick(lp, &targets)?;
            let mean = tape.mean(picked);
            let loss = tape.scale(mean, -1.0);
            let value = tape.value(loss)[0];
            check_loss(value, epoch, bi)?;
            for (row, &t) in tape.value(logits).chunks(n).zip(&targets) {
                correct += (crate::populations::argmax(row) == t) as usize;
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;
            listener.params.collect_grads(&tape, &bound);
            adam.step(&mut listener.params)?;
            listener.update_running_stats(&stats);
        }
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            listener_accuracy(&listener, &val, vocab)?
        };
        log.records.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            wall_secs: clock.elapsed().as_secs_f64(),
        });
        log::info!(
            "listener seed {seed} epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            loss_sum / train.len() as f64,
            correct as f64 / train.len() as f64,
            val_acc
        );
        if let Some(dir) = state_dir {
            state::save(dir, "listener", model, seed, &fp, &listener.params, &adam, epoch + 1, &log)?;
        }
    }
    Ok((listener, log))
}

#[derive(Debug, Clone)]
pub struct ListenerOutcome {
    pub listener: Listener,
    pub log: TrainLog,
    /// Eval-mode accuracy over the training portion after the last epoch.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Seed of the admitted attempt.
    pub seed: u64,
    pub attempts: usize,
}

/// Seed of retry `k` (0 is the original seed).
pub fn retry_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        RngStream::new(seed).derive_index("retry", k as u64).next_u64()
    }
}

/// Trains until a listener reaches `cfg.gate` on both train and validation
/// captions, retrying on fresh seeds up to `cfg.max_retries` times.
pub fn train_listener_gated(
    model: &ModelConfig,
    cfg: &ListenerTrainConfig,
    split: &DatasetSplit,
    vocab: &Vocab,
    seed: u64,
    state_dir: Option<&Path>,
) -> Result<ListenerOutcome> {
    let (train, val) = split.split_tail(cfg.val_fraction);
    let mut failures = Vec::new();
    for k in 0..=cfg.max_retries {
        let s = retry_seed(seed, k);
        let dir = state_dir.map(|d| d.join(format!("attempt{k}")));
        let (listener, log) = train_listener(model, cfg, split, vocab, s, dir.as_deref())?;
        let train_acc = listener_accuracy(&listener, &train, vocab)?;
        let val_acc = if val.is_empty() {
            train_acc
        } else {
            listener_accuracy(&listener, &val, vocab)?
        };
        if train_acc >= cfg.gate && val_acc >= cfg.gate {
            return Ok(ListenerOutcome {
                listener,
                log,
                train_acc,
                val_acc,
                seed: s,
                attempts: k + 1,
            });
        }
        log::warn!("listener seed {s} below gate: train {train_acc:.3}, val {val_acc:.3}");
        failures.push(format!("seed {s}: train {train_acc:.3}, val {val_acc:.3}"));
    }
    Err(Error::Gate(format!(
        "no listener reached {:.2} after {} attempts ({})",
        cfg.gate,
        cfg.max_retries + 1,
        failures.join("; ")
    )))
}
