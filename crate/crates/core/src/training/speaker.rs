use std::path::Path;
use std::time::Instant;

use super::{accuracy, check_loss, state, EpochRecord, SpeakerTrainConfig, TrainLog};
use crate::agents::{speaker_images, BnMode, Decode, ModelConfig, Speaker, UttInput};
use crate::error::{Error, Result};
use crate::populations::{mean_probs, target_log_prob, FrozenPopulation, Population};
use crate::rng::RngStream;
use crate::tensor::{AdamConfig, AdamState, Tape};
use crate::vocab::Utterance;
use crate::worldgen::{DatasetSplit, ReferenceGame};

/// Accuracy of `pop` on speaker utterances, one per game.
pub fn population_accuracy(
    pop: &Population,
    games: &[&ReferenceGame],
    utterances: &[Utterance],
    rng: &mut RngStream,
) -> Result<f64> {
    let refs: Vec<&Utterance> = utterances.iter().collect();
    let p = pop.prob(games, &refs, rng)?;
    let t: Vec<usize> = games.iter().map(|g| g.target_index).collect();
    Ok(accuracy(&p, &t))
}

/// Trains a speaker to maximise `log L_pop(target | u)` through
/// straight-through Gumbel-Softmax samples. The population stays frozen.
pub fn train_speaker(
    model: &ModelConfig,
    cfg: &SpeakerTrainConfig,
    split: &DatasetSplit,
    pop: &Population,
    seed: u64,
    state_dir: Option<&Path>,
) -> Result<(Speaker, TrainLog)> {
    cfg.validate()?;
    pop.validate()?;
    let listener_vocab = pop.members[0].config.vocab_size;
    if model.vocab_size != listener_vocab {
        return Err(Error::Config(format!(
            "speaker vocab size {} differs from the population's {listener_vocab}",
            model.vocab_size
        )));
    }
    if model.n_images != split.n_images() {
        return Err(Error::Config(format!(
            "speaker expects {} images per game, split has {}",
            model.n_images,
            split.n_images()
        )));
    }
    let (train, val) = split.split_tail(cfg.val_fraction);
    let hashes = pop.member_hashes();
    let frozen = FrozenPopulation::new(pop, &train)?;

    let mut speaker = Speaker::build(model, seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &speaker.params);
    let mut log = TrainLog::default();
    let mut start = 0;
    let fp = state::fingerprint(&serde_json::json!({
        "model": model,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "temperature": cfg.temperature,
        "val_fraction": cfg.val_fraction,
        "data": split.content_hash(),
        "population": { "kind": pop.kind, "n": pop.n, "members": hashes },
        "seed": seed,
    }));
    if let Some(dir) = state_dir {
        if let Some(r) = state::load(dir, "speaker", &fp, &mut speaker.params)? {
            start = r.epochs_done;
            adam = r.adam;
            log = r.log;
        }
    }

    let root = RngStream::new(seed).derive("speaker/train");
    for epoch in start..cfg.epochs {
        let clock = Instant::now();
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.derive_index("shuffle", e).shuffle(&mut order);
        let mut gumbel = root.derive_index("gumbel", e);
        let mut masks = root.derive_index("population", e);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let games: Vec<&ReferenceGame> = batch.iter().map(|&i| train[i]).collect();
            let targets: Vec<usize> = games.iter().map(|g| g.target_index).collect();
            let mut tape = Tape::new();
            let bound = speaker.bind(&mut tape, false);
            let (out, stats) = speaker.forward(
                &mut tape,
                &bound,
                &speaker_images(&games),
                BnMode::Train,
                Decode::SampleSoft,
                cfg.temperature,
                &mut gumbel,
            )?;
            let utt = UttInput::Soft {
                steps: &out.steps,
                lengths: &out.lengths,
            };
            let logits = frozen.member_logits(&mut tape, batch, &utt, &mut masks)?;
            for (p, &t) in mean_probs(&tape, &logits).iter().zip(&targets) {
                correct += (crate::populations::argmax(p) == t) as usize;
            }
            let lp = target_log_prob(&mut tape, &logits, &targets)?;
            let mean = tape.mean(lp);
            let loss = tape.scale(mean, -1.0);
            let value = tape.value(loss)[0];
            check_loss(value, epoch, bi)?;
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;
            speaker.params.collect_grads(&tape, &bound);
            adam.step(&mut speaker.params)?;
            speaker.update_running_stats(&stats);
        }
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            let mut r = root.derive_index("val", e);
            let utts = speaker.utterances(&val, Decode::SampleHard, cfg.temperature, &mut r, 128)?;
            population_accuracy(pop, &val, &utts, &mut r)?
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            wall_secs: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "speaker ({} n={}) epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            pop.kind.name(),
            pop.n,
            rec.loss,
            rec.train_acc,
            rec.val_acc
        );
        log.records.push(rec);
        if let Some(dir) = state_dir {
            state::save(dir, "speaker", model, seed, &fp, &speaker.params, &adam, epoch + 1, &log)?;
        }
    }
    if pop.member_hashes() != hashes {
        return Err(Error::Invalid("listener parameters changed during speaker training".into()));
    }
    Ok((speaker, log))
}
