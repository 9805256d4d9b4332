use refgame::agents::{Listener, ModelConfig};
use refgame::populations::Population;
use refgame::training::{
    caption_utterances, train_listener, train_listener_gated, train_speaker, ListenerTrainConfig,
    SpeakerTrainConfig,
};
use refgame::vocab::{Utterance, Vocab};
use refgame::worldgen::{generate_games, DatasetSplit, ReferenceGame};
use refgame::Error;

fn tiny(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        resolution: 16,
        conv_blocks: 2,
        filters: 4,
        embed_dim: 8,
        hidden_dim: 8,
        gru_layers: 1,
        max_len: 4,
        vocab_size,
        ..ModelConfig::desk(vocab_size)
    }
}

fn data(n: usize, id: &str) -> DatasetSplit {
    generate_games(n, 3, id, 5, 16).unwrap()
}

fn listener_cfg(epochs: usize) -> ListenerTrainConfig {
    ListenerTrainConfig {
        epochs,
        batch_size: 16,
        ..Default::default()
    }
}

fn speaker_cfg(epochs: usize) -> SpeakerTrainConfig {
    SpeakerTrainConfig {
        epochs,
        batch_size: 16,
        lr: 0.01,
        ..Default::default()
    }
}

#[test]
fn untrained_listener_loss_is_near_chance() {
    let vocab = Vocab::small();
    let split = data(300, "init");
    let l = Listener::build(&tiny(vocab.size()), 2).unwrap();
    let games: Vec<&ReferenceGame> = split.games.iter().collect();
    let utts = caption_utterances(&games, &vocab, 4).unwrap();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let probs = l.probs(&games, &refs, None).unwrap();
    let loss = probs
        .iter()
        .zip(&games)
        .map(|(p, g)| -p[g.target_index].ln())
        .sum::<f64>()
        / games.len() as f64;
    assert!((loss - 3f64.ln()).abs() < 0.05, "{loss}");
}

#[test]
fn listener_training_is_deterministic_and_learns() {
    let vocab = Vocab::small();
    let split = data(240, "det");
    let model = tiny(vocab.size());
    let (a, la) = train_listener(&model, &listener_cfg(4), &split, &vocab, 3, None).unwrap();
    let (b, lb) = train_listener(&model, &listener_cfg(4), &split, &vocab, 3, None).unwrap();
    assert!(la.same_metrics(&lb));
    assert_eq!(a.params.content_hash(), b.params.content_hash());
    assert_eq!(la.records.len(), 4);
    assert!(la.records[3].loss < la.records[0].loss);
    let (c, _) = train_listener(&model, &listener_cfg(4), &split, &vocab, 4, None).unwrap();
    assert_ne!(a.params.content_hash(), c.params.content_hash());
}

#[test]
fn interrupted_listener_run_resumes_to_the_same_result() {
    let vocab = Vocab::small();
    let split = data(160, "resume");
    let model = tiny(vocab.size());
    let dir = tempfile::tempdir().unwrap();
    let (straight, ls) = train_listener(&model, &listener_cfg(4), &split, &vocab, 9, None).unwrap();
    let (_, first) = train_listener(&model, &listener_cfg(2), &split, &vocab, 9, Some(dir.path())).unwrap();
    assert_eq!(first.records.len(), 2);
    let (resumed, lr) = train_listener(&model, &listener_cfg(4), &split, &vocab, 9, Some(dir.path())).unwrap();
    assert!(ls.same_metrics(&lr));
    assert_eq!(straight.params.content_hash(), resumed.params.content_hash());
}

#[test]
fn state_from_another_run_is_refused() {
    let vocab = Vocab::small();
    let split = data(160, "stale");
    let model = tiny(vocab.size());
    let dir = tempfile::tempdir().unwrap();
    train_listener(&model, &listener_cfg(2), &split, &vocab, 1, Some(dir.path())).unwrap();
    assert!(matches!(
        train_listener(&model, &listener_cfg(2), &split, &vocab, 2, Some(dir.path())),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn unreachable_gate_errors_after_retries() {
    let vocab = Vocab::small();
    let split = data(64, "gate");
    let cfg = ListenerTrainConfig {
        gate: 1.01,
        max_retries: 1,
        ..listener_cfg(1)
    };
    match train_listener_gated(&tiny(vocab.size()), &cfg, &split, &vocab, 1, None) {
        Err(Error::Gate(msg)) => assert!(msg.contains("2 attempts")),
        other => panic!("expected gate failure, got {:?}", other.map(|o| o.attempts)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let vocab = Vocab::small();
    let split = data(20, "cfg");
    let bad = ListenerTrainConfig {
        lr: 0.0,
        ..listener_cfg(1)
    };
    assert!(matches!(
        train_listener(&tiny(vocab.size()), &bad, &split, &vocab, 1, None),
        Err(Error::Config(_))
    ));
    assert!(train_listener(&tiny(vocab.size() + 1), &listener_cfg(1), &split, &vocab, 1, None).is_err());
}

fn pretrained(vocab: &Vocab) -> Listener {
    let split = data(400, "listener");
    train_listener(&tiny(vocab.size()), &listener_cfg(6), &split, vocab, 5, None).unwrap().0
}

#[test]
fn speaker_training_leaves_listeners_untouched_and_resumes() {
    let vocab = Vocab::small();
    let l = pretrained(&vocab);
    let before = l.params.content_hash();
    let pop = Population::ensemble(vec![l.clone(), l.clone()]).unwrap();
    let split = data(160, "speaker");
    let model = tiny(vocab.size());
    let dir = tempfile::tempdir().unwrap();
    let (straight, ls) = train_speaker(&model, &speaker_cfg(3), &split, &pop, 4, None).unwrap();
    train_speaker(&model, &speaker_cfg(1), &split, &pop, 4, Some(dir.path())).unwrap();
    let (resumed, lr) = train_speaker(&model, &speaker_cfg(3), &split, &pop, 4, Some(dir.path())).unwrap();
    assert!(ls.same_metrics(&lr));
    assert_eq!(straight.params.content_hash(), resumed.params.content_hash());
    for m in &pop.members {
        assert_eq!(m.params.content_hash(), before);
    }
    assert_eq!(l.params.content_hash(), before);
}

#[test]
fn speaker_loss_falls_over_first_epochs() {
    let vocab = Vocab::small();
    let pop = Population::single(pretrained(&vocab));
    let split = data(400, "speaker-smoke");
    let (_, log) = train_speaker(&tiny(vocab.size()), &speaker_cfg(6), &split, &pop, 2, None).unwrap();
    let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
    let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls >= 4, "{losses:?}");
    assert!(losses.iter().all(|l| *l >= 0.0));
}

#[test]
fn speaker_rejects_mismatched_vocab() {
    let vocab = Vocab::small();
    let pop = Population::single(Listener::build(&tiny(vocab.size()), 1).unwrap());
    let split = data(20, "mismatch");
    assert!(matches!(
        train_speaker(&tiny(vocab.size() + 5), &speaker_cfg(1), &split, &pop, 1, None),
        Err(Error::Config(_))
    ));
}
