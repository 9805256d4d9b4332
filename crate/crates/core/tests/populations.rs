use proptest::prelude::*;
use refgame::agents::{Listener, ModelConfig, UttInput};
use refgame::populations::{
    entropy, mean_distribution, mean_probs, softmax, target_log_prob, FrozenPopulation, ManifestMember, Population,
    PopulationKind, PopulationManifest,
};
use refgame::tensor::Tape;
use refgame::vocab::{Utterance, Vocab};
use refgame::worldgen::{generate_games, ReferenceGame};
use refgame::RngStream;

fn tiny(vocab_size: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        resolution: 16,
        conv_blocks: 2,
        filters: 3,
        embed_dim: 4,
        hidden_dim: 5,
        gru_layers: 1,
        max_len: 4,
        vocab_size,
        ..ModelConfig::desk(vocab_size)
    }
    .with_dropout(dropout)
}

fn fixture(n: usize) -> (Vec<ReferenceGame>, Vec<Utterance>) {
    let vocab = Vocab::small();
    let split = generate_games(n, 3, "pop", 8, 16).unwrap();
    let utts = split.games.iter().map(|g| vocab.encode(&g.caption, 4).unwrap()).collect();
    (split.games, utts)
}

#[test]
fn entropy_of_half_quarter_quarter() {
    let h = entropy(&[0.5, 0.25, 0.25]);
    assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
    assert!((h - 1.0397).abs() < 1e-4);
    assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    assert!((entropy(&[1.0 / 3.0; 3]) - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn disagreeing_members_average_to_a_split_vote() {
    let m = mean_distribution(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    assert_eq!(m, vec![0.5, 0.5, 0.0]);
}

proptest! {
    #[test]
    fn mixture_entropy_bounds_member_entropy(
        a in prop::collection::vec(-4.0f64..4.0, 3),
        b in prop::collection::vec(-4.0f64..4.0, 3),
        c in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let ps = [softmax(&a), softmax(&b), softmax(&c)];
        let rows: Vec<&[f64]> = ps.iter().map(|p| &p[..]).collect();
        let mix = mean_distribution(&rows);
        let mean_h = ps.iter().map(|p| entropy(p)).sum::<f64>() / 3.0;
        prop_assert!(entropy(&mix) >= mean_h - 1e-12);
        prop_assert!(entropy(&mix) <= 3f64.ln() + 1e-12);
        prop_assert!((mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_log_prob_is_log_of_mean_probability(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 3), 1..6),
        t in 0usize..3,
    ) {
        let mut tape = Tape::new();
        let logits: Vec<_> = rows.iter().map(|r| tape.constant(&[1, 3], r.clone()).unwrap()).collect();
        let lp = target_log_prob(&mut tape, &logits, &[t]).unwrap();
        let direct = (rows.iter().map(|r| softmax(r)[t]).sum::<f64>() / rows.len() as f64).ln();
        prop_assert!((tape.value(lp)[0] - direct).abs() < 1e-9 * direct.abs().max(1.0));
    }
}

#[test]
fn ensemble_of_identical_members_equals_single() {
    let (games, utts) = fixture(6);
    let g: Vec<&ReferenceGame> = games.iter().collect();
    let u: Vec<&Utterance> = utts.iter().collect();
    let l = Listener::build(&tiny(15, 0.0), 3).unwrap();
    let single = Population::single(l.clone()).prob(&g, &u, &mut RngStream::new(0)).unwrap();
    let ens = Population::ensemble(vec![l.clone(), l.clone(), l])
        .unwrap()
        .prob(&g, &u, &mut RngStream::new(0))
        .unwrap();
    assert_eq!(single, ens);
}

#[test]
fn ensemble_probability_is_member_mean() {
    let (games, utts) = fixture(5);
    let g: Vec<&ReferenceGame> = games.iter().collect();
    let u: Vec<&Utterance> = utts.iter().collect();
    let members: Vec<Listener> = (0..3).map(|s| Listener::build(&tiny(15, 0.0), s).unwrap()).collect();
    let each: Vec<Vec<Vec<f64>>> = members.iter().map(|m| m.probs(&g, &u, None).unwrap()).collect();
    let pop = Population::ensemble(members).unwrap();
    let got = pop.prob(&g, &u, &mut RngStream::new(0)).unwrap();
    for gi in 0..g.len() {
        let rows: Vec<&[f64]> = each.iter().map(|p| &p[gi][..]).collect();
        for (x, y) in got[gi].iter().zip(mean_distribution(&rows)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_cache_matches_fresh_forward() {
    let (games, utts) = fixture(4);
    let g: Vec<&ReferenceGame> = games.iter().collect();
    let u: Vec<&Utterance> = utts.iter().collect();
    let l = Listener::build(&tiny(15, 0.0), 5).unwrap();
    let direct = l.probs(&g, &u, None).unwrap();
    let pop = Population::single(l);
    let frozen = FrozenPopulation::new(&pop, &g).unwrap();
    let ids: Vec<&[usize]> = [2usize, 0].iter().map(|&i| utts[i].ids()).collect();
    let mut tape = Tape::new();
    let logits = frozen
        .member_logits(&mut tape, &[2, 0], &UttInput::Ids(&ids), &mut RngStream::new(0))
        .unwrap();
    let p = mean_probs(&tape, &logits);
    for (row, gi) in p.iter().zip([2, 0]) {
        for (x, y) in row.iter().zip(&direct[gi]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_mask_seed_equals_one_pass() {
    let (games, utts) = fixture(4);
    let g: Vec<&ReferenceGame> = games.iter().collect();
    let u: Vec<&Utterance> = utts.iter().collect();
    let l = Listener::build(&tiny(15, 0.3), 7).unwrap();
    let one = l.probs(&g, &u, Some(42)).unwrap();
    let pop = Population::dropout(l, 4).unwrap();
    let rep = pop.prob_with_mask_seeds(&g, &u, &[42; 4]).unwrap();
    for (a, b) in one.iter().zip(&rep) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let varied = pop.prob_with_mask_seeds(&g, &u, &[1, 2, 3, 4]).unwrap();
    assert_ne!(rep, varied);
}

#[test]
fn dropout_population_is_reproducible_and_needs_dropout() {
    let (games, utts) = fixture(4);
    let g: Vec<&ReferenceGame> = games.iter().collect();
    let u: Vec<&Utterance> = utts.iter().collect();
    let l = Listener::build(&tiny(15, 0.2), 7).unwrap();
    let pop = Population::dropout(l.clone(), 5).unwrap();
    let a = pop.prob(&g, &u, &mut RngStream::new(3)).unwrap();
    let b = pop.prob(&g, &u, &mut RngStream::new(3)).unwrap();
    assert_eq!(a, b);
    assert!(Population::dropout(Listener::build(&tiny(15, 0.0), 1).unwrap(), 5).is_err());
    assert!(Population::ensemble(Vec::new()).is_err());
}

#[test]
fn manifest_round_trip_checks_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let mut members = Vec::new();
    for s in 0..2 {
        let l = Listener::build(&tiny(15, 0.1), s).unwrap();
        let name = format!("l{s}.ckpt");
        l.save(&dir.path().join(&name)).unwrap();
        members.push(ManifestMember {
            checkpoint: name.into(),
            val_accuracy: 0.95,
            content_hash: l.params.content_hash(),
        });
    }
    let manifest = PopulationManifest {
        kind: PopulationKind::Ensemble,
        n: 2,
        members,
        vocab_prefix: None,
    };
    let path = dir.path().join("population.json");
    manifest.save(&path).unwrap();
    let back = PopulationManifest::load(&path).unwrap();
    assert_eq!(back, manifest);
    let pop = back.instantiate(&path).unwrap();
    assert_eq!(pop.members.len(), 2);

    let cut = PopulationManifest {
        vocab_prefix: Some(10),
        ..manifest.clone()
    }
    .instantiate(&path)
    .unwrap();
    assert!(cut.members.iter().all(|m| m.config.vocab_size == 10));

    let mut bad = manifest.clone();
    bad.members[1].content_hash = "00".into();
    assert!(bad.instantiate(&path).is_err());
}

#[test]
fn kind_names_round_trip() {
    for k in [PopulationKind::SingleL0, PopulationKind::Ensemble, PopulationKind::Dropout] {
        assert_eq!(PopulationKind::parse(k.name()).unwrap(), k);
    }
    assert!(PopulationKind::parse("crowd").is_err());
}
