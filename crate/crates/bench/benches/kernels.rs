use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use refgame::agents::{Decode, Listener, ModelConfig, Speaker};
use refgame::vocab::{Utterance, Vocab};
use refgame::worldgen::{generate_games, ReferenceGame};
use refgame::{RngStream, Tape, Tensor};

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let x = random(&[32, 3, 32, 32], &mut rng);
    let w = random(&[16, 3, 3, 3], &mut rng).with_grad();
    let b = random(&[16], &mut rng).with_grad();
    c.bench_function("conv2d 32x3x32x32 -> 16, forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            let loss = tape.sum(y);
            tape.backward(loss).unwrap();
            tape.grad(wv).unwrap()[0]
        })
    });
}

fn agents(c: &mut Criterion) {
    let vocab = Vocab::large(2000, 7).unwrap();
    let model = ModelConfig::desk(vocab.size());
    let split = generate_games(32, 3, "bench", 1, 32).unwrap();
    let games: Vec<&ReferenceGame> = split.games.iter().collect();
    let utts: Vec<Utterance> = games.iter().map(|g| vocab.encode(&g.caption, model.max_len).unwrap()).collect();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let listener = Listener::build(&model.clone().with_dropout(0.1), 1).unwrap();
    c.bench_function("listener probs, 32 desk games", |bench| {
        bench.iter(|| listener.probs(&games, &refs, None).unwrap())
    });
    let speaker = Speaker::build(&model, 2).unwrap();
    c.bench_function("speaker greedy decode, 32 desk games", |bench| {
        bench.iter_batched(
            || RngStream::new(3),
            |mut rng| speaker.utterances(&games, Decode::Greedy, 1.0, &mut rng, 32).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, agents
}
criterion_main!(benches);
