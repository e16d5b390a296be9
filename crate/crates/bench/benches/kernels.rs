use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nri_bench::{loss_config, model, params, random, FEATURES};
use nri_core::diffcore::{Mode, Tape};
use nri_core::model::Session;
use nri_core::noise::Stream;
use nri_core::sim::{
    simulate_charged, simulate_kuramoto, simulate_springs, ChargedSpec, KuramotoSpec, SpringsSpec,
};
use nri_core::train::elbo_loss;
use nri_core::{build_incidence, EncoderKind};

const BATCH: usize = 32;
const FRAMES: usize = 49;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random(&[n, n], 1);
        let b = random(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let z = tape.matmul(x, y).unwrap();
                black_box(tape.value(z).len())
            })
        });
    }
    group.finish();
}

fn message_passing(c: &mut Criterion) {
    let mut group = c.benchmark_group("node2edge_edge2node");
    for n in [5, 10] {
        let inc = build_incidence(n).unwrap();
        let h = random(&[BATCH, n, 256], 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let v = tape.leaf(h.clone());
                let e = inc.node2edge(&mut tape, v).unwrap();
                let back = inc.edge2node(&mut tape, e).unwrap();
                black_box(tape.value(back).len())
            })
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    for (name, kind) in [("mlp", EncoderKind::Mlp), ("cnn", EncoderKind::Cnn)] {
        let m = model(5, FRAMES, kind);
        let store = params(&m);
        let x = random(&[BATCH, 5, FRAMES, FEATURES], 4);
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut s = Session::new(&store, Mode::Eval, Stream::new(0).rng());
                let xv = s.input(x.clone());
                let logits = m.encode(&mut s, xv).unwrap();
                black_box(s.tape.value(logits).len())
            })
        });
    }
    group.finish();
}

fn decoder(c: &mut Criterion) {
    let m = model(5, FRAMES, EncoderKind::Mlp);
    let store = params(&m);
    let x = random(&[BATCH, 5, FEATURES], 5);
    let z = random(&[BATCH, m.n_edges(), 2], 6).map(|v| (v + 1.0) / 2.0);
    c.bench_function("decoder_markov_step", |bench| {
        bench.iter(|| {
            let mut s = Session::new(&store, Mode::Eval, Stream::new(0).rng());
            let (xv, zv) = (s.input(x.clone()), s.input(z.clone()));
            let mu = m.decode_markov_step(&mut s, xv, zv).unwrap();
            black_box(s.tape.value(mu).len())
        })
    });
}

fn training_step(c: &mut Criterion) {
    let m = model(5, FRAMES, EncoderKind::Mlp);
    let store = params(&m);
    let x = random(&[BATCH, 5, FRAMES, FEATURES], 7);
    let cfg = loss_config();
    let mut group = c.benchmark_group("elbo");
    group.sample_size(10);
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut s = Session::new(&store, Mode::Train, Stream::new(0).rng());
            let xv = s.input(x.clone());
            let terms = elbo_loss(&m, &mut s, xv, &cfg, None).unwrap();
            black_box(s.tape.backward(terms.loss).unwrap())
        })
    });
    group.finish();
}

fn simulators(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(20);
    let springs = SpringsSpec::default();
    group.bench_function("springs", |bench| {
        bench.iter(|| black_box(simulate_springs(&springs, 1).unwrap()))
    });
    let charged = ChargedSpec::default();
    group.bench_function("charged", |bench| {
        bench.iter(|| black_box(simulate_charged(&charged, 1).unwrap()))
    });
    let kuramoto = KuramotoSpec::default();
    group.bench_function("kuramoto", |bench| {
        bench.iter(|| black_box(simulate_kuramoto(&kuramoto, 1).unwrap()))
    });
    group.finish();
}

criterion_group!(
    benches,
    matmul,
    message_passing,
    encoder,
    decoder,
    training_step,
    simulators
);
criterion_main!(benches);
