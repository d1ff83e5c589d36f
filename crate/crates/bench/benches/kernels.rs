use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use fedproto::aggregation::aggregate_prototypes;
use fedproto::model::{compute_local_prototypes, loss_and_gradient};
use fedproto::transport::{decode, encode, quantize};
use fedproto::{
    AggregationPolicy, Arch, LossConfig, MessageKind, ModelState, PrototypeSet, Sample,
    WireMessage,
};

const INPUT: usize = 32;
const EMBED: usize = 50;

fn samples(rng: &mut StdRng, classes: &[usize], n: usize) -> Vec<Sample> {
    (0..n)
        .map(|id| Sample {
            id,
            features: (0..INPUT).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: classes[id % classes.len()],
        })
        .collect()
}

fn random_set(rng: &mut StdRng, classes: usize, dim: usize) -> PrototypeSet {
    let mut s = PrototypeSet::new();
    for c in 0..classes {
        let v = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.insert(c, v, rng.random_range(1..100)).unwrap();
    }
    s
}

fn gradient(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(0);
    let classes = [0, 4, 7];
    let data = samples(&mut rng, &classes, 64);
    let cfg = LossConfig {
        lambda: 1.0,
        ..LossConfig::default()
    };
    let mut group = c.benchmark_group("loss_and_gradient");
    for (name, arch) in [
        ("linear", Arch::LinearEmbed),
        ("mlp64", Arch::Mlp1Embed { hidden: 64 }),
    ] {
        let model = ModelState::new(arch, INPUT, EMBED, classes.to_vec(), &mut rng).unwrap();
        let all: Vec<&Sample> = data.iter().collect();
        let global = compute_local_prototypes(&model, &all).unwrap();
        for batch in [8, 64] {
            let refs = &all[..batch];
            group.bench_with_input(BenchmarkId::new(name, batch), &batch, |b, _| {
                b.iter(|| loss_and_gradient(&model, black_box(refs), Some(&global), &cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let mut group = c.benchmark_group("aggregate_prototypes");
    for clients in [20, 100] {
        let uploads: Vec<(u32, PrototypeSet)> = (0..clients)
            .map(|i| (i, random_set(&mut rng, 10, EMBED)))
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(clients), &uploads, |b, u| {
            b.iter(|| aggregate_prototypes(black_box(u), &AggregationPolicy::default()).unwrap())
        });
    }
    group.finish();
}

fn codec(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let body = quantize(&random_set(&mut rng, 10, EMBED)).unwrap();
    let msg = WireMessage::new(MessageKind::Upload, 3, 7, body);
    let bytes = encode(&msg).unwrap();
    c.bench_function("encode", |b| b.iter(|| encode(black_box(&msg)).unwrap()));
    c.bench_function("decode", |b| b.iter(|| decode(black_box(&bytes)).unwrap()));
    c.bench_function("quantize", |b| {
        b.iter_batched(
            || random_set(&mut rng, 10, EMBED),
            |s| quantize(&s).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, gradient, aggregation, codec);
criterion_main!(benches);
