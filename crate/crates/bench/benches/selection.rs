use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use sparseft_core::data::{generate, GeneratorSpec};
use sparseft_core::heuristics::random_score;
use sparseft_core::mask_store::{decode, encode};
use sparseft_core::selection::select_topk;
use sparseft_core::trainer::finetune;
use sparseft_core::{
    HeuristicConfig, MaskSet, Model, ModelConfig, ParamId, StrategyConfig, TrainConfig,
};
use std::hint::black_box;

fn topk(c: &mut Criterion) {
    let mut g = c.benchmark_group("select_topk");
    for n in [1_000usize, 10_000, 100_000] {
        let ids: Vec<ParamId> = (0..n).map(|o| ParamId::new(o / 1000, o % 1000)).collect();
        let scores = random_score(&ids, 7);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| {
            b.iter(|| select_topk(black_box(s), n / 50).unwrap())
        });
    }
    g.finish();
}

fn codec(c: &mut Criterion) {
    // 64·256 + 256 + 256·10 + 10 = 19210 scalars.
    let model = Model::build(&ModelConfig::mlp(&[64, 256, 10], 1)).unwrap();
    let ids: Vec<ParamId> = model.param_ids().step_by(4).collect();
    let mask = MaskSet::from_ids(ids, 1);
    let bytes = encode(&model, &mask).unwrap();

    let mut g = c.benchmark_group("mask_store");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode", |b| {
        b.iter(|| encode(black_box(&model), &mask).unwrap())
    });
    g.bench_function("decode", |b| b.iter(|| decode(black_box(&bytes)).unwrap()));
    g.finish();
}

fn finetune_steps(c: &mut Criterion) {
    let data = generate(
        &GeneratorSpec::GaussianBlobs {
            classes: 2,
            dims: 2,
            separation: 4.0,
            samples: 512,
        },
        3,
    )
    .unwrap();
    let model = Model::build(&ModelConfig::mlp(&[2, 16, 16, 2], 3)).unwrap();
    let cfg = TrainConfig::new(
        StrategyConfig::incremental(7, HeuristicConfig::d3_classification()),
        20,
        0.1,
        32,
    );
    c.bench_function("finetune/increment-d3/20-steps", |b| {
        b.iter_batched(
            || model.clone(),
            |m| finetune(m, &data, None, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, topk, codec, finetune_steps);
criterion_main!(benches);
