use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memspm::adaptation::{batch_objective, Batch, EmbeddingSpace};
use memspm::memory::{address, BankView};
use memspm::model::Gradients;
use memspm::pipeline::{prepare_synthetic, RunConfig};
use memspm::{LossWeights, MemoryBank, MemoryConfig, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn addressing(c: &mut Criterion) {
    let mut group = c.benchmark_group("address");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n_subs in [1usize, 10, 30] {
        let cfg = MemoryConfig {
            n_items: 64,
            n_subs,
            ..MemoryConfig::default()
        };
        let bank = MemoryBank::init_uniform(cfg, &mut rng).unwrap();
        let view = bank.view().unwrap();
        let z: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        group.bench_with_input(
            BenchmarkId::from_parameter(n_subs),
            &view,
            |b, v: &BankView<'_>| b.iter(|| address(&z, v).unwrap()),
        );
    }
    group.finish();
}

fn objective(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let (data, _) = prepare_synthetic(&cfg).unwrap();
    let model = Model::new(cfg.model_config(data.source.dim(), data.n_classes)).unwrap();
    let store = model.init_params(0).unwrap();
    let view = model.view(&store).unwrap();
    let n = cfg.train.batch_size;
    let src: Vec<&[f64]> = (0..n).map(|i| data.source.vectors.row(i)).collect();
    let tgt: Vec<&[f64]> = (0..n).map(|i| data.target.vectors.row(i)).collect();
    let src_labels: Vec<usize> = data.source.labels[..n]
        .iter()
        .map(|&l| l as usize)
        .collect();
    let tgt_labels: Vec<Option<usize>> = src_labels.iter().map(|&l| Some(l)).collect();
    let consensus: Vec<usize> = (0..data.n_classes).collect();
    let batch = Batch {
        src_x: &src,
        src_labels: &src_labels,
        tgt_x: &tgt,
        tgt_labels: &tgt_labels,
        consensus_classes: &consensus,
    };
    let weights = LossWeights::default();
    c.bench_function("batch_objective_with_gradients", |b| {
        b.iter(|| {
            let mut g = Gradients::zeros_like(&store);
            batch_objective(&view, &batch, &weights, EmbeddingSpace::Unit, Some(&mut g)).unwrap()
        })
    });
}

criterion_group!(benches, addressing, objective);
criterion_main!(benches);
