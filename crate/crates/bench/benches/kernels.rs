use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use deaan::backend::{BackendModel, EmOptions};
use deaan::metrics::{eer, min_dcf, DcfParams};
use deaan::model::{Architecture, Model, ModelConfig};
use deaan::nn::Ctx;
use deaan_bench::{embeddings, feature_batch, score_set};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn backbone(c: &mut Criterion) {
    let model = Model::new(&ModelConfig::default(), Architecture::Baseline).unwrap();
    let store = model.init(&mut ChaCha8Rng::seed_from_u64(0));
    let x = feature_batch(8, 384, 64, 1);
    c.bench_function("toy_backbone_forward_8x384", |b| {
        b.iter(|| model.embed(&store, black_box(x.clone())).unwrap())
    });
    c.bench_function("toy_backbone_forward_backward_8x384", |b| {
        b.iter_batched(
            || x.clone(),
            |x| {
                let mut cx = Ctx::new(&store, true);
                let v = cx.g.constant(x);
                let h = model.frame_features(&mut cx, v).unwrap();
                let e = model.embed_id(&mut cx, h).unwrap();
                let l = cx.g.mean(e).unwrap();
                cx.g.backward(l).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let s = score_set(2_000, 20_000, 3);
    c.bench_function("eer_22k", |b| b.iter(|| eer(black_box(&s)).unwrap()));
    c.bench_function("min_dcf_22k", |b| b.iter(|| min_dcf(black_box(&s), &DcfParams::default()).unwrap()));
}

fn plda(c: &mut Criterion) {
    let set = embeddings(50, 40, 64, 4);
    let opts = EmOptions {
        min_iters: 10,
        max_iters: 10,
        tol: 0.0,
    };
    let mut group = c.benchmark_group("backend");
    group.sample_size(10);
    group.bench_function("lda_plda_fit_2000x64", |b| b.iter(|| BackendModel::fit(black_box(&set), 32, &opts).unwrap()));
    let (model, _) = BackendModel::fit(&set, 32, &opts).unwrap();
    group.bench_function("plda_score_pair", |b| {
        b.iter(|| model.score(black_box(&set.rows[0]), black_box(&set.rows[41])).unwrap())
    });
    group.finish();
}

criterion_group!(benches, backbone, metrics, plda);
criterion_main!(benches);
