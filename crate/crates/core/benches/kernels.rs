//! Kernel and training-step timings. Run once with default features and once with
//! `--no-default-features`; group names carry the mode so both land side by side
//! in criterion's report.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pgnn_core::config::ExperimentConfig;
use pgnn_core::data;
use pgnn_core::labels::LabelMap;
use pgnn_core::metrics;
use pgnn_core::par;
use pgnn_core::pipeline::{self, PgnnModel};
use pgnn_core::tensor::{Tape, Tensor};

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group(format!("kernels/{}", mode()));

    for n in [32, 128] {
        let a = Tensor::uniform(&[n, n], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[n, n], -1.0, 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::new("matmul_fwd_bwd", n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let x = t.leaf(a.clone());
                let y = t.leaf(b.clone());
                let z = t.matmul(x, y).unwrap();
                let s = t.sum(z);
                t.backward(s).unwrap();
            })
        });
    }

    let x = Tensor::uniform(&[6, 8, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[16, 8, 3, 3], -0.3, 0.3, &mut rng);
    let bias = Tensor::zeros(&[16]);
    g.bench_function("conv3x3_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(bias.clone());
            let y = t.conv3x3(xv, wv, bv).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
        })
    });

    let logits = Tensor::uniform(&[256, 64], -3.0, 3.0, &mut rng);
    g.bench_function("softmax_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let v = t.leaf(logits.clone());
            let y = t.softmax(v, 1).unwrap();
            let s = t.max(y);
            t.backward(s).unwrap();
        })
    });
    g.finish();
}

fn pipeline_steps(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        scenes: 24,
        ..ExperimentConfig::default()
    };
    let (data, gt) = data::generate_dataset(&cfg.data()).unwrap();
    let patches = pipeline::crop_scenes(&cfg, &data, None).unwrap();
    let model = PgnnModel::init(&cfg, cfg.seed).unwrap();
    let batch = pipeline::ordered_batches(&data, cfg.batch_size).remove(0);
    let (h, w) = data.image_size();
    let prev: Vec<Tensor> = batch.images.iter().map(|_| Tensor::zeros(&[h, w])).collect();
    let prev_refs: Vec<&Tensor> = prev.iter().collect();

    let mut g = c.benchmark_group(format!("pipeline/{}", mode()));
    g.sample_size(20);
    g.bench_function("train_step", |bench| {
        bench.iter(|| {
            let (mut tape, _, _, loss) =
                pipeline::step_tape(&model, &cfg, &data, &patches, &batch, &prev_refs).unwrap();
            tape.backward(loss.total).unwrap();
        })
    });
    g.bench_function("infer_attention", |bench| {
        bench.iter(|| pipeline::infer_attention(&model, &cfg, &data, None).unwrap())
    });

    let preds: Vec<LabelMap> = data.scenes.iter().map(|s| gt.maps[&s.id].clone()).collect();
    let pairs: Vec<(&LabelMap, &LabelMap)> = data
        .scenes
        .iter()
        .zip(&preds)
        .map(|(s, p)| (p, &gt.maps[&s.id]))
        .collect();
    g.bench_function("confusion_all", |bench| {
        bench.iter(|| metrics::confusion_all(&pairs, cfg.classes, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, pipeline_steps);
criterion_main!(benches);
