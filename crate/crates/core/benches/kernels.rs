//! Sequential vs row-parallel execution of the hot kernels. With the
//! `parallel` feature off both variants take the sequential path.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tristage_core::codec::{kmeans_fit_with, CodeGrid};
use tristage_core::kernels::{self, Exec};
use tristage_core::model::{Arch, Model, ModelConfig};
use tristage_core::stages::{build_train_sequence, stage_spec_with, StageKind};
use tristage_core::train::stage_loss;
use tristage_core::{GradBuffer, Graph, Tensor};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Auto)];

fn random(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for n in [64usize, 256] {
        let a = random(&mut r, n * n);
        let b = random(&mut r, n * n);
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| kernels::matmul(exec, black_box(&a), black_box(&b), n, n, n))
            });
        }
    }
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let frames = Tensor::new(vec![2000, 16], random(&mut r, 2000 * 16)).unwrap();
    for (name, exec) in POLICIES {
        group.bench_function(name, |bench| bench.iter(|| kmeans_fit_with(&frames, 64, 5, 0, exec).unwrap()));
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("coarse_forward_backward");
    group.sample_size(10);
    let arch = Arch {
        layers: 2,
        d_model: 64,
        heads: 2,
        ff_mult: 4.0,
        num_buckets: 32,
    };
    let spec = stage_spec_with(StageKind::Coarse, 64, 64);
    let model = Model::init(ModelConfig::for_stage(&spec, &arch, 800).unwrap(), 0).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut ids = |n: usize| (0..n).map(|_| r.gen_range(0..64u32)).collect::<Vec<_>>();
    let sem = |v: Vec<u32>| CodeGrid::from_rows(50, 64, vec![v]).unwrap();
    let cond = vec![sem(ids(100)), sem(ids(100))];
    let target = CodeGrid::from_flat(75, 64, 4, ids(600)).unwrap();
    let seq = build_train_sequence(&spec, &cond, &target, false).unwrap();
    for (name, exec) in POLICIES {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut g = Graph::with_exec(exec);
                let logits = model.forward(&mut g, &seq.input).unwrap();
                let loss = stage_loss(&mut g, logits, &seq.targets, 4).unwrap();
                let mut grads = GradBuffer::zeros_like(model.params());
                g.backward_into(loss, 1.0, &mut grads).unwrap();
                grads
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, kmeans, forward_backward);
criterion_main!(benches);
