//! Hot kernels under the rayon pool and single-threaded.
//!
//! With the default `parallel` feature each benchmark runs twice: on a pool
//! with all cores and on a one-thread pool. Built with
//! `--no-default-features` the sequential fallback runs instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sinofill::diffusion::{loss_and_gradient, predict_noise, DiffusionSchedule, ModelParams, Tensor, UnetConfig};
use sinofill::mlem::{reconstruct, MlemConfig};
use sinofill::phantom::random_phantom;
use sinofill::{AngularMask, ProjectionGeometry, Projector};

#[cfg(feature = "parallel")]
fn variants() -> Vec<(String, rayon::ThreadPool)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut threads = vec![1];
    if all > 1 {
        threads.push(all);
    }
    threads
        .into_iter()
        .map(|n| (format!("rayon-{n}"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

#[cfg(feature = "parallel")]
fn run_variants(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (name, pool) in variants() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| pool.install(|| b.iter(&mut f)));
    }
    g.finish();
}

#[cfg(not(feature = "parallel"))]
fn run_variants(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(&mut f));
    g.finish();
}

fn projector(c: &mut Criterion) {
    let g = ProjectionGeometry::desk_default();
    let p = Projector::new(g);
    let img = random_phantom(1, 64).unwrap();
    let sino = p.forward(&img).unwrap();
    run_variants(c, "forward_64x64_90x95", || {
        black_box(p.forward(black_box(&img)).unwrap());
    });
    run_variants(c, "backproject_90x95_64x64", || {
        black_box(p.backproject(black_box(&sino)).unwrap());
    });
    let cfg = MlemConfig::new(10, 1e-9, Some(AngularMask::new(90, 20, 30).unwrap())).unwrap();
    run_variants(c, "mlem_10_iterations", || {
        black_box(reconstruct(&p, &sino, &cfg).unwrap());
    });
}

fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.sample(StandardNormal)).collect())
}

fn unet(c: &mut Criterion) {
    let (h, w) = (90, 95);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ModelParams::<f32>::init(&UnetConfig::default(), 3).unwrap();
    params.values_mut().iter_mut().for_each(|v| *v += 0.01 * rng.sample::<f32, _>(StandardNormal));
    let (x0, la, eps) = (noise(&mut rng, h, w), noise(&mut rng, h, w), noise(&mut rng, h, w));
    let mask = Tensor::from_vec(1, h, w, (0..h * w).map(|i| (i / w >= 30) as u8 as f32).collect());
    let sched = DiffusionSchedule::default_linear();
    run_variants(c, "unet_forward_90x95", || {
        black_box(predict_noise(&params, &x0, 500, &la, &mask).unwrap());
    });
    run_variants(c, "unet_loss_and_gradient_90x95", || {
        black_box(loss_and_gradient(&params, &x0, &la, &mask, 500, &eps, &sched).unwrap());
    });
}

criterion_group!(benches, projector, unet);
criterion_main!(benches);
