use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, ArrayD};

use angiodiff_core::diffusion::LossWeightConfig;
use angiodiff_core::metrics;
use angiodiff_core::nets::{Arch, ArchConfig, DenoiserModel, Preset};
use angiodiff_core::rng;
use angiodiff_core::schedule::NoiseSchedule;
use angiodiff_core::spline;
use angiodiff_core::train;
use angiodiff_core::wavelet;

fn rand2(h: usize, w: usize, seed: u64) -> Array2<f64> {
    rng::standard_normal(&mut rng::stream(seed, 0, 0), &[h, w])
        .into_dimensionality()
        .unwrap()
}

fn bench_wavelet(c: &mut Criterion) {
    let img = rng::standard_normal(&mut rng::stream(1, 0, 0), &[1, 256, 256]);
    c.bench_function("dwt2_256", |b| {
        b.iter(|| wavelet::dwt2(std::hint::black_box(&img)).unwrap())
    });
    let bands = wavelet::dwt2(&img).unwrap();
    c.bench_function("idwt2_256", |b| {
        b.iter(|| wavelet::idwt2(std::hint::black_box(&bands)).unwrap())
    });
}

fn bench_resample(c: &mut Criterion) {
    let img = rand2(64, 64, 2);
    c.bench_function("resample_64_to_256", |b| {
        b.iter(|| spline::resample_slice(std::hint::black_box(&img), 256, 256).unwrap())
    });
}

fn bench_ssim(c: &mut Criterion) {
    let a: ArrayD<f64> = rng::standard_normal(&mut rng::stream(3, 0, 0), &[256, 256]);
    let b2: ArrayD<f64> = rng::standard_normal(&mut rng::stream(4, 0, 0), &[256, 256]);
    c.bench_function("ssim_256", |b| {
        b.iter(|| metrics::ssim(std::hint::black_box(&a), std::hint::black_box(&b2), 2.0).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let cfg = ArchConfig::new(Arch::Adm, Preset::Lite);
    let model = DenoiserModel::build(&cfg, 1).unwrap();
    let schedule = NoiseSchedule::cosine();
    let weight = LossWeightConfig::default();
    let src = rng::standard_normal_f32(&mut rng::stream(5, 0, 0), &[4, 1, 32, 32]);
    let tgt = rng::standard_normal_f32(&mut rng::stream(6, 0, 0), &[4, 1, 32, 32]);
    c.bench_function("adm_lite_loss_and_grads_b4_32", |b| {
        b.iter(|| {
            train::training_loss_and_grads(
                &cfg,
                &model.params,
                std::hint::black_box(&src),
                std::hint::black_box(&tgt),
                7,
                0,
                &schedule,
                &weight,
            )
            .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_wavelet, bench_resample, bench_ssim, bench_training_step
}
criterion_main!(benches);
