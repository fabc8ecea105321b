use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;
use rand::Rng;

use cinefix::detect::{detect_kspace, DetectConfig, DetectNet};
use cinefix::fourier::{fft2c, to_kspace, Direction};
use cinefix::metrics::ssim;
use cinefix::phantom::{generate_phantom, PhantomParams};
use cinefix::rng;
use cinefix::tensorlab::{Graph, Params, Tensor};
use cinefix::CineSequence;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn phantom(frames: usize, size: usize) -> CineSequence {
    let s = size as f64;
    generate_phantom(&PhantomParams {
        height: size,
        width: size,
        frames,
        center: (s / 2.0, s / 2.0),
        body_axes: (0.45 * s, 0.4 * s),
        epi_radius: 0.26 * s,
        endo_radius_base: 0.15 * s,
        contraction_amplitude: 0.05 * s,
        ..PhantomParams::default()
    })
    .unwrap()
}

fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    for &(ch, k) in &[(8usize, 3usize), (16, 3), (8, 5)] {
        let x = random_tensor(&[1, ch, 20, 32, 32], 1);
        let w = random_tensor(&[ch, ch, k, k, k], 2);
        let b = random_tensor(&[ch], 3);
        group.bench_with_input(
            BenchmarkId::new("forward", format!("c{ch}k{k}")),
            &(),
            |bench, _| {
                bench.iter(|| {
                    let mut g = Graph::new();
                    let (xv, wv, bv) = (
                        g.constant(x.clone()),
                        g.constant(w.clone()),
                        g.constant(b.clone()),
                    );
                    g.conv3d(xv, wv, bv, 1, k / 2).unwrap()
                })
            },
        );
        group.bench_with_input(
            BenchmarkId::new("forward_backward", format!("c{ch}k{k}")),
            &(),
            |bench, _| {
                bench.iter(|| {
                    let mut g = Graph::new();
                    let xv = g.input(x.clone(), true);
                    let wv = g.input(w.clone(), true);
                    let bv = g.input(b.clone(), true);
                    let y = g.conv3d(xv, wv, bv, 1, k / 2).unwrap();
                    let l = g.sum(y);
                    g.backward(l).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn fft(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft2c");
    for &n in &[32usize, 64] {
        let seq = phantom(20, n);
        let plane: Vec<Complex64> = seq
            .frame(0)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        group.bench_with_input(BenchmarkId::new("frame", n), &plane, |bench, p| {
            bench.iter(|| {
                let mut d = p.clone();
                fft2c(&mut d, n, n, Direction::Forward);
                d
            })
        });
        group.bench_with_input(BenchmarkId::new("sequence_t20", n), &seq, |bench, s| {
            bench.iter(|| to_kspace(s).unwrap())
        });
    }
    group.finish();
}

fn ssim_bench(c: &mut Criterion) {
    let x = phantom(20, 32);
    let y = CineSequence::new(
        20,
        32,
        32,
        x.data().iter().map(|v| (v + 0.05).min(1.0)).collect(),
    )
    .unwrap();
    c.bench_function("ssim_t20_32x32", |bench| {
        bench.iter(|| ssim(&x, &y, 1.0).unwrap())
    });
}

fn detect(c: &mut Criterion) {
    let ks = to_kspace(&phantom(20, 32)).unwrap();
    let mut params = Params::new();
    let mut r = rng::stream(0, &[]);
    let net = DetectNet::new(
        DetectConfig::desk(20, 32, 32),
        &mut params,
        "detect.",
        &mut r,
    )
    .unwrap();
    c.bench_function("detect_desk_t20_32x32", |bench| {
        bench.iter(|| detect_kspace(&net, &params, &ks).unwrap())
    });
}

criterion_group!(benches, conv3d, fft, ssim_bench, detect);
criterion_main!(benches);
