//! Hot paths at desk shapes: T = 10 segments, 64-wide models, 8 classes.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwav_core::attention::{encoder_block, EncoderBlockParams, EncoderConfig};
use uwav_core::han::{video_loss, BackboneInputs, HanConfig, HanModel};
use uwav_core::metrics::{MetricReport, VideoGrids};
use uwav_core::Tensor;

const T: usize = 10;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn tensor_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = uniform(&mut rng, 640, 64);
    let b = uniform(&mut rng, 64, 64);
    c.bench_function("matmul 640x64 * 64x64", |bench| bench.iter(|| black_box(a.matmul(&b).unwrap())));
    c.bench_function("matmul + backward", |bench| {
        bench.iter(|| {
            let w = Tensor::param(vec![64, 64], b.to_vec()).unwrap();
            a.matmul(&w).unwrap().mean_all().unwrap().backward().unwrap();
            black_box(w.grad())
        })
    });
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = EncoderBlockParams::<f32>::new(&mut rng, 64, &EncoderConfig::default()).unwrap();
    let g = uniform(&mut rng, T, 64);
    c.bench_function("encoder block forward", |bench| bench.iter(|| black_box(encoder_block(&g, &params).unwrap())));
}

fn han(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = HanConfig {
        dim_visual: 64,
        dim_audio: 64,
        hidden: 64,
        heads: 4,
        num_classes: 8,
    };
    let model = HanModel::<f32>::new(&mut rng, cfg).unwrap();
    let inputs = BackboneInputs {
        visual: uniform(&mut rng, T, 64),
        audio: uniform(&mut rng, T, 64),
    };
    let y = Tensor::new(vec![8], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    c.bench_function("han forward", |bench| bench.iter(|| black_box(model.forward(&inputs).unwrap().pool.video_probs)));
    c.bench_function("han forward + backward", |bench| {
        bench.iter(|| {
            let out = model.forward(&inputs).unwrap();
            video_loss(&out.pool.video_probs, &y).unwrap().backward().unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grid = |p: f64| -> Vec<Vec<u8>> {
        (0..T).map(|_| (0..8).map(|_| u8::from(rng.random_bool(p))).collect()).collect()
    };
    let grids: Vec<[Vec<Vec<u8>>; 4]> = (0..100).map(|_| [grid(0.2), grid(0.2), grid(0.15), grid(0.15)]).collect();
    let ids: Vec<String> = (0..100).map(|i| format!("v{i}")).collect();
    let views: Vec<VideoGrids<'_>> = grids
        .iter()
        .map(|[pv, pa, gv, ga]| VideoGrids {
            pred_visual: pv,
            pred_audio: pa,
            gt_visual: gv,
            gt_audio: ga,
        })
        .collect();
    c.bench_function("metric report, 100 videos", |bench| {
        bench.iter(|| black_box(MetricReport::build(&ids, &views, 0.5).unwrap()))
    });
}

criterion_group!(benches, tensor_ops, encoder, han, metrics);
criterion_main!(benches);
