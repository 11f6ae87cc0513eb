use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use uoiskit_bench::scenes;
use uoiskit_core::hpg::{build_gt_heatmap, select_peaks, GaussianSpec};
use uoiskit_core::metrics::{hungarian_match, pairwise_f};
use uoiskit_core::pipeline::{nms, Detection};
use uoiskit_core::tinynn::Mlp;
use uoiskit_core::{mask_iou, rle_decode, rle_encode, PixelPoint};

fn masks(c: &mut Criterion) {
    let scene = &scenes(240, 320, 1)[0];
    let fg = scene.foreground();
    let dense = rle_decode(fg).unwrap();
    let (a, b) = (&scene.instances()[0], &scene.instances()[1 % scene.instances().len()]);
    c.bench_function("rle_encode 240x320", |bch| bch.iter(|| rle_encode(black_box(&dense), fg.size()).unwrap()));
    c.bench_function("mask_iou 240x320", |bch| bch.iter(|| mask_iou(black_box(a), black_box(b)).unwrap()));
}

fn matching(c: &mut Criterion) {
    let scene = &scenes(240, 320, 1)[0];
    let gts = scene.instances();
    c.bench_function("pairwise_f + hungarian", |bch| {
        bch.iter(|| hungarian_match(&pairwise_f(black_box(gts), gts).unwrap()))
    });
    let big: Vec<Vec<f64>> = (0..30).map(|i| (0..30).map(|j| ((i * 7 + j * 13) % 31) as f64 / 31.0).collect()).collect();
    c.bench_function("hungarian 30x30", |bch| bch.iter(|| hungarian_match(black_box(&big))));
}

fn mlp(c: &mut Criterion) {
    let net = Mlp::new(&[512, 256, 256, 1], 1).unwrap();
    let x = Array2::from_shape_fn((120, 512), |(i, j)| ((i * 31 + j) % 17) as f64 / 17.0 - 0.5);
    c.bench_function("mlp forward 120x512->256->256->1", |bch| bch.iter(|| net.forward(black_box(x.view())).unwrap()));
}

fn peaks(c: &mut Criterion) {
    let scene = &scenes(240, 320, 1)[0];
    let heat = build_gt_heatmap(scene.instances(), scene.size(), GaussianSpec::new(8.0).unwrap()).unwrap();
    c.bench_function("select_peaks 240x320", |bch| {
        bch.iter(|| select_peaks(black_box(&heat), scene.foreground(), 30, 0.007).unwrap())
    });
}

fn suppression(c: &mut Criterion) {
    let scene = &scenes(240, 320, 1)[0];
    let dets: Vec<Detection> = (0..30)
        .map(|i| Detection {
            mask: scene.instances()[i % scene.instances().len()].clone(),
            score: 1.0 - i as f64 / 60.0,
            prompt: PixelPoint::new(i, 0),
            slot: 0,
        })
        .collect();
    c.bench_function("nms 30 detections", |bch| bch.iter(|| nms(black_box(dets.clone()), 0.3).unwrap()));
}

criterion_group!(benches, masks, matching, mlp, peaks, suppression);
criterion_main!(benches);
