//! Benchmarks for the hot paths: stain normalization, superpixel
//! segmentation, topology construction and the network forward/backward.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hactnet_core::dataset::{default_recipes, generate_synthetic_dataset, SynthConfig};
use hactnet_core::entity::{merge_superpixels, slic_superpixels};
use hactnet_core::gnn::model::train_step;
use hactnet_core::gnn::{adam_for, HactNet, HactNetConfig, Mode, PreparedGraph};
use hactnet_core::graph::build_cell_topology;
use hactnet_core::stain::{normalize_image, StainBasis};
use hactnet_core::RgbImage;

fn two_stain_image(side: usize, seed: u64) -> RgbImage {
    let basis = StainBasis::he_reference();
    let (vh, ve) = (basis.column(0), basis.column(1));
    let to_byte = |od: f64| (256.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::filled(side, side, [255, 255, 255]).unwrap();
    for y in 2..side - 2 {
        for x in 2..side - 2 {
            let (c1, c2): (f64, f64) = (rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0));
            img.set(
                x,
                y,
                [
                    to_byte(vh[0] * c1 + ve[0] * c2),
                    to_byte(vh[1] * c1 + ve[1] * c2),
                    to_byte(vh[2] * c1 + ve[2] * c2),
                ],
            );
        }
    }
    img
}

fn bench_stain(c: &mut Criterion) {
    let img = two_stain_image(512, 1);
    let target = StainBasis::he_reference();
    c.bench_function("stain_normalize_512", |b| {
        b.iter(|| normalize_image(&img, &target).unwrap())
    });
}

fn bench_superpixels(c: &mut Criterion) {
    let img = two_stain_image(256, 2);
    c.bench_function("slic_256_k64", |b| b.iter(|| slic_superpixels(&img, 64, 10.0, 10).unwrap()));
    let map = slic_superpixels(&img, 64, 10.0, 10).unwrap();
    c.bench_function("merge_256", |b| b.iter(|| merge_superpixels(&img, &map, 0.08).unwrap()));
}

fn bench_topology(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<(f64, f64)> =
        (0..1000).map(|_| (rng.gen_range(0.0..2000.0), rng.gen_range(0.0..2000.0))).collect();
    c.bench_function("cell_topology_1k", |b| {
        b.iter(|| build_cell_topology(&pts, 5, 50.0).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = SynthConfig::default();
    let data = generate_synthetic_dataset(4, 4, &default_recipes(), &cfg).unwrap();
    let arch = HactNetConfig {
        cell_feat_dim: data[0].0.cell.feature_dim(),
        tissue_feat_dim: data[0].0.tissue.feature_dim(),
        ..HactNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = HactNet::new(arch, &mut rng).unwrap();
    let prepared: Vec<PreparedGraph> =
        data.iter().map(|(g, _)| PreparedGraph::raw(g).unwrap()).collect();
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();

    let single = &prepared[0];
    c.bench_function("forward_eval_single", |b| {
        b.iter(|| model.forward(single, Mode::Eval).unwrap())
    });

    c.bench_function("train_step_batch8", |b| {
        b.iter_batched(
            || (model.clone(), adam_for(&model, 1e-3)),
            |(mut m, mut adam)| {
                let refs: Vec<&PreparedGraph> = prepared.iter().collect();
                train_step(&mut m, &mut adam, &refs, &labels).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_stain, bench_superpixels, bench_topology, bench_model);
criterion_main!(benches);
