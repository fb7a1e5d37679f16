//! Sequential-versus-parallel comparison of the two data-parallel hot
//! paths: batch feature extraction and bagged member training.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tempfile::TempDir;

use piqi::featpipe;
use piqi::manifest::{DatasetManifest, Polarity};
use piqi::stackens::{self, BagConfig};

fn synth_manifest(dir: &TempDir, count: usize) -> DatasetManifest {
    let rows = (0..count)
        .map(|i| {
            let path = dir.path().join(format!("img{i}.png"));
            let img = image::RgbImage::from_fn(64, 64, |x, y| {
                let v = ((x * 31 + y * 17 + i as u32 * 97) % 256) as u8;
                image::Rgb([v, v.wrapping_add(60), v.wrapping_mul(3)])
            });
            img.save(&path).unwrap();
            (path, i as f64 / count as f64)
        })
        .collect();
    DatasetManifest {
        dataset_name: "bench".into(),
        score_min: 0.0,
        score_max: 1.0,
        polarity: Polarity::HigherBetter,
        rows,
    }
}

fn synth_training(n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut state = 7u64;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| next()).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    (x, y)
}

fn bench_extract(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(&dir, 8);
    let mut group = c.benchmark_group("extract_batch");
    group.sample_size(10);
    for jobs in [1usize, 0] {
        let label = if jobs == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            b.iter(|| featpipe::extract_batch(&manifest, jobs).unwrap());
        });
    }
    group.finish();
}

fn bench_bag_train(c: &mut Criterion) {
    let (x, y) = synth_training(60, 24);
    let cfg = BagConfig {
        n_members: 8,
        tune_budget: 5,
        master_seed: 1,
        ..BagConfig::default()
    };
    let mut group = c.benchmark_group("bag_train");
    group.sample_size(10);
    for jobs in [1usize, 0] {
        let label = if jobs == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            b.iter(|| stackens::bag_train(&x, &y, &cfg, jobs).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_extract, bench_bag_train);
criterion_main!(benches);
