//! Batch throughput of the enhancement path (plan, baseline enhance, metrics).
//!
//! With the `parallel` feature the same workload runs inside a one-thread pool
//! and inside the default pool; without it the sequential build is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use eba_core::adaptive::plan;
use eba_core::metrics::evaluate_pair;
use eba_core::{par, AdaptiveParams, BaselineConfig, BaselineEnhancer, Enhancer, ImageBuf};

fn batch(n: usize, side: usize) -> Vec<(ImageBuf, ImageBuf)> {
    (0..n)
        .map(|k| {
            let k = k as f64;
            let gt = ImageBuf::from_fn(side, side, |x, y| {
                let v = 0.5 + 0.4 * ((x as f64 / 9.0 + k).sin() * (y as f64 / 7.0).cos());
                [v, v, v]
            });
            let hazy = ImageBuf::from_fn(side, side, |x, y| {
                let v = gt.pixel(x, y)[0];
                [0.1 + 0.4 * v, 0.2 + 0.6 * v, 0.3 + 0.6 * v]
            });
            (hazy, gt)
        })
        .collect()
}

fn workload(items: &[(ImageBuf, ImageBuf)], enh: &BaselineEnhancer, params: &AdaptiveParams) -> f64 {
    let scores = par::map(items, |(input, gt)| {
        let (p, _) = plan(input, params).unwrap();
        let out = enh.enhance("bench", input, &p, None).unwrap();
        evaluate_pair(&out, gt).unwrap().psnr_db
    });
    scores.iter().sum()
}

fn throughput(c: &mut Criterion) {
    let items = batch(8, 128);
    let enh = BaselineEnhancer::new(BaselineConfig::default()).unwrap();
    let params = AdaptiveParams::default();
    let mut g = c.benchmark_group("enhance_batch");
    g.sample_size(10);
    g.throughput(Throughput::Elements(items.len() as u64));

    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let default = rayon::ThreadPoolBuilder::new().build().unwrap();
        for (name, pool) in [("pool_1", &single), ("pool_default", &default)] {
            g.bench_with_input(BenchmarkId::new(name, pool.current_num_threads()), &items, |b, items| {
                b.iter(|| pool.install(|| workload(items, &enh, &params)))
            });
        }
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_with_input(BenchmarkId::new("sequential", 1), &items, |b, items| {
        b.iter(|| workload(items, &enh, &params))
    });
    g.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
