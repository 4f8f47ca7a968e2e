//! Sequential vs rayon execution for batch NMS and for the enrichment
//! stages over a synthetic dataset served by stubs.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use fullanno::fixture;
use fullanno::geometry::{nms_indices, NmsParams, SourcePriorities};
use fullanno::model::{BBox, Detection};
use fullanno::par::{map_ordered, Execution};
use fullanno::pipeline::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CATS: [&str; 4] = ["person", "car", "dog", "sign"];

fn instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::with_capacity(n);
    for _ in 0..n {
        let det = match out.last() {
            Some(prev) if rng.gen_bool(0.4) => {
                let b = prev.bbox;
                Detection::new(
                    BBox::new(b.x + rng.gen_range(-3.0..3.0), b.y + rng.gen_range(-3.0..3.0), b.w, b.h),
                    &prev.category,
                    rng.gen_range(0.0..1.0),
                    "a",
                )
            }
            _ => Detection::new(
                BBox::new(rng.gen_range(0.0..600.0), rng.gen_range(0.0..400.0), rng.gen_range(5.0..120.0), rng.gen_range(5.0..120.0)),
                CATS[rng.gen_range(0..CATS.len())],
                rng.gen_range(0.0..1.0),
                "a",
            ),
        };
        out.push(det);
    }
    out
}

fn modes() -> [(&'static str, Execution); 2] {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4).max(2);
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel { workers })]
}

fn batch_nms(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch: Vec<Vec<Detection>> = (0..256).map(|_| instance(&mut rng, 300)).collect();
    let priorities = SourcePriorities::from_order(["a"]);
    let params = NmsParams::default();
    let mut group = c.benchmark_group("batch_nms_256x300");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_ordered(exec, &batch, |dets| nms_indices(dets, &params, &priorities).unwrap().len()))
        });
    }
    group.finish();
}

fn stages(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture::generate(dir.path(), 200, 3).unwrap();
    let mut group = c.benchmark_group("stages_1_to_3_200_images");
    group.sample_size(10);
    for (name, exec) in modes() {
        let mut cfg = fx.config.clone();
        cfg.worker_count = exec.workers();
        cfg.cache.enabled = false;
        cfg.checkpoint_batch = 64;
        for ep in &mut cfg.endpoints {
            ep.requests_per_minute = usize::MAX / 2;
            ep.max_in_flight = 256;
        }
        let engine = Engine::from_config(cfg).unwrap();
        let (handle, _) = engine.ingest().unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || handle.clone(),
                |h| {
                    let h = engine.run_stage1(h).unwrap();
                    let h = engine.run_stage2(h).unwrap();
                    engine.run_stage3(h).unwrap()
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, batch_nms, stages);
criterion_main!(benches);
