use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use d3tom_core::kvcache::{run_cached_decode, CachedDecodeOptions};
use d3tom_core::{init_weights, run_decode, MergeSchedule, ModelConfig, Prompt};

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        d_ff: 192,
        n_layers: 4,
        n_heads: 2,
        n_visual: 256,
        n_prompt: 16,
        n_output: 16,
        n_steps: 8,
        merge_layer: 1,
        ..ModelConfig::toy()
    }
}

fn bench_decode(c: &mut Criterion) {
    let cfg = config();
    let w = init_weights(&cfg).unwrap();
    let p = Prompt::synthesize(&cfg);
    let mut g = c.benchmark_group("decode");
    g.sample_size(10);
    g.bench_function("baseline", |b| b.iter(|| run_decode(&w, &p, None).unwrap()));
    for alpha in [0.5, 0.9] {
        let s = MergeSchedule::constant(alpha).unwrap();
        g.bench_with_input(BenchmarkId::new("d3tom", alpha), &s, |b, s| {
            b.iter(|| run_decode(&w, &p, Some(s)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("d3tom_kv_cache", alpha), &s, |b, s| {
            b.iter(|| run_cached_decode(&w, &p, Some(s), CachedDecodeOptions::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_decode);
criterion_main!(benches);
