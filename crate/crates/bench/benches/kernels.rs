use agentdiff::data::SpanLayout;
use agentdiff::decoding::{decode, DecodeConfig};
use agentdiff::masks::{block_decode_mask, span_aware_mask};
use agentdiff::model::forward;
use agentdiff::training::{evaluate, BatchItem, Objective, Regime};
use agentdiff::corruption::NoiseLevel;
use agentdiff_bench::{context, examples, model};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn masks(c: &mut Criterion) {
    let mut g = c.benchmark_group("masks");
    for n in [64usize, 256] {
        let layout = SpanLayout::new(n - 32, n).unwrap();
        g.bench_with_input(BenchmarkId::new("span_aware", n), &layout, |b, l| {
            b.iter(|| span_aware_mask(black_box(l)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("block_decode", n), &n, |b, &n| {
            b.iter(|| block_decode_mask(black_box(n - 32), n - 32, 32).unwrap())
        });
    }
    g.finish();
}

fn forward_pass(c: &mut Criterion) {
    let p = model();
    let ex = &examples()[0];
    let padded = ex.padded(32);
    let tokens = padded.tokens();
    let mask = span_aware_mask(&padded.layout).unwrap();
    c.bench_function("forward/span_aware", |b| b.iter(|| forward(&p, black_box(&tokens), &mask).unwrap()));
    let item = [BatchItem { example: ex, level: NoiseLevel::new(8, 16).unwrap(), seed: 1 }];
    c.bench_function("loss/combined", |b| {
        b.iter(|| evaluate(&p, &Objective { lambda: 0.5, ..Objective::default() }, black_box(&item)).unwrap())
    });
}

fn decoding(c: &mut Criterion) {
    let p = model();
    let ctx = context(96);
    let mut g = c.benchmark_group("decode");
    g.sample_size(20);
    for regime in [Regime::Diffusion, Regime::Ar] {
        let cfg = DecodeConfig { regime, max_action_len: 32, ..DecodeConfig::default() };
        g.bench_function(regime.to_string(), |b| b.iter(|| decode(&p, black_box(&ctx), &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, masks, forward_pass, decoding);
criterion_main!(benches);
