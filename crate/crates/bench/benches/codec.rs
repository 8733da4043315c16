use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cnc_core::codec::range::{decode_signs, encode_signs, quantize_prob};
use cnc_core::codec::{decode_model, encode_model, EncodeOptions};
use cnc_core::context::ContextFuser;
use cnc_core::field::{init_model, synth_field, FieldKind};
use cnc_core::{CodingMode, TrainConfig};

const SYMBOLS: usize = 100_000;

fn symbols() -> (Vec<i8>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probs: Vec<u16> = (0..SYMBOLS).map(|_| quantize_prob(rng.gen_range(0.05..0.95))).collect();
    let signs = probs
        .iter()
        .map(|&p| if rng.gen_range(0..65536) < p as u32 { 1 } else { -1 })
        .collect();
    (signs, probs)
}

fn range_coder(c: &mut Criterion) {
    let (signs, probs) = symbols();
    let coded = encode_signs(&signs, &probs);
    let mut g = c.benchmark_group("range");
    g.throughput(Throughput::Elements(SYMBOLS as u64));
    g.bench_function("encode", |b| b.iter(|| encode_signs(black_box(&signs), black_box(&probs))));
    g.bench_function("decode", |b| {
        b.iter(|| decode_signs(black_box(&coded), black_box(&probs)).unwrap())
    });
    g.finish();
}

fn fusers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = 4096;
    let mut g = c.benchmark_group("fuser");
    g.throughput(Throughput::Elements(batch as u64));
    for (name, mode) in [
        ("3d", CodingMode::Volume { context_levels: 3 }),
        (
            "2d",
            CodingMode::Plane {
                context_levels: 3,
                pvf: true,
            },
        ),
    ] {
        let fuser = ContextFuser::init(mode, 8, &mut rng);
        let rows: Vec<f32> = (0..batch * fuser.input_width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.bench_function(name, |b| b.iter(|| fuser.predict(black_box(&rows), batch).unwrap()));
    }
    g.finish();
}

fn model_codec(c: &mut Criterion) {
    let config = TrainConfig::small();
    let field = synth_field(FieldKind::SphereShell, 0, 1).unwrap();
    let model = init_model(&config, &field).unwrap();
    let options = EncodeOptions::default();
    let (bytes, _) = encode_model(&model, &options).unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("encode", |b| {
        b.iter_batched(|| model.clone(), |m| encode_model(&m, &options).unwrap(), BatchSize::LargeInput)
    });
    g.bench_function("decode", |b| b.iter(|| decode_model(black_box(&bytes)).unwrap()));
    g.finish();
}

criterion_group!(benches, range_coder, fusers, model_codec);
criterion_main!(benches);
