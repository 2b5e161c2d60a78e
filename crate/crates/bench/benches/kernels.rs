use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use worldmodel_bench::{desk_models, dodge_frames};
use worldmodel_core::config::Preset;
use worldmodel_core::dream::{dream_render, DreamControllerAgent, DreamEnv};
use worldmodel_core::env::{BatchEnv, Driver, Frame};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("vae");
    g.sample_size(10).measurement_time(Duration::from_secs(5));
    for preset in [Preset::Mini, Preset::DeskDodge] {
        let m = desk_models(preset);
        let frames = dodge_frames(32);
        let refs: Vec<&Frame> = frames.iter().collect();
        g.bench_with_input(BenchmarkId::new("encode_batch32", format!("{preset:?}")), &refs, |b, refs| {
            b.iter(|| black_box(m.vae.encode_batch(refs)))
        });
        let z = vec![0.1f32; m.vae.nz()];
        g.bench_with_input(BenchmarkId::new("decode", format!("{preset:?}")), &z, |b, z| b.iter(|| black_box(m.vae.decode(z).unwrap())));
    }
    g.finish();
}

fn lstm(c: &mut Criterion) {
    let mut g = c.benchmark_group("lstm_step");
    let m = desk_models(Preset::DeskDodge);
    let arch = &m.rnn.arch;
    for n in [1usize, 64] {
        let x = vec![0.05f32; n * arch.input_dim()];
        let h = vec![0.0f32; n * arch.hidden];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| black_box(m.rnn.step_batch(&x, &h, &h, n).unwrap()))
        });
    }
    g.finish();
}

/// One dream step of a single episode, optionally decoding the new latent
/// the way the server does for display.
fn dream(c: &mut Criterion) {
    let mut g = c.benchmark_group("dream_step");
    g.sample_size(20);
    let m = desk_models(Preset::DeskDodge);
    for render in [false, true] {
        let name = if render { "with_render" } else { "without_render" };
        g.bench_function(name, |b| {
            let env = DreamEnv::new(&m.rnn, &m.pool, m.dream.clone(), m.kinds.clone()).unwrap();
            let agent = DreamControllerAgent::new(&m.controller, m.kinds.clone()).unwrap();
            let mut d = Driver::new(env, agent);
            let mut seed = 0;
            d.reset(&[seed]).unwrap();
            b.iter(|| {
                if d.all_done() {
                    seed += 1;
                    d.reset(&[seed]).unwrap();
                }
                d.step(None).unwrap();
                if render {
                    black_box(dream_render(&m.vae, &d.observations()[0].z).unwrap());
                }
                black_box(d.env.action_kinds().len())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, lstm, dream);
criterion_main!(benches);
