use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cvar_core::loss::{total_objective, EmbedNet, LossConfig};
use cvar_core::model::{forward, ModelConfig, ModelParams, ParamVars};
use cvar_core::scene::{render, SceneSpec, VideoClip, View};
use cvar_core::tape::Tape;

fn desk_model() -> ModelConfig {
    ModelConfig::default()
}

fn desk_clip(seed: u64, view: View) -> VideoClip {
    let scene = SceneSpec::generate(seed, (seed % 8) as usize, 8).unwrap();
    let rigs = scene.rigs(view, 32, 32);
    render(&scene, &rigs, 32, 32, view).unwrap().0
}

fn bench_render(c: &mut Criterion) {
    let scene = SceneSpec::generate(11, 3, 8).unwrap();
    let rigs = scene.rigs(View::Exo, 32, 32);
    c.bench_function("render_clip_32x32x8", |b| {
        b.iter(|| render(black_box(&scene), &rigs, 32, 32, View::Exo).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = desk_model();
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let clip = desk_clip(3, View::Exo);
    c.bench_function("forward_desk_model", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &params, false);
            forward(&mut tape, &pv, black_box(&clip), &cfg, View::Exo, None).unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = desk_model();
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let lcfg = LossConfig::default();
    let embed = EmbedNet::<f32>::random(&cfg, 7).unwrap();
    let exo: Vec<VideoClip> = (0..4).map(|i| desk_clip(100 + i, View::Exo)).collect();
    let ego: Vec<VideoClip> = (0..4).map(|i| desk_clip(200 + i, View::Ego)).collect();
    let exo_refs: Vec<&VideoClip> = exo.iter().collect();
    let ego_refs: Vec<&VideoClip> = ego.iter().collect();
    c.bench_function("objective_fwd_bwd_batch4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &params, true);
            let out = total_objective(
                &mut tape,
                &pv,
                black_box(&exo_refs),
                black_box(&ego_refs),
                &cfg,
                &lcfg,
                Some(&embed),
                None,
            )
            .unwrap();
            tape.backward(out.total).unwrap()
        })
    });
}

criterion_group!(benches, bench_render, bench_forward, bench_train_step);
criterion_main!(benches);
