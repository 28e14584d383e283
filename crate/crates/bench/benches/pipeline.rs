use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use wheelgen_core::exemplars::{build_corpus, ExemplarStore};
use wheelgen_core::image::MemoryImageStore;
use wheelgen_core::pipeline::{ddpm_step, denoise_range, init_state, project_constraints, Constraints, NoiseKey};
use wheelgen_core::toy::MixtureDenoiser;
use wheelgen_core::{
    BackendRegistry, ConceptGroup, ConditioningBundle, DenoiseSchedule, DenoiserBackend, GenerationRequest, Generator,
    ProjectMode, SymmetryConfig, ToyEmbedder,
};

const CANVAS: usize = 64;

fn steps(c: &mut Criterion) {
    let schedule = DenoiseSchedule::linear(250, 4e-4, 0.08).unwrap();
    let model = MixtureDenoiser::synthetic(CANVAS, 16, schedule.clone(), 0).unwrap();
    let cond = ConditioningBundle::unconditional();
    let len = CANVAS * CANVAS * model.channels();
    let noise = NoiseKey::new(1);
    let x = init_state(None, len, &schedule, 0, &mut noise.init()).unwrap();
    let t = 125;
    let eps = model.predict_noise(&x.data, t, &cond).unwrap();
    let constraints = Constraints::new(CANVAS, &SymmetryConfig::for_canvas(CANVAS, 4)).unwrap();

    let mut g = c.benchmark_group("pipeline");
    g.bench_function("predict_noise", |b| b.iter(|| model.predict_noise(black_box(&x.data), t, &cond).unwrap()));
    g.bench_function("ddpm_step", |b| b.iter(|| ddpm_step(black_box(&x.data), &eps, t, &schedule, &mut noise.step(t))));
    g.bench_function("denoise_10_steps", |b| {
        b.iter(|| {
            let mut s = x.clone();
            s.step = t;
            denoise_range(s, t - 10, &cond, &model, &schedule, &noise).unwrap()
        })
    });
    for mode in [ProjectMode::OnX0ThenRenoise, ProjectMode::OnSample] {
        let name = format!("project_{mode:?}").to_lowercase();
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut s = x.clone();
                s.step = t;
                project_constraints(s, constraints.as_ref(), mode, &schedule, &model, &cond, &mut noise.renoise(t)).unwrap()
            })
        });
    }
    g.finish();
}

fn generation(c: &mut Criterion) {
    let schedule = DenoiseSchedule::linear(250, 4e-4, 0.08).unwrap();
    let model = MixtureDenoiser::synthetic(CANVAS, 16, schedule, 0).unwrap();
    let mut store = ExemplarStore::in_memory();
    store.add_corpus(&build_corpus(100, 0, CANVAS).unwrap());
    let generator = Generator::new(
        CANVAS,
        BackendRegistry::new().with(Arc::new(model)),
        Arc::new(ToyEmbedder),
        Arc::new(MemoryImageStore::new()),
        store,
    );
    let req = GenerationRequest::new(
        vec![ConceptGroup::new("dynamic")],
        SymmetryConfig::for_canvas(CANVAS, 6),
        MixtureDenoiser::SYNTHETIC_ID,
    );
    let mut g = c.benchmark_group("generation");
    g.sample_size(10);
    g.bench_function("one_image_250_steps", |b| b.iter(|| generator.generate(black_box(&req)).unwrap()));
    g.finish();
}

criterion_group!(benches, steps, generation);
criterion_main!(benches);
