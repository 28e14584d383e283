//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wheelgen_core::conditioning::{build_bundle, ConditioningBundle, ConditioningSources, ToyEmbedder, DEFAULT_PROMPT};
use wheelgen_core::engine::conditioning_seed;
use wheelgen_core::exemplars::{aggregate_top_percent, build_corpus, percentile_target, record_vote, AnnotationTask, Corpus, ExemplarStore, VoteMatrix};
use wheelgen_core::image::{DiskImageStore, MemoryImageStore};
use wheelgen_core::metrics::{gap_variance_statistic, mann_whitney_greater, median, wheelness};
use wheelgen_core::pipeline::{output_seed, sample_vanilla, MASK_BACKGROUND};
use wheelgen_core::symmetry::symmetry_score_with;
use wheelgen_core::toy::{train_toy_denoiser, MixtureDenoiser, TrainConfig, TrainingItem};
use wheelgen_core::*;

const CANVAS: usize = 64;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stub_schedule() -> DenoiseSchedule {
    // same noise levels as the 1000-step toy schedule at a quarter of the steps
    DenoiseSchedule::linear(250, 4e-4, 0.08).unwrap()
}

fn stub_generator(images: Arc<dyn ImageRepo>) -> Generator {
    let stub = MixtureDenoiser::synthetic(CANVAS, 16, stub_schedule(), 5).unwrap();
    let backends = BackendRegistry::new().with(Arc::new(stub));
    let mut store = ExemplarStore::in_memory();
    store.add_corpus(&build_corpus(150, 3, CANVAS).unwrap());
    Generator::new(CANVAS, backends, Arc::new(ToyEmbedder), images, store)
}

fn stub_request(keyword: &str, symmetry: SymmetryConfig, seed: u64) -> GenerationRequest {
    let mut r = GenerationRequest::new(vec![ConceptGroup::new(keyword)], symmetry, MixtureDenoiser::SYNTHETIC_ID);
    r.seed = seed;
    r
}

fn symmetry_invariance() -> Outcome {
    let started = Instant::now();
    let g = stub_generator(Arc::new(MemoryImageStore::new()));
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    for k in [2u32, 3, 4, 6, 8, 12] {
        for seed in 0..60u64 {
            for (interp, bound, name) in [
                (Interpolation::Bilinear, 2.0 / 255.0, "bilinear"),
                (Interpolation::Nearest, 1e-9, "nearest"),
            ] {
                let mut sym = SymmetryConfig::for_canvas(CANVAS, k);
                sym.interpolation = interp;
                let out = g.generate(&stub_request("bold", sym.clone(), seed)).map_err(|e| e.to_string())?;
                let img = &out.images[0];
                let s = symmetry_score_with(img, k, sym.center, sym.radius, interp).unwrap();
                let w = worst.entry(name).or_insert(0.0);
                *w = w.max(s);
                if s > bound {
                    failures.push(format!("k={k} seed={seed} {name} {s:.3e}"));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        failures.is_empty() && secs < 300.0,
        format!(
            "720 runs in {secs:.0}s; worst bilinear {:.2e} (≤ {:.2e}), worst nearest {:.1e} (≤ 1e-9); failures {:?}",
            worst["bilinear"],
            2.0 / 255.0,
            worst["nearest"],
            failures
        ),
    )
}

fn degenerate_plan() -> Outcome {
    let g = stub_generator(Arc::new(MemoryImageStore::new()));
    let backend = g.backends().get(MixtureDenoiser::SYNTHETIC_ID).unwrap();
    let schedule = backend.native_schedule().unwrap().clone();
    for seed in 0..10u64 {
        let mut req = stub_request("dynamic", SymmetryConfig::disabled(CANVAS), 100 + seed);
        req.sampling.boundaries = Some(vec![]);
        req.sampling.template_as_sketch = false;
        req.output_count = 2;
        let out = g.generate(&req).map_err(|e| e.to_string())?;

        let exemplars = g.exemplars();
        let sources = ConditioningSources {
            embedder: &ToyEmbedder,
            exemplars: &exemplars,
            images: g.images().as_ref(),
            canvas: CANVAS,
            default_prompt: DEFAULT_PROMPT,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(conditioning_seed(req.seed));
        let cond = build_bundle(&out.request, &sources, &mut rng).unwrap().bundle;
        for (i, img) in out.images.iter().enumerate() {
            let vanilla = sample_vanilla(backend.as_ref(), &schedule, &cond, output_seed(req.seed, i as u32)).unwrap();
            let same_bits = img.data().iter().zip(vanilla.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same_bits || img.to_png().unwrap() != vanilla.to_png().unwrap() {
                return Err(format!("seed {} output {i} differs from vanilla sampling", req.seed));
            }
        }
    }
    Ok("10 seeds x 2 outputs byte-identical to vanilla sampling".into())
}

fn zero_weight_invariance() -> Outcome {
    let images: Arc<dyn ImageRepo> = Arc::new(MemoryImageStore::new());
    let g = stub_generator(images.clone());
    let corpus = build_corpus(4, 77, CANVAS).unwrap();
    let a = images.put(&corpus.items[0].image).unwrap();
    let b = images.put(&corpus.items[1].image).unwrap();
    let c = images.put(&corpus.items[2].image).unwrap();
    let sym = SymmetryConfig::for_canvas(CANVAS, 5);
    for seed in 0..10u64 {
        // a zero-weight image next to others, and a group whose only image has weight 0
        let with_zero = vec![
            ConceptGroup::new("bold").with_image("a", a.clone(), 1.0).with_image("b", b.clone(), 0.0),
            ConceptGroup::new("sharp").with_image("c", c.clone(), 0.0),
        ];
        let deleted = vec![ConceptGroup::new("bold").with_image("a", a.clone(), 1.0), ConceptGroup::new("sharp")];
        let mut r1 = stub_request("x", sym.clone(), seed);
        r1.concepts = with_zero;
        r1.output_count = 2;
        let mut r2 = r1.clone();
        r2.concepts = deleted;
        let o1 = g.generate(&r1).map_err(|e| e.to_string())?;
        let o2 = g.generate(&r2).map_err(|e| e.to_string())?;
        for (x, y) in o1.images.iter().zip(&o2.images) {
            if x.to_png().unwrap() != y.to_png().unwrap() {
                return Err(format!("seed {seed}: zero weight changed the output"));
            }
        }
    }
    Ok("10 seeds x 2 outputs byte-identical".into())
}

fn circular_mask() -> Outcome {
    let g = stub_generator(Arc::new(MemoryImageStore::new()));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut outside_total = 0usize;
    for case in 0..200u64 {
        let edge = (CANVAS - 1) as f64;
        let center = (rng.random_range(8.0..edge - 8.0), rng.random_range(8.0..edge - 8.0));
        let max_r = SymmetryConfig::max_radius(CANVAS, center);
        let mut sym = SymmetryConfig::for_canvas(CANVAS, rng.random_range(2..=12));
        sym.center = center;
        sym.radius = rng.random_range(2.0..=max_r);
        sym.final_replication = rng.random_bool(0.5);
        if rng.random_bool(0.5) {
            sym.interpolation = Interpolation::Nearest;
        }
        let mut req = stub_request("organic", sym.clone(), case);
        req.sampling.boundaries = Some(vec![60, 180]);
        let out = g.generate(&req).map_err(|e| e.to_string())?;
        let img = &out.images[0];
        for r in 0..CANVAS {
            for c in 0..CANVAS {
                if (r as f64 - center.0).hypot(c as f64 - center.1) > sym.radius {
                    outside_total += 1;
                    if img.get(r, c, 0) != MASK_BACKGROUND {
                        return Err(format!("case {case}: pixel ({r},{c}) = {}", img.get(r, c, 0)));
                    }
                }
            }
        }
    }
    Ok(format!("200 (center, radius) pairs, {outside_total} out-of-disc pixels all background"))
}

fn oracle(m: &VoteMatrix, percentile: f64, min_votes: u32) -> BTreeSet<String> {
    let pool: Vec<(&String, u32)> = m.counts.iter().map(|(k, &v)| (k, v)).filter(|(_, v)| *v >= min_votes).collect();
    let target = ((percentile * pool.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    pool.iter()
        .filter(|(_, v)| pool.iter().filter(|(_, w)| w > v).count() < target)
        .map(|(k, _)| k.to_string())
        .collect()
}

fn top_percent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tie_cases = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=120);
        let max_votes = if case % 3 == 0 { 2 } else { rng.random_range(1..=40) };
        let counts: BTreeMap<String, u32> = (0..n).map(|i| (format!("w{i:03}"), rng.random_range(0..=max_votes))).collect();
        let m = VoteMatrix::from_counts("k", counts, max_votes).unwrap();
        let p = [0.05, 0.01, 0.1, 0.25, 1.0][case % 5];
        let min_votes = (case % 2) as u32;
        let want = oracle(&m, p, min_votes);
        let got = aggregate_top_percent(&m, p, min_votes);
        if want.is_empty() {
            if got.is_ok() {
                return Err(format!("case {case}: expected empty-pool error"));
            }
            continue;
        }
        let got: BTreeSet<String> = got.unwrap().wheel_ids.into_iter().collect();
        if got != want {
            return Err(format!("case {case}: {got:?} != {want:?}"));
        }
        let pool = m.counts.values().filter(|&&v| v >= min_votes).count();
        if got.len() > percentile_target(p, pool) {
            tie_cases += 1;
        }
    }

    // annotation-shaped data: 16 raters pick 10 of 25 wheels, with shared taste
    let mut sizes = BTreeSet::new();
    for kw in 0..200 {
        let ids: Vec<String> = (0..25).map(|i| format!("w{i:02}")).collect();
        let task = AnnotationTask::new("t", &format!("kw{kw}"), ids.clone(), 10).unwrap();
        let appeal: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..3.0f64)).collect();
        let mut m = VoteMatrix::for_task(&task);
        for rater in 0..16 {
            let mut scored: Vec<(f64, &String)> = ids.iter().zip(&appeal).map(|(id, a)| (a + rng.random_range(0.0..2.0), id)).collect();
            scored.sort_by(|x, y| y.0.total_cmp(&x.0));
            let pick: Vec<String> = scored.iter().take(10).map(|(_, id)| id.to_string()).collect();
            record_vote(&task, &mut m, &format!("r{rater}"), &pick).unwrap();
        }
        let set = aggregate_top_percent(&m, 0.05, 1).unwrap();
        if set.wheel_ids.iter().cloned().collect::<BTreeSet<_>>() != oracle(&m, 0.05, 1) {
            return Err(format!("annotation case {kw} disagrees with the oracle"));
        }
        sizes.insert(set.wheel_ids.len());
    }
    let (lo, hi) = (*sizes.first().unwrap(), *sizes.last().unwrap());
    ensure(
        tie_cases > 0 && hi > lo,
        format!("1000 matrices agree with the oracle ({tie_cases} with tie-extended sets); 25-wheel tasks give sets of {lo}..={hi}"),
    )
}

struct Toy {
    model: MixtureDenoiser,
    corpus: Corpus,
    train_seconds: f64,
}

fn trained_toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let corpus = build_corpus(2000, 0, CANVAS).unwrap();
        let items: Vec<TrainingItem> = corpus
            .items
            .iter()
            .map(|i| TrainingItem {
                image: i.image.clone(),
                labels: i.labels.clone(),
            })
            .collect();
        let started = Instant::now();
        let model = train_toy_denoiser(&items, &DenoiseSchedule::default_toy(), &ToyEmbedder, &TrainConfig::default()).unwrap();
        Toy {
            model,
            corpus,
            train_seconds: started.elapsed().as_secs_f64(),
        }
    })
}

fn toy_generator(toy: &Toy, images: Arc<dyn ImageRepo>) -> Generator {
    let mut store = ExemplarStore::in_memory();
    store.add_corpus(&toy.corpus);
    let backends = BackendRegistry::new().with(Arc::new(toy.model.clone()));
    Generator::new(CANVAS, backends, Arc::new(ToyEmbedder), images, store)
}

fn toy_end_to_end() -> Outcome {
    let toy = trained_toy();
    let schedule = DenoiseSchedule::default_toy();
    let null = ConditioningBundle::unconditional();
    let unconditioned: Vec<ImageTensor> = (0..50)
        .map(|s| sample_vanilla(&toy.model, &schedule, &null, 10_000 + s).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise: Vec<ImageTensor> = (0..50)
        .map(|_| ImageTensor::from_fn(CANVAS, CANVAS, |_, _| rng.random::<f32>()))
        .collect();
    let w_samples = median(&unconditioned.iter().map(|i| wheelness(i).score).collect::<Vec<_>>());
    let w_noise = median(&noise.iter().map(|i| wheelness(i).score).collect::<Vec<_>>());

    // keyword-only request; symmetry off since replication would erase irregular gaps
    let g = toy_generator(toy, Arc::new(MemoryImageStore::new()));
    let mut dynamic = Vec::new();
    for s in 0..50u64 {
        let mut req = GenerationRequest::new(vec![ConceptGroup::new("dynamic")], SymmetryConfig::disabled(CANVAS), toy.model.id());
        req.seed = 20_000 + s;
        let out = g.generate(&req).map_err(|e| e.to_string())?;
        dynamic.push(gap_variance_statistic(&out.images[0]));
    }
    let base: Vec<f64> = unconditioned.iter().map(gap_variance_statistic).collect();
    let test = mann_whitney_greater(&dynamic, &base);
    let rep = toy.model.training.as_ref().unwrap();
    ensure(
        toy.train_seconds < 3600.0
            && rep.final_loss <= 0.5 * rep.initial_loss
            && w_samples - w_noise >= 0.2
            && test.p_value < 0.05,
        format!(
            "trained in {:.0}s (noise MSE {:.3} -> {:.3}); wheel-ness median {w_samples:.3} vs noise {w_noise:.3}; \
             gap CV median dynamic {:.3} vs unconditioned {:.3}, U={} p={:.2e}",
            toy.train_seconds,
            rep.initial_loss,
            rep.final_loss,
            median(&dynamic),
            median(&base),
            test.u,
            test.p_value
        ),
    )
}

fn constraint_monotonicity() -> Outcome {
    let g = stub_generator(Arc::new(MemoryImageStore::new()));
    let steps = stub_schedule().steps();
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [2u32, 3, 4, 6, 8, 12] {
        let mut medians = Vec::new();
        // one more evenly spaced boundary each time
        for parts in 1..=6 {
            let plan = SubProcessPlan::evenly_spaced(steps, parts, ProjectMode::default());
            let mut scores = Vec::new();
            for seed in 0..20u64 {
                let mut sym = SymmetryConfig::for_canvas(CANVAS, k);
                sym.final_replication = false;
                let mut req = stub_request("complex", sym.clone(), 300 + seed);
                req.sampling.boundaries = Some(plan.boundaries().to_vec());
                req.sampling.template_as_sketch = false;
                let out = g.generate(&req).map_err(|e| e.to_string())?;
                scores.push(symmetry_score_with(&out.images[0], k, sym.center, sym.radius, Interpolation::Bilinear).unwrap());
            }
            medians.push(median(&scores));
        }
        ok &= medians.windows(2).all(|w| w[1] <= w[0]);
        lines.push(format!(
            "k={k}: {}",
            medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        ));
    }
    ensure(ok, format!("median symmetry score for 0..=5 boundaries; {}", lines.join("; ")))
}

fn replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let images_dir = dir.path().join("images");
    let records_dir = dir.path().join("records");
    let toy = trained_toy();
    let mut ids = Vec::new();
    {
        let images: Arc<dyn ImageRepo> = Arc::new(DiskImageStore::open(&images_dir).unwrap());
        let records = RecordStore::open(&records_dir).unwrap();
        let stub = stub_generator(images.clone());
        let corpus = build_corpus(3, 9, CANVAS).unwrap();
        let insp = images.put(&corpus.items[0].image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..4u64 {
            let mut req = stub_request("bold", SymmetryConfig::for_canvas(CANVAS, 3 + seed as u32), seed);
            req.concepts.push(ConceptGroup::new("sharp").with_image("i1", insp.clone(), 0.6));
            req.output_count = 2;
            let root = stub.generate_record(&req, None, &records).map_err(|e| e.to_string())?;
            let delta = FeedbackDelta {
                removed_inspiration_ids: vec!["i1".into()],
                note: "less sharp".into(),
                ..Default::default()
            };
            let child = stub.regenerate(&records, &root.id, &delta, &mut rng).map_err(|e| e.to_string())?;
            ids.extend([root.id, child.id]);
        }
        let tg = toy_generator(toy, images.clone());
        for seed in 0..2u64 {
            let req = GenerationRequest::new(vec![ConceptGroup::new("simple")], SymmetryConfig::for_canvas(CANVAS, 5), toy.model.id());
            let mut req = req;
            req.seed = seed;
            ids.push(tg.generate_record(&req, None, &records).map_err(|e| e.to_string())?.id);
        }
    }
    // fresh process state: reopen the stores and replay every record
    let images: Arc<dyn ImageRepo> = Arc::new(DiskImageStore::open(&images_dir).unwrap());
    let records = RecordStore::open(&records_dir).unwrap();
    let stub = stub_generator(images.clone());
    let tg = toy_generator(toy, images.clone());
    for id in &ids {
        let rec = records.get(id).ok_or(format!("record {id} lost"))?;
        let g = if rec.request.backend_id == MixtureDenoiser::SYNTHETIC_ID { &stub } else { &tg };
        let replayed = g.replay(&rec).map_err(|e| e.to_string())?;
        for (img, stored) in replayed.iter().zip(&rec.outputs) {
            if img.to_png().unwrap() != images.png_bytes(&stored.sha256).unwrap() {
                return Err(format!("record {id} does not replay byte-identically"));
            }
        }
    }
    Ok(format!("{} records (incl. feedback children and trained-backend runs) replay byte-identically after reopening", ids.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("symmetry invariance", symmetry_invariance),
        ("degenerate-plan bitwise equivalence", degenerate_plan),
        ("zero-weight invariance", zero_weight_invariance),
        ("circular mask", circular_mask),
        ("top-5% aggregation", top_percent),
        ("toy end-to-end", toy_end_to_end),
        ("constraint monotonicity", constraint_monotonicity),
        ("determinism/reproducibility", replay_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
