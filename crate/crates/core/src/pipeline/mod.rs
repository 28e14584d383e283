//! Constrained ancestral sampling.
//!
//! The reverse process is split into sub-processes at plan boundaries. At
//! each boundary the radial-symmetry replication and circular mask are
//! projected onto the sample, and the final image gets one more mask (and
//! optionally one more replication).
//!
//! Samples live in `[-1, 1]`; images handed in and out are in `[0, 1]`.

mod backend;
mod schedule;

pub use backend::{BackendRegistry, DenoiserBackend, ZeroNoiseBackend};
pub use schedule::DenoiseSchedule;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::request::{GenerationRequest, SymmetryConfig};
use crate::symmetry::{mask_in_place, Replicator};

/// White, the canvas background of sketches and renders.
pub const MASK_BACKGROUND: f32 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectMode {
    /// Constrain the predicted clean image, then forward-diffuse it back to the boundary step.
    #[default]
    OnX0ThenRenoise,
    /// Constrain the noisy sample directly.
    OnSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubProcessPlan {
    boundaries: Vec<usize>,
    pub project_mode: ProjectMode,
}

impl SubProcessPlan {
    pub fn new(boundaries: Vec<usize>, project_mode: ProjectMode, steps: usize) -> Result<Self> {
        if boundaries.iter().any(|&b| b == 0 || b >= steps) {
            return Err(Error::Param(format!("boundaries must lie in (0, {steps})")));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param("boundaries must be strictly increasing".into()));
        }
        Ok(Self {
            boundaries,
            project_mode,
        })
    }

    /// No boundaries: only the final mask/replication, if any.
    pub fn none() -> Self {
        Self {
            boundaries: Vec::new(),
            project_mode: ProjectMode::default(),
        }
    }

    /// Two projections, at one and two thirds of the schedule.
    pub fn default_for(steps: usize, project_mode: ProjectMode) -> Self {
        Self::evenly_spaced(steps, 3, project_mode)
    }

    /// Boundaries splitting the schedule into `subprocesses` near-equal parts.
    pub fn evenly_spaced(steps: usize, subprocesses: usize, project_mode: ProjectMode) -> Self {
        let mut boundaries: Vec<usize> = (1..subprocesses.max(1))
            .map(|i| i * steps / subprocesses)
            .filter(|&b| b > 0 && b < steps)
            .collect();
        boundaries.dedup();
        Self {
            boundaries,
            project_mode,
        }
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }
}

/// Symmetry and mask operators for one canvas, built once per request.
#[derive(Clone, Debug)]
pub struct Constraints {
    replicator: Replicator,
    final_replication: bool,
    canvas: usize,
}

impl Constraints {
    /// `None` when symmetry is switched off: no replication and no mask.
    pub fn new(canvas: usize, cfg: &SymmetryConfig) -> Result<Option<Self>> {
        if !cfg.enabled {
            return Ok(None);
        }
        Ok(Some(Self {
            replicator: Replicator::from_config(canvas, cfg)?,
            final_replication: cfg.final_replication,
            canvas,
        }))
    }

    pub fn replicator(&self) -> &Replicator {
        &self.replicator
    }

    fn mask(&self, data: &mut [f32], channels: usize, background: f32) {
        mask_in_place(
            data,
            self.canvas,
            self.canvas,
            channels,
            self.replicator.center(),
            self.replicator.radius(),
            background,
        );
    }

    /// Replication followed by masking, on `[0, 1]` image values.
    fn project_image(&self, data: &mut [f32], channels: usize) {
        self.replicator.apply_in_place(data, channels);
        self.mask(data, channels, MASK_BACKGROUND);
    }
}

/// Noise draws of one output, keyed by purpose and step. Plans that differ
/// only in their boundaries therefore share every denoising draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    seed: u64,
}

impl NoiseKey {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn stream(&self, purpose: u64, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((purpose << 32) | step as u64);
        rng
    }

    /// Starting noise.
    pub fn init(&self) -> ChaCha8Rng {
        self.stream(0, 0)
    }

    /// Ancestral noise added when leaving step `t`.
    pub fn step(&self, t: usize) -> ChaCha8Rng {
        self.stream(1, t)
    }

    /// Forward-diffusion noise after a projection at step `t`.
    pub fn renoise(&self, t: usize) -> ChaCha8Rng {
        self.stream(2, t)
    }
}

/// Noisy sample at a given step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub data: Vec<f32>,
    pub step: usize,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

#[inline]
fn to_model(v: f32) -> f32 {
    2.0 * v - 1.0
}

#[inline]
fn to_image(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Starting sample. With a sketch, the sketch is forward-diffused to
/// `start_step`; without one, the start is pure Gaussian noise at step `T`.
pub fn init_state(
    sketch: Option<&ImageTensor>,
    len: usize,
    schedule: &DenoiseSchedule,
    start_step: usize,
    rng: &mut impl Rng,
) -> Result<NoisyState> {
    let steps = schedule.steps();
    match sketch {
        None => Ok(NoisyState {
            data: gaussian(rng, len),
            step: steps,
        }),
        Some(img) => {
            if start_step == 0 || start_step > steps {
                return Err(Error::Param(format!("start step {start_step} outside (0, {steps}]")));
            }
            if img.data().len() != len {
                return Err(Error::Param("sketch does not match the canvas".into()));
            }
            Ok(NoisyState {
                data: forward_diffuse(img.data().iter().map(|&v| to_model(v)), schedule, start_step, rng),
                step: start_step,
            })
        }
    }
}

/// `sqrt(ᾱ_t) · clean + sqrt(1 - ᾱ_t) · ε` for model-space `clean`.
fn forward_diffuse(
    clean: impl Iterator<Item = f32>,
    schedule: &DenoiseSchedule,
    t: usize,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    clean
        .map(|v| signal * v + noise * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Clean-image estimate implied by a noise prediction, clamped to `[-1, 1]`.
pub fn predict_clean(noisy: &[f32], eps: &[f32], t: usize, schedule: &DenoiseSchedule) -> Vec<f32> {
    let ab = schedule.alpha_bar(t);
    let inv = (1.0 / ab.sqrt()) as f32;
    let s = (1.0 - ab).sqrt() as f32;
    noisy
        .iter()
        .zip(eps)
        .map(|(&x, &e)| ((x - s * e) * inv).clamp(-1.0, 1.0))
        .collect()
}

/// One ancestral step `t → t-1`.
pub fn ddpm_step(
    noisy: &[f32],
    eps: &[f32],
    t: usize,
    schedule: &DenoiseSchedule,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let clean = predict_clean(noisy, eps, t, schedule);
    let (cc, cn) = schedule.posterior_mean_coefs(t);
    let (cc, cn) = (cc as f32, cn as f32);
    let mut next: Vec<f32> = clean.iter().zip(noisy).map(|(&c, &x)| cc * c + cn * x).collect();
    if t > 1 {
        let sigma = schedule.posterior_variance(t).sqrt() as f32;
        for v in &mut next {
            *v += sigma * rng.sample::<f32, _>(StandardNormal);
        }
    }
    next
}

fn call_backend(
    backend: &dyn DenoiserBackend,
    x: &[f32],
    t: usize,
    cond: &ConditioningBundle,
) -> Result<Vec<f32>> {
    let eps = backend.predict_noise(x, t, cond).map_err(|e| Error::Backend {
        backend: backend.id().to_string(),
        step: t,
        message: e.to_string(),
    })?;
    if eps.len() != x.len() {
        return Err(Error::Backend {
            backend: backend.id().to_string(),
            step: t,
            message: format!("returned {} values for a {}-value sample", eps.len(), x.len()),
        });
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Backend {
            backend: backend.id().to_string(),
            step: t,
            message: "non-finite noise estimate".into(),
        });
    }
    Ok(eps)
}

/// Runs ancestral steps from `from_step` down to `to_step`.
pub fn denoise_range(
    state: NoisyState,
    to_step: usize,
    cond: &ConditioningBundle,
    backend: &dyn DenoiserBackend,
    schedule: &DenoiseSchedule,
    noise: &NoiseKey,
) -> Result<NoisyState> {
    let from_step = state.step;
    if to_step > from_step || from_step > schedule.steps() {
        return Err(Error::Param(format!(
            "cannot denoise from step {from_step} to {to_step} with {} steps",
            schedule.steps()
        )));
    }
    let mut x = state.data;
    for t in (to_step + 1..=from_step).rev() {
        let eps = call_backend(backend, &x, t, cond)?;
        x = ddpm_step(&x, &eps, t, schedule, &mut noise.step(t));
    }
    Ok(NoisyState { data: x, step: to_step })
}

/// Result of a boundary projection. `clean` is the constrained clean estimate
/// (image space) when projecting in `OnX0ThenRenoise` mode.
#[derive(Clone, Debug)]
pub struct Projection {
    pub state: NoisyState,
    pub clean: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn project_constraints(
    state: NoisyState,
    constraints: Option<&Constraints>,
    mode: ProjectMode,
    schedule: &DenoiseSchedule,
    backend: &dyn DenoiserBackend,
    cond: &ConditioningBundle,
    rng: &mut impl Rng,
) -> Result<Projection> {
    let Some(cons) = constraints else {
        return Ok(Projection { state, clean: None });
    };
    let channels = backend.channels();
    let t = state.step;
    match mode {
        ProjectMode::OnSample => {
            let mut data = state.data;
            cons.replicator.apply_in_place(&mut data, channels);
            cons.mask(&mut data, channels, to_model(MASK_BACKGROUND));
            Ok(Projection {
                state: NoisyState { data, step: t },
                clean: None,
            })
        }
        ProjectMode::OnX0ThenRenoise => {
            let eps = call_backend(backend, &state.data, t, cond)?;
            let mut clean: Vec<f32> = predict_clean(&state.data, &eps, t, schedule)
                .into_iter()
                .map(to_image)
                .collect();
            cons.project_image(&mut clean, channels);
            let data = forward_diffuse(clean.iter().map(|&v| to_model(v)), schedule, t, rng);
            Ok(Projection {
                state: NoisyState { data, step: t },
                clean: Some(clean),
            })
        }
    }
}

/// Seed for output `index` of a request; output 0 uses the request seed itself.
pub fn output_seed(seed: u64, index: u32) -> u64 {
    if index == 0 {
        return seed;
    }
    // splitmix64
    let mut z = seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plain ancestral sampling from pure noise, no constraints.
pub fn sample_vanilla(
    backend: &dyn DenoiserBackend,
    schedule: &DenoiseSchedule,
    cond: &ConditioningBundle,
    seed: u64,
) -> Result<ImageTensor> {
    let noise = NoiseKey::new(seed);
    let len = backend.canvas() * backend.canvas() * backend.channels();
    let state = init_state(None, len, schedule, schedule.steps(), &mut noise.init())?;
    let done = denoise_range(state, 0, cond, backend, schedule, &noise)?;
    finish(done.data, None, backend)
}

fn finish(data: Vec<f32>, constraints: Option<&Constraints>, backend: &dyn DenoiserBackend) -> Result<ImageTensor> {
    let channels = backend.channels();
    let mut img: Vec<f32> = data.into_iter().map(to_image).collect();
    if let Some(cons) = constraints {
        if cons.final_replication {
            cons.replicator.apply_in_place(&mut img, channels);
        }
        cons.mask(&mut img, channels, MASK_BACKGROUND);
    }
    ImageTensor::new(backend.canvas(), backend.canvas(), channels, img)
}

/// Starting step for a sketch-initialised run.
pub fn sketch_start_step(strength: f64, steps: usize) -> usize {
    ((strength * steps as f64).round() as usize).clamp(1, steps)
}

/// Everything a single output needs besides its index.
pub struct PipelineJob<'a> {
    pub request: &'a GenerationRequest,
    pub sketch: Option<&'a ImageTensor>,
    pub cond: &'a ConditioningBundle,
    pub backend: &'a dyn DenoiserBackend,
    pub schedule: &'a DenoiseSchedule,
    pub plan: &'a SubProcessPlan,
}

impl PipelineJob<'_> {
    fn run_one(&self, constraints: Option<&Constraints>, index: u32) -> Result<ImageTensor> {
        let backend = self.backend;
        let canvas = backend.canvas();
        let channels = backend.channels();
        let sketch = self.sketch.map(|s| {
            if s.height() == canvas && s.width() == canvas && s.channels() == channels {
                s.clone()
            } else {
                s.to_canvas(canvas).with_channels(channels)
            }
        });
        let steps = self.schedule.steps();
        let start = sketch_start_step(self.request.sampling.sketch_strength, steps);

        let noise = NoiseKey::new(output_seed(self.request.seed, index));
        let mut state = init_state(sketch.as_ref(), canvas * canvas * channels, self.schedule, start, &mut noise.init())?;
        for &b in self.plan.boundaries().iter().rev() {
            if b >= state.step {
                continue;
            }
            state = denoise_range(state, b, self.cond, backend, self.schedule, &noise)?;
            if constraints.is_some() {
                state = project_constraints(
                    state,
                    constraints,
                    self.plan.project_mode,
                    self.schedule,
                    backend,
                    self.cond,
                    &mut noise.renoise(b),
                )?
                .state;
            }
        }
        let done = denoise_range(state, 0, self.cond, backend, self.schedule, &noise)?;
        finish(done.data, constraints, backend)
    }
}

/// Generates `output_count` images. Failures are reported per output.
pub fn run_pipeline(job: &PipelineJob<'_>) -> Result<Vec<Result<ImageTensor>>> {
    let canvas = job.backend.canvas();
    let constraints = Constraints::new(canvas, &job.request.symmetry)?;
    let indices: Vec<u32> = (0..job.request.output_count).collect();
    let run = |i: &u32| job.run_one(constraints.as_ref(), *i);
    Ok(if job.backend.parallel_safe() {
        indices.par_iter().map(run).collect()
    } else {
        indices.iter().map(run).collect()
    })
}
