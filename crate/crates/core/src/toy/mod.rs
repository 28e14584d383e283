//! A small trainable denoiser for desk-scale experiments.
//!
//! Clean images are modelled as `x0 = m0 + G·a + e`: `G` is an orthonormal
//! pixel basis, `e` is isotropic noise outside it, and the coordinates `a`
//! follow a mixture of Gaussians whose component weights come from a
//! softmax gate over the conditioning features. The noise prediction is the
//! exact posterior mean of the noise under this model, so ancestral
//! sampling draws from the fitted mixture.

mod train;

pub use train::{train_toy_denoiser, LossPoint, TrainConfig, TrainingItem, TrainingReport};

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{b64, b64_f64};
use crate::conditioning::{ConditioningBundle, ToyEmbedder};
use crate::error::{Error, Result};
use crate::pipeline::{DenoiseSchedule, DenoiserBackend};

pub const FORMAT: &str = "wheelgen-mixture/1";

/// Responsibilities below this are treated as zero.
const NEGLIGIBLE: f64 = 1e-15;

/// One Gaussian of the latent mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Gate logit with no conditioning.
    pub bias: f64,
    /// Gate weights over the `3·embed_dim` conditioning features.
    #[serde(with = "b64_f64")]
    pub gate: Vec<f64>,
    #[serde(with = "b64_f64")]
    pub mean: Vec<f64>,
    /// Row-major `rank x rank`; row `j` is the `j`-th principal axis.
    #[serde(with = "b64_f64")]
    pub axes: Vec<f64>,
    /// Log variance along each axis.
    #[serde(with = "b64_f64")]
    pub log_var: Vec<f64>,
}

impl Component {
    fn logit(&self, features: &[f64]) -> f64 {
        self.bias + self.gate.iter().zip(features).map(|(g, c)| g * c).sum::<f64>()
    }
}

/// Exact posterior mean of `a0` given `at = √ā·a0 + √(1−ā)·ε` under the mixture.
pub(crate) fn latent_posterior(comps: &[Component], at: &[f64], alpha_bar: f64, logits: &[f64]) -> Vec<f64> {
    let r = at.len();
    let sa = alpha_bar.sqrt();
    let mut scores = Vec::with_capacity(comps.len());
    let mut rotated = Vec::with_capacity(comps.len());
    for (k, c) in comps.iter().enumerate() {
        let w: Vec<f64> = at.iter().zip(&c.mean).map(|(x, m)| x - sa * m).collect();
        let mut ll = 0.0;
        let mut z = vec![0.0; r];
        let mut d = vec![0.0; r];
        for j in 0..r {
            let axis = &c.axes[j * r..(j + 1) * r];
            z[j] = axis.iter().zip(&w).map(|(u, v)| u * v).sum();
            d[j] = alpha_bar * c.log_var[j].exp() + 1.0 - alpha_bar;
            ll += z[j] * z[j] / d[j] + d[j].ln();
        }
        scores.push(logits[k] - 0.5 * ll);
        rotated.push((z, d));
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = resp.iter().sum();
    resp.iter_mut().for_each(|v| *v /= total);

    let mut mean = vec![0.0; r];
    for (k, c) in comps.iter().enumerate() {
        if resp[k] < NEGLIGIBLE {
            continue;
        }
        let (z, d) = &rotated[k];
        let mut post = c.mean.clone();
        for j in 0..r {
            let h = sa * c.log_var[j].exp() / d[j] * z[j];
            let axis = &c.axes[j * r..(j + 1) * r];
            post.iter_mut().zip(axis).for_each(|(p, u)| *p += h * u);
        }
        mean.iter_mut().zip(&post).for_each(|(m, p)| *m += resp[k] * p);
    }
    mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureDenoiser {
    format: String,
    id: String,
    canvas: usize,
    rank: usize,
    /// Width of one conditioning block; the feature vector is three blocks.
    embed_dim: usize,
    embedder: String,
    schedule: DenoiseSchedule,
    #[serde(with = "b64")]
    mean: Vec<f32>,
    /// Row-major `pixels x rank`.
    #[serde(with = "b64")]
    basis: Vec<f32>,
    log_var_resid: f64,
    components: Vec<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingReport>,
}

impl MixtureDenoiser {
    pub const SYNTHETIC_ID: &'static str = "stub-mixture";

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        id: &str,
        canvas: usize,
        embed_dim: usize,
        embedder: &str,
        schedule: DenoiseSchedule,
        mean: Vec<f32>,
        basis: Vec<f32>,
        log_var_resid: f64,
        components: Vec<Component>,
    ) -> Result<Self> {
        let rank = components.first().map_or(0, |c| c.mean.len());
        let m = Self {
            format: FORMAT.to_string(),
            id: id.to_string(),
            canvas,
            rank,
            embed_dim,
            embedder: embedder.to_string(),
            schedule,
            mean,
            basis,
            log_var_resid,
            components,
            training: None,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let d = self.canvas * self.canvas;
        let r = self.rank;
        let bad = |what: &str| Err(Error::Format(format!("mixture model: {what}")));
        if self.format != FORMAT {
            return bad(&format!("unsupported format `{}`", self.format));
        }
        if r == 0 || r > d {
            return bad("rank out of range");
        }
        if self.mean.len() != d || self.basis.len() != d * r {
            return bad("mean or basis has the wrong size");
        }
        if self.components.is_empty() {
            return bad("no components");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != r || c.axes.len() != r * r || c.log_var.len() != r || c.gate.len() != 3 * self.embed_dim {
                return bad(&format!("component {k} has the wrong shape"));
            }
            if !(c.bias.is_finite() && finite(&c.gate) && finite(&c.mean) && finite(&c.axes) && finite(&c.log_var)) {
                return bad(&format!("component {k} has non-finite parameters"));
            }
        }
        if !(self.mean.iter().chain(&self.basis).all(|x| x.is_finite()) && self.log_var_resid.is_finite()) {
            return bad("non-finite parameters");
        }
        Ok(())
    }

    /// Conditioning-sensitive instance with a smooth, radially symmetric
    /// mean and a smooth basis, so samples are smooth images.
    pub fn synthetic(canvas: usize, rank: usize, schedule: DenoiseSchedule, seed: u64) -> Result<Self> {
        let d = canvas * canvas;
        let c = (canvas as f64 - 1.0) / 2.0;
        let scale = canvas as f64 / 64.0;
        let rim = 0.45 * canvas as f64 - 3.0 * scale;
        let mean: Vec<f32> = (0..d)
            .map(|p| {
                let r = ((p / canvas) as f64 - c).hypot((p % canvas) as f64 - c);
                let ring = (-((r - rim) / (3.5 * scale)).powi(2)).exp();
                let hub = (-(r / (6.0 * scale)).powi(2)).exp();
                (0.6 - 1.4 * ring - 1.0 * hub) as f32
            })
            .collect();

        // separable cosines with at most two half-periods per axis
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let n = canvas as f64;
        for fy in 0..=4 {
            for fx in 0..=4 {
                if fy + fx == 0 {
                    continue;
                }
                cols.push(
                    (0..d)
                        .map(|p| {
                            let (y, x) = ((p / canvas) as f64 + 0.5, (p % canvas) as f64 + 0.5);
                            (PI * fy as f64 * y / (2.0 * n)).cos() * (PI * fx as f64 * x / (2.0 * n)).cos()
                        })
                        .collect(),
                );
            }
        }
        if rank == 0 || rank > cols.len() {
            return Err(Error::Param(format!("synthetic rank must be in 1..={}", cols.len())));
        }
        let basis_cols = gram_schmidt(&cols[..rank]);
        let mut basis = vec![0.0f32; d * rank];
        for (i, col) in basis_cols.iter().enumerate() {
            for p in 0..d {
                basis[p * rank + i] = col[p] as f32;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_dim = 72;
        let components = (0..4)
            .map(|_| {
                let g = DMatrix::<f64>::from_fn(rank, rank, |_, _| rng.sample(StandardNormal));
                let q = g.qr().q();
                Component {
                    bias: 0.0,
                    gate: (0..3 * embed_dim).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect(),
                    mean: (0..rank).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect(),
                    axes: (0..rank * rank).map(|i| q[(i % rank, i / rank)]).collect(),
                    log_var: (0..rank).map(|i| (30.0 / (1.0 + i as f64)).ln()).collect(),
                }
            })
            .collect();
        Self::assemble(
            Self::SYNTHETIC_ID,
            canvas,
            embed_dim,
            ToyEmbedder::ID,
            schedule,
            mean,
            basis,
            (1e-6f64).ln(),
            components,
        )
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.id = id.to_string();
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder
    }

    pub fn schedule(&self) -> &DenoiseSchedule {
        &self.schedule
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    /// Component weights for a bundle, before seeing any image.
    pub fn gate_weights(&self, cond: &ConditioningBundle) -> Vec<f64> {
        let logits = self.logits(cond);
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn logits(&self, cond: &ConditioningBundle) -> Vec<f64> {
        let f: Vec<f64> = cond.feature_vector(self.embed_dim).iter().map(|&v| v as f64).collect();
        self.components.iter().map(|c| c.logit(&f)).collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn gram_schmidt(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for v in cols {
        let mut v = v.clone();
        for _ in 0..2 {
            for q in &out {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

impl DenoiserBackend for MixtureDenoiser {
    fn id(&self) -> &str {
        &self.id
    }

    fn canvas(&self) -> usize {
        self.canvas
    }

    fn native_schedule(&self) -> Option<&DenoiseSchedule> {
        Some(&self.schedule)
    }

    fn required_embedder(&self) -> Option<&str> {
        Some(&self.embedder)
    }

    fn predict_noise(&self, noisy: &[f32], step: usize, cond: &ConditioningBundle) -> Result<Vec<f32>> {
        let d = self.canvas * self.canvas;
        if noisy.len() != d {
            return Err(Error::Backend {
                backend: self.id.clone(),
                step,
                message: format!("expected {d} values, got {}", noisy.len()),
            });
        }
        if step == 0 || step > self.schedule.steps() {
            return Err(Error::Backend {
                backend: self.id.clone(),
                step,
                message: "step outside the schedule".into(),
            });
        }
        let ab = self.schedule.alpha_bar(step);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = self.rank;

        // y0 = v − √ā·m0, a = Gᵀ·y0
        let y0: Vec<f64> = noisy
            .iter()
            .zip(&self.mean)
            .map(|(v, m)| *v as f64 - sa * *m as f64)
            .collect();
        let mut a = vec![0.0f64; r];
        for (p, &y) in y0.iter().enumerate() {
            let row = &self.basis[p * r..(p + 1) * r];
            for (ai, u) in a.iter_mut().zip(row) {
                *ai += *u as f64 * y;
            }
        }
        let post = latent_posterior(&self.components, &a, ab, &self.logits(cond));

        // ε̂ = ((1 − √ā·γ)·y0 + G·√ā·(γ·a − â)) / √(1−ā), γ the shrinkage outside the basis
        let ls = self.log_var_resid.exp();
        let gamma = sa * ls / (ab * ls + 1.0 - ab);
        let keep = 1.0 - sa * gamma;
        let u: Vec<f64> = a.iter().zip(&post).map(|(ai, m)| sa * (gamma * ai - m)).collect();
        let out: Vec<f32> = y0
            .iter()
            .enumerate()
            .map(|(p, &y)| {
                let row = &self.basis[p * r..(p + 1) * r];
                let gu: f64 = row.iter().zip(&u).map(|(g, v)| *g as f64 * v).sum();
                ((keep * y + gu) / sb) as f32
            })
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend {
                backend: self.id.clone(),
                step,
                message: "non-finite prediction".into(),
            });
        }
        Ok(out)
    }
}
