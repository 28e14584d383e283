//! Procedural wheel renderer and synthetic labelled corpus.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::symmetry::polar_angle;

/// Outer rim radius as a fraction of the canvas side.
pub const OUTER_RADIUS: f64 = 0.45;
/// Largest spoke offset, as a fraction of the spoke slot, at `gap_variance = 1`.
const MAX_JITTER: f64 = 0.35;

pub const LABELS: [&str; 6] = ["dynamic", "bold", "simple", "complex", "sharp", "organic"];

/// Shape of one wheel. Fractions are relative to the outer radius unless noted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelParams {
    /// 3..=12
    pub spokes: u32,
    /// Rim thickness, 0.05..=0.2.
    pub rim_width: f64,
    /// Hub radius, 0.12..=0.3.
    pub hub_radius: f64,
    /// Share of each angular slot covered by its spoke, 0.15..=0.5.
    pub spoke_width: f64,
    /// Tangential bend of the spokes, -1..=1.
    pub curvature: f64,
    /// Irregularity of the gaps between spokes, 0..=1. Zero gives exact k-fold symmetry.
    pub gap_variance: f64,
    /// 0 is soft edges, 1 is crisp.
    pub edge_sharpness: f64,
}

impl Default for WheelParams {
    fn default() -> Self {
        Self {
            spokes: 5,
            rim_width: 0.12,
            hub_radius: 0.22,
            spoke_width: 0.3,
            curvature: 0.0,
            gap_variance: 0.0,
            edge_sharpness: 0.5,
        }
    }
}

fn check(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(Error::Param(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl WheelParams {
    pub fn validate(&self) -> Result<()> {
        if !(3..=12).contains(&self.spokes) {
            return Err(Error::Param(format!("spokes = {} outside [3, 12]", self.spokes)));
        }
        check("rim_width", self.rim_width, 0.05, 0.2)?;
        check("hub_radius", self.hub_radius, 0.12, 0.3)?;
        check("spoke_width", self.spoke_width, 0.15, 0.5)?;
        check("curvature", self.curvature, -1.0, 1.0)?;
        check("gap_variance", self.gap_variance, 0.0, 1.0)?;
        check("edge_sharpness", self.edge_sharpness, 0.0, 1.0)
    }

    /// Draw from the corpus distribution. Four in ten wheels are regular.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            spokes: rng.random_range(3..=12),
            rim_width: rng.random_range(0.05..=0.2),
            hub_radius: rng.random_range(0.12..=0.3),
            spoke_width: rng.random_range(0.15..=0.5),
            curvature: rng.random_range(-1.0..=1.0),
            gap_variance: if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..=1.0) },
            edge_sharpness: rng.random_range(0.0..=1.0),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let rules = [
            ("dynamic", self.gap_variance > 0.4),
            ("bold", self.spoke_width >= 0.4),
            ("simple", self.spokes <= 5),
            ("complex", self.spokes >= 9),
            ("sharp", self.edge_sharpness > 0.7),
            ("organic", self.curvature.abs() > 0.5),
        ];
        rules.iter().filter(|(_, on)| *on).map(|(l, _)| l.to_string()).collect()
    }
}

fn wrap_pi(a: f64) -> f64 {
    let a = a.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

/// Dark ink on white. The first spoke points straight up; the others are
/// offset from their regular slots by up to `0.35·gap_variance` of a slot.
pub fn gen_wheel(params: &WheelParams, canvas: usize, rng: &mut impl Rng) -> Result<(ImageTensor, Vec<String>)> {
    params.validate()?;
    if canvas < 8 {
        return Err(Error::Param(format!("canvas {canvas} too small")));
    }
    let k = params.spokes as usize;
    let slot = TAU / k as f64;
    let centres: Vec<f64> = (0..k)
        .map(|i| {
            let jitter = if i == 0 || params.gap_variance == 0.0 {
                0.0
            } else {
                rng.random_range(-1.0..=1.0) * MAX_JITTER * params.gap_variance
            };
            (i as f64 + jitter) * slot
        })
        .collect();

    let c = (canvas as f64 - 1.0) / 2.0;
    let outer = OUTER_RADIUS * canvas as f64;
    let inner = outer * (1.0 - params.rim_width);
    let hub = outer * params.hub_radius;
    let half_angle = params.spoke_width * slot / 2.0;
    let edge = 2.5 + (0.5 - 2.5) * params.edge_sharpness;

    let img = ImageTensor::from_fn(canvas, canvas, |r, col| {
        let (dr, dc) = (r as f64 - c, col as f64 - c);
        let d = dr.hypot(dc);
        let rim = (d - inner).min(outer - d);
        let hub_s = hub - d;
        let mut spoke = f64::NEG_INFINITY;
        if d > 1e-9 {
            let theta = polar_angle(dr, dc);
            let t = ((d - hub) / (inner - hub)).clamp(0.0, 1.0);
            let bend = params.curvature * 0.5 * slot * t;
            for &s in &centres {
                let off = wrap_pi(theta - s - bend).abs() * d;
                let body = half_angle * d - off;
                let radial = (d - (hub - 2.0)).min(inner + 2.0 - d);
                spoke = spoke.max(body.min(radial));
            }
        }
        let s = rim.max(hub_s).max(spoke);
        let ink = (0.5 + s / edge).clamp(0.0, 1.0);
        (1.0 - ink) as f32
    });
    Ok((img, params.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub params: WheelParams,
    pub labels: Vec<String>,
    pub image: ImageTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
}

impl LabelReport {
    pub fn fraction(&self, label: &str) -> f64 {
        self.counts.get(label).copied().unwrap_or(0) as f64 / self.total.max(1) as f64
    }
}

impl std::fmt::Display for LabelReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "label,count,fraction")?;
        for (l, c) in &self.counts {
            writeln!(f, "{l},{c},{:.4}", *c as f64 / self.total.max(1) as f64)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub canvas: usize,
    pub seed: u64,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn report(&self) -> LabelReport {
        let mut counts: BTreeMap<String, usize> = LABELS.iter().map(|l| (l.to_string(), 0)).collect();
        for item in &self.items {
            for l in &item.labels {
                *counts.entry(l.clone()).or_default() += 1;
            }
        }
        LabelReport {
            total: self.items.len(),
            counts,
        }
    }
}

/// `n` wheels with ids `wheel-00000..`, reproducible from `seed`. Images are
/// 8-bit quantized so they survive PNG storage unchanged.
pub fn build_corpus(n: usize, seed: u64, canvas: usize) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Param("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let params = WheelParams::sample(&mut rng);
        let (image, labels) = gen_wheel(&params, canvas, &mut rng)?;
        items.push(CorpusItem {
            id: format!("wheel-{i:05}"),
            params,
            labels,
            image: image.quantized(),
        });
    }
    Ok(Corpus { canvas, seed, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::{symmetrize, symmetry_score, symmetry_score_with, Interpolation};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn regular_four_spokes_are_symmetric() {
        let p = WheelParams {
            spokes: 4,
            ..Default::default()
        };
        let (img, _) = gen_wheel(&p, 64, &mut rng()).unwrap();
        assert!(symmetry_score(&img, 4, (31.5, 31.5)).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn regular_wheel_is_a_symmetrize_fixed_point() {
        for spokes in [4, 8, 12] {
            let p = WheelParams {
                spokes,
                curvature: 0.6,
                ..Default::default()
            };
            let (img, _) = gen_wheel(&p, 64, &mut rng()).unwrap();
            for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
                let out = symmetrize(&img, 4, (31.5, 31.5), interp).unwrap();
                assert!(out.mean_abs_diff(&img) < 1e-6, "spokes {spokes} {interp:?}");
            }
        }
    }

    #[test]
    fn irregular_gaps_break_symmetry_and_label_dynamic() {
        let p = WheelParams {
            spokes: 6,
            gap_variance: 0.9,
            ..Default::default()
        };
        let (img, labels) = gen_wheel(&p, 64, &mut rng()).unwrap();
        assert!(labels.contains(&"dynamic".to_string()));
        let s = symmetry_score_with(&img, 6, (31.5, 31.5), 31.5, Interpolation::Nearest).unwrap();
        assert!(s > 0.01, "{s}");
    }

    #[test]
    fn out_of_range_params_rejected() {
        for p in [
            WheelParams { spokes: 2, ..Default::default() },
            WheelParams { spokes: 13, ..Default::default() },
            WheelParams { rim_width: 0.5, ..Default::default() },
            WheelParams { gap_variance: -0.1, ..Default::default() },
            WheelParams { curvature: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(gen_wheel(&p, 64, &mut rng()), Err(Error::Param(_))));
        }
    }

    #[test]
    fn mean_disc_coverage_in_range() {
        // ink fraction inside the outer disc, counted pixel by pixel
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let c = 31.5;
        let outer = OUTER_RADIUS * 64.0;
        let mut total = 0.0;
        for _ in 0..100 {
            let p = WheelParams::sample(&mut r);
            let (img, _) = gen_wheel(&p, 64, &mut r).unwrap();
            let (mut ink, mut n) = (0.0, 0usize);
            for row in 0..64 {
                for col in 0..64 {
                    if (row as f64 - c).hypot(col as f64 - c) <= outer {
                        ink += 1.0 - img.get(row, col, 0) as f64;
                        n += 1;
                    }
                }
            }
            total += ink / n as f64;
        }
        let mean = total / 100.0;
        assert!((0.2..=0.6).contains(&mean), "{mean}");
    }

    #[test]
    fn corpus_is_reproducible_and_labels_are_represented() {
        let a = build_corpus(300, 7, 32).unwrap();
        let b = build_corpus(300, 7, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_corpus(300, 8, 32).unwrap());
        let report = a.report();
        for l in LABELS {
            assert!(report.fraction(l) >= 0.05, "{l}: {}", report.fraction(l));
        }
        assert!(report.to_string().starts_with("label,count,fraction\n"));
    }
}
