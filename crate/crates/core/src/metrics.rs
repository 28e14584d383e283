//! Image statistics for evaluating generated wheels.

use std::f64::consts::TAU;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::exemplars::OUTER_RADIUS;
use crate::image::ImageTensor;

fn sample(img: &ImageTensor, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor(), x.floor());
    let (y1, x1) = ((y0 + 1.0).min(h - 1.0), (x0 + 1.0).min(w - 1.0));
    let (fy, fx) = (y - y0, x - x0);
    let g = |a: f64, b: f64| img.get(a as usize, b as usize, 0) as f64;
    (g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx) * (1.0 - fy) + (g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx) * fy
}

/// Intensities on a circle of `radius` around the canvas centre, `n` samples
/// starting straight up and running counter-clockwise.
pub fn ring_profile(img: &ImageTensor, radius: f64, n: usize) -> Vec<f64> {
    let gray = img.to_gray();
    let c = (gray.height() as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let a = TAU * i as f64 / n as f64;
            sample(&gray, c - radius * a.cos(), c - radius * a.sin())
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Components of [`wheelness`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wheelness {
    /// Light-outside, dark-rim contrast scaled to `[0, 1]`.
    pub rim_contrast: f64,
    /// Share of directions in which the rim is dark.
    pub rim_continuity: f64,
    /// Ink fraction inside the rim.
    pub coverage: f64,
    pub score: f64,
}

/// How much an image looks like a wheel of outer radius `0.45·canvas`, in `[0, 1]`.
///
/// The rim-edge part looks for the darkest ring in the rim band and
/// compares it with the ring just outside; it also checks that the rim is
/// dark in most of 180 directions. The coverage part prefers an interior
/// ink fraction near 0.4. The score is the product.
pub fn wheelness(img: &ImageTensor) -> Wheelness {
    let canvas = img.height() as f64;
    let outer = OUTER_RADIUS * canvas;
    let radii: Vec<f64> = (0..=12).map(|i| outer * (0.8 + 0.2 * i as f64 / 12.0)).collect();
    let profiles: Vec<Vec<f64>> = radii.iter().map(|&r| ring_profile(img, r, 360)).collect();
    let (dark_i, dark) = profiles
        .iter()
        .map(|p| mean(p))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("radii nonempty");
    let outside = mean(&ring_profile(img, outer * 1.08, 360));
    let rim_contrast = ((outside - dark) / 0.5).clamp(0.0, 1.0);

    let dirs = 180;
    let step = profiles[dark_i].len() / dirs;
    let dark_dirs = (0..dirs)
        .filter(|&d| {
            let lo = dark_i.saturating_sub(1);
            let hi = (dark_i + 1).min(profiles.len() - 1);
            let vals: Vec<f64> = (lo..=hi).map(|i| profiles[i][d * step]).collect();
            mean(&vals) < 0.5
        })
        .count();
    let rim_continuity = dark_dirs as f64 / dirs as f64;

    let gray = img.to_gray();
    let c = (canvas - 1.0) / 2.0;
    let (mut ink, mut n) = (0.0, 0usize);
    for r in 0..gray.height() {
        for col in 0..gray.width() {
            if (r as f64 - c).hypot(col as f64 - c) < 0.8 * outer {
                ink += 1.0 - gray.get(r, col, 0) as f64;
                n += 1;
            }
        }
    }
    let coverage = ink / n.max(1) as f64;
    let coverage_score = (1.0 - (coverage - 0.4).abs() / 0.4).clamp(0.0, 1.0);
    Wheelness {
        rim_contrast,
        rim_continuity,
        coverage,
        score: rim_contrast * rim_continuity * coverage_score,
    }
}

/// Angular widths (radians) of the light gaps between spokes on the ring at
/// `0.6·` the outer radius. Runs shorter than 3° are ignored.
pub fn spoke_gaps(img: &ImageTensor) -> Vec<f64> {
    let n = 720;
    let raw = ring_profile(img, 0.6 * OUTER_RADIUS * img.height() as f64, n);
    let half = 2;
    let smooth: Vec<f64> = (0..n)
        .map(|i| (0..=2 * half).map(|k| raw[(i + n + k - half) % n]).sum::<f64>() / (2 * half + 1) as f64)
        .collect();
    let light: Vec<bool> = smooth.iter().map(|&v| v > 0.5).collect();
    if light.iter().all(|&l| l) || light.iter().all(|&l| !l) {
        return Vec::new();
    }
    // start scanning at a dark sample so no run wraps around the seam
    let start = light.iter().position(|&l| !l).expect("has a dark sample");
    let min_len = (3.0 / 360.0 * n as f64).ceil() as usize;
    let mut gaps = Vec::new();
    let mut run = 0usize;
    for k in 1..=n {
        if light[(start + k) % n] {
            run += 1;
        } else {
            if run >= min_len {
                gaps.push(TAU * run as f64 / n as f64);
            }
            run = 0;
        }
    }
    gaps
}

/// Coefficient of variation of the spoke gap widths; 0 with fewer than two gaps.
pub fn gap_variance_statistic(img: &ImageTensor) -> f64 {
    let gaps = spoke_gaps(img);
    if gaps.len() < 2 {
        return 0.0;
    }
    let m = mean(&gaps);
    let var = gaps.iter().map(|g| (g - m).powi(2)).sum::<f64>() / gaps.len() as f64;
    var.sqrt() / m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankTest {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "the first sample tends to be larger".
    pub p_value: f64,
}

/// One-sided Mann-Whitney U test with the tie-corrected normal approximation
/// and a continuity correction.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> RankTest {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return RankTest { u, z: 0.0, p_value: 1.0 };
    }
    let z = (u - n1 * n2 / 2.0 - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    RankTest {
        u,
        z,
        p_value: 1.0 - normal.cdf(z),
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
