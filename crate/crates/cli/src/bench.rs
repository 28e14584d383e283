//! Latency table for the symmetry operators.

use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use wheelgen_core::symmetry::{apply_circular_mask, build_wedge_mask, symmetry_score_with};
use wheelgen_core::{symmetrize, ImageTensor, Interpolation, SymmetryConfig};

#[derive(Debug, Serialize)]
pub struct Row {
    pub operator: &'static str,
    pub canvas: usize,
    pub k: u32,
    pub reps: usize,
    pub mean_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

type Op<'a> = (&'static str, Box<dyn FnMut() -> Result<()> + 'a>);

fn time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, f64)> {
    f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(0.0, f64::max);
    let round = |x: f64| (x * 1000.0).round() / 1000.0;
    Ok((round(mean), round(min), round(max)))
}

pub fn symmetry(canvas: usize, ks: &[u32], reps: usize) -> Result<Vec<Row>> {
    let data: Vec<f32> = (0..canvas * canvas * 3).map(|i| ((i * 7919) % 251) as f32 / 250.0).collect();
    let img = ImageTensor::new(canvas, canvas, 3, data)?;
    let mut rows = Vec::new();
    for &k in ks {
        let cfg = SymmetryConfig::for_canvas(canvas, k);
        let c = cfg.center;
        let ops: [Op; 6] = [
            ("wedge_mask", Box::new(|| Ok(build_wedge_mask(canvas, k, c).map(drop)?))),
            ("symmetrize_bilinear", Box::new(|| Ok(symmetrize(&img, k, c, Interpolation::Bilinear).map(drop)?))),
            ("symmetrize_nearest", Box::new(|| Ok(symmetrize(&img, k, c, Interpolation::Nearest).map(drop)?))),
            ("circular_mask", Box::new(|| {
                apply_circular_mask(&img, c, cfg.radius, 1.0);
                Ok(())
            })),
            ("score_bilinear", Box::new(|| Ok(symmetry_score_with(&img, k, c, cfg.radius, Interpolation::Bilinear).map(drop)?))),
            ("score_nearest", Box::new(|| Ok(symmetry_score_with(&img, k, c, cfg.radius, Interpolation::Nearest).map(drop)?))),
        ];
        for (operator, mut f) in ops {
            let (mean_us, min_us, max_us) = time(reps, &mut f)?;
            rows.push(Row {
                operator,
                canvas,
                k,
                reps,
                mean_us,
                min_us,
                max_us,
            });
        }
    }
    Ok(rows)
}
