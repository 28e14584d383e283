use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{latent_posterior, Component, MixtureDenoiser};
use crate::conditioning::{ConditioningBundle, ContextEntry, Embedder, DEFAULT_PROMPT};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pipeline::DenoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub id: String,
    pub canvas: usize,
    /// Dimension of the PCA latent space.
    pub rank: usize,
    pub components: usize,
    pub em_iterations: usize,
    /// Pseudo-count pulling each component covariance towards an isotropic one.
    pub shrinkage: f64,
    /// Gradient steps on the gate.
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Probability of dropping each conditioning route independently.
    pub cond_dropout: f64,
    /// Probability of dropping all conditioning at once.
    pub uncond_prob: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Power iterations of the randomized PCA.
    pub pca_iterations: usize,
    /// Fixed draws used for the reported losses.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            id: "toy-mixture".into(),
            canvas: 64,
            rank: 64,
            components: 256,
            em_iterations: 30,
            shrinkage: 20.0,
            iterations: 3000,
            batch: 32,
            learning_rate: 0.05,
            cond_dropout: 0.15,
            uncond_prob: 0.1,
            seed: 0,
            log_every: 50,
            pca_iterations: 3,
            eval_draws: 2048,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub image: ImageTensor,
    pub labels: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub examples: usize,
    pub rank: usize,
    pub components: usize,
    pub iterations: usize,
    /// Per-pixel noise MSE on the fixed evaluation draws, for the starting
    /// model (one unit Gaussian around the mean image), after the mixture
    /// fit, and at the end.
    pub initial_loss: f64,
    pub mixture_loss: f64,
    pub final_loss: f64,
    /// Gate training loss (negative conditional log-likelihood of the latent
    /// code, up to a constant), averaged over each logging window.
    pub log: Vec<LossPoint>,
    pub seconds: f64,
}

/// Everything a loss draw needs about one image, precomputed.
struct Example {
    /// Latent coordinates.
    a0: Vec<f64>,
    /// Squared norm of the part outside the basis.
    resid: f64,
    embedding: Vec<f32>,
    labels: Vec<String>,
}

struct Draw {
    example: usize,
    t: usize,
    noise: Vec<f64>,
    cond: Vec<f64>,
}

/// Per-pixel noise-prediction MSE for one draw, with the noise outside the
/// basis integrated out analytically.
fn noise_loss(
    comps: &[Component],
    log_var_resid: f64,
    ex: &Example,
    draw: &Draw,
    schedule: &DenoiseSchedule,
    pixels: usize,
) -> f64 {
    let r = ex.a0.len();
    let ab = schedule.alpha_bar(draw.t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let at: Vec<f64> = ex.a0.iter().zip(&draw.noise).map(|(a, e)| sa * a + sb * e).collect();
    let logits: Vec<f64> = comps.iter().map(|c| c.logit(&draw.cond)).collect();
    let post = latent_posterior(comps, &at, ab, &logits);
    let mut loss: f64 = (0..r)
        .map(|i| ((at[i] - sa * post[i]) / sb - draw.noise[i]).powi(2))
        .sum();
    let ls = log_var_resid.exp();
    let gamma = sa * ls / (ab * ls + 1.0 - ab);
    let keep = 1.0 - sa * gamma;
    loss += (keep * sa / sb).powi(2) * ex.resid + (sa * gamma).powi(2) * (pixels - r) as f64;
    loss / pixels as f64
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = v.clone().fold(f64::NEG_INFINITY, f64::max);
    top + v.map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Negative conditional log-likelihood `-ln Σ π_k(c) N_k(a0)` up to a constant,
/// given the per-component log densities of `a0`. Adds the gradient with
/// respect to every component's `[bias, gate…]` when asked.
fn gate_nll(comps: &[Component], log_dens: &[f64], cond: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let logits: Vec<f64> = comps.iter().map(|c| c.logit(cond)).collect();
    let norm = log_sum_exp(logits.iter().copied());
    let joint = log_sum_exp(logits.iter().zip(log_dens).map(|(s, l)| s + l));
    if let Some(grad) = grad {
        let width = 1 + cond.len();
        for (k, (s, l)) in logits.iter().zip(log_dens).enumerate() {
            let ds = (s - norm).exp() - (s + l - joint).exp();
            grad[k * width] += ds;
            for (j, c) in cond.iter().enumerate() {
                grad[k * width + 1 + j] += ds * c;
            }
        }
    }
    norm - joint
}

/// Top-`rank` principal directions of the centred rows of `x` by randomized
/// subspace iteration. Returns a `pixels x rank` matrix with orthonormal columns.
fn principal_basis(x: &DMatrix<f32>, rank: usize, iterations: usize, rng: &mut impl Rng) -> DMatrix<f32> {
    let (n, d) = x.shape();
    let k = (rank + 10).min(n).min(d);
    let omega = DMatrix::<f32>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    let mut y = x * &omega;
    for _ in 0..iterations {
        let q = y.qr().q();
        let xt_q = x.transpose() * &q;
        y = x * xt_q;
    }
    let q = y.qr().q();
    let b = q.transpose() * x; // k x d
    let gram = (&b * b.transpose()).map(|v| v as f64);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let keep = rank.min(order.len());
    let mut basis = DMatrix::<f32>::zeros(d, keep);
    for (col, &i) in order.iter().take(keep).enumerate() {
        let v = eig.eigenvectors.column(i).map(|x| x as f32);
        let u = b.transpose() * v;
        basis.set_column(col, &u);
    }
    basis.qr().q()
}

/// k-means++ seeding followed by Lloyd iterations; returns hard assignments
/// and the mean squared distance to the assigned centre per coordinate.
fn kmeans(a: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let (n, r) = a.shape();
    let dist2 = |i: usize, c: &DVector<f64>| -> f64 { (0..r).map(|j| (a[(i, j)] - c[j]).powi(2)).sum() };
    let mut centres: Vec<DVector<f64>> = vec![a.row(rng.random_range(0..n)).transpose()];
    let mut best: Vec<f64> = (0..n).map(|i| dist2(i, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, b) in best.iter().enumerate() {
                if u < *b {
                    idx = i;
                    break;
                }
                u -= b;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c: DVector<f64> = a.row(pick).transpose();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(i, &c));
        }
        centres.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, slot) in assign.iter_mut().enumerate() {
            *slot = (0..k)
                .min_by(|&x, &y| dist2(i, &centres[x]).total_cmp(&dist2(i, &centres[y])))
                .expect("k > 0");
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut m = DVector::<f64>::zeros(r);
            for &i in &members {
                m += a.row(i).transpose();
            }
            *centre = m / members.len() as f64;
        }
    }
    let spread = (0..n).map(|i| dist2(i, &centres[assign[i]])).sum::<f64>() / (n * r) as f64;
    (assign, spread)
}

/// Weighted mean and shrunk covariance per component, with weights taken
/// from the responsibility matrix (`n x k`).
fn m_step(a: &DMatrix<f64>, resp: &DMatrix<f64>, shrinkage: f64, floor: f64, embed: usize) -> Vec<Component> {
    let (n, r) = a.shape();
    let k = resp.ncols();
    (0..k)
        .map(|c| {
            let w = resp.column(c);
            let nk: f64 = w.sum();
            let mean: DVector<f64> = if nk > 1e-12 {
                a.transpose() * w / nk
            } else {
                DVector::zeros(r)
            };
            let mut centred = a.clone();
            for i in 0..n {
                let s = w[i].sqrt();
                for j in 0..r {
                    centred[(i, j)] = (centred[(i, j)] - mean[j]) * s;
                }
            }
            let scatter = centred.transpose() * &centred;
            let cov = (scatter + DMatrix::<f64>::identity(r, r) * (shrinkage * floor)) / (nk + shrinkage);
            let eig = SymmetricEigen::new(cov);
            let mut axes = vec![0.0; r * r];
            for j in 0..r {
                for i in 0..r {
                    axes[j * r + i] = eig.eigenvectors[(i, j)];
                }
            }
            Component {
                bias: (nk.max(1e-6) / n as f64).ln(),
                gate: vec![0.0; 3 * embed],
                mean: mean.iter().copied().collect(),
                axes,
                log_var: eig.eigenvalues.iter().map(|l| l.max(1e-9 * floor).ln()).collect(),
            }
        })
        .collect()
}

/// Log density of each row under each component, ignoring the weights and
/// the shared `2π` factor.
fn log_densities(a: &DMatrix<f64>, comps: &[Component]) -> DMatrix<f64> {
    let (n, r) = a.shape();
    let k = comps.len();
    let mut logp = DMatrix::<f64>::zeros(n, k);
    for (c, comp) in comps.iter().enumerate() {
        let q = DMatrix::<f64>::from_fn(r, r, |i, j| comp.axes[j * r + i]);
        let mut centred = a.clone();
        for i in 0..n {
            for j in 0..r {
                centred[(i, j)] -= comp.mean[j];
            }
        }
        let z = centred * q;
        let logdet: f64 = comp.log_var.iter().sum();
        let inv: Vec<f64> = comp.log_var.iter().map(|l| (-l).exp()).collect();
        for i in 0..n {
            let maha: f64 = (0..r).map(|j| z[(i, j)] * z[(i, j)] * inv[j]).sum();
            logp[(i, c)] = -0.5 * (maha + logdet);
        }
    }
    logp
}

/// Responsibilities of each component for each row, and the mean log-likelihood.
fn e_step(a: &DMatrix<f64>, comps: &[Component]) -> (DMatrix<f64>, f64) {
    let (n, k) = (a.nrows(), comps.len());
    let mut logp = log_densities(a, comps);
    for (c, comp) in comps.iter().enumerate() {
        logp.column_mut(c).add_scalar_mut(comp.bias);
    }
    let mut total = 0.0;
    for i in 0..n {
        let top = logp.row(i).max();
        let s: f64 = logp.row(i).iter().map(|v| (v - top).exp()).sum();
        total += top + s.ln();
        for c in 0..k {
            logp[(i, c)] = (logp[(i, c)] - top).exp() / s;
        }
    }
    (logp, total / n as f64)
}

#[allow(clippy::too_many_arguments)]
fn make_condition(
    ex_index: usize,
    examples: &[Example],
    by_label: &BTreeMap<String, Vec<usize>>,
    prompts: &BTreeMap<String, Vec<f32>>,
    dropout: f64,
    uncond_prob: f64,
    embed_dim: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let ex = &examples[ex_index];
    let label = ex.labels.choose(rng).cloned().unwrap_or_default();
    let mut bundle = ConditioningBundle::unconditional();
    if !rng.random_bool(uncond_prob) {
        let others: Vec<usize> = by_label
            .get(&label)
            .map(|pool| pool.iter().copied().filter(|&i| i != ex_index).collect())
            .unwrap_or_default();
        if !rng.random_bool(dropout) {
            bundle.prompt_embedding = prompts[&label].clone();
        }
        // the template at generation time is some other wheel carrying the keyword
        if !rng.random_bool(dropout) {
            if let Some(&i) = others.choose(rng) {
                bundle.global_image = Some(examples[i].embedding.clone());
            }
        }
        if !rng.random_bool(dropout) {
            let n = rng.random_range(1..=3usize).min(others.len());
            for &i in others.choose_multiple(rng, n) {
                bundle.context_images.push(ContextEntry {
                    embedding: examples[i].embedding.clone(),
                    weight: 1.0,
                });
            }
        }
    }
    bundle.feature_vector(embed_dim).iter().map(|&v| v as f64).collect()
}

/// Fits a [`MixtureDenoiser`] to the items.
///
/// The mean image and basis come from randomized PCA and the latent mixture
/// from k-means++ seeded EM. The conditioning gate then starts at the mixture
/// weights and is fitted with Adam on the conditional likelihood of the
/// latent codes. Training aborts with [`Error::Diverged`] if the loss stops
/// being finite.
pub fn train_toy_denoiser(
    items: &[TrainingItem],
    schedule: &DenoiseSchedule,
    embedder: &dyn Embedder,
    config: &TrainConfig,
) -> Result<MixtureDenoiser> {
    let started = std::time::Instant::now();
    if items.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    let canvas = config.canvas;
    let pixels = canvas * canvas;
    if config.rank == 0 || config.rank >= pixels.min(items.len()) {
        return Err(Error::Param(format!(
            "rank {} must be in 1..{}",
            config.rank,
            pixels.min(items.len())
        )));
    }
    if config.components == 0 || config.components > items.len() {
        return Err(Error::Param(format!("components must be in 1..={}", items.len())));
    }
    if config.batch == 0 || config.log_every == 0 {
        return Err(Error::Param("batch and log_every must be positive".into()));
    }
    for (i, it) in items.iter().enumerate() {
        if it.image.height() != canvas || it.image.width() != canvas {
            return Err(Error::Param(format!(
                "item {i} is {}x{}, expected the {canvas}x{canvas} canvas",
                it.image.height(),
                it.image.width()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = items.len();

    let mut x = DMatrix::<f32>::zeros(n, pixels);
    for (i, it) in items.iter().enumerate() {
        for (p, v) in it.image.to_gray().data().iter().enumerate() {
            x[(i, p)] = 2.0 * v - 1.0;
        }
    }
    let mean: Vec<f32> = (0..pixels).map(|p| x.column(p).sum() / n as f32).collect();
    for (p, &m) in mean.iter().enumerate() {
        x.column_mut(p).iter_mut().for_each(|v| *v -= m);
    }
    let basis = principal_basis(&x, config.rank, config.pca_iterations, &mut rng);
    let rank = basis.ncols();
    let coords = (&x * &basis).map(|v| v as f64); // n x rank

    let embed_dim = embedder.dim();
    let mut examples = Vec::with_capacity(n);
    let mut resid_total = 0.0;
    for (i, it) in items.iter().enumerate() {
        let a0: Vec<f64> = coords.row(i).iter().copied().collect();
        let total: f64 = x.row(i).iter().map(|v| (*v as f64).powi(2)).sum();
        let inside: f64 = a0.iter().map(|v| v * v).sum();
        let resid = (total - inside).max(0.0);
        resid_total += resid;
        examples.push(Example {
            a0,
            resid,
            embedding: embedder.embed(&it.image)?,
            labels: it.labels.iter().map(|l| l.trim().to_lowercase()).collect(),
        });
    }
    let log_var_resid = (resid_total / (n * (pixels - rank)) as f64).max(1e-12).ln();

    let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut prompts: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    prompts.insert(String::new(), embedder.embed_text(DEFAULT_PROMPT));
    for (i, ex) in examples.iter().enumerate() {
        for l in &ex.labels {
            by_label.entry(l.clone()).or_default().push(i);
            prompts
                .entry(l.clone())
                .or_insert_with(|| embedder.embed_text(&format!("{DEFAULT_PROMPT}, {l}")));
        }
    }

    let steps = schedule.steps();
    let new_draw = |rng: &mut ChaCha8Rng| {
        let example = rng.random_range(0..n);
        let t = rng.random_range(1..=steps);
        let noise = (0..rank).map(|_| rng.sample(StandardNormal)).collect();
        let cond = make_condition(
            example,
            &examples,
            &by_label,
            &prompts,
            config.cond_dropout,
            config.uncond_prob,
            embed_dim,
            rng,
        );
        Draw { example, t, noise, cond }
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_E7A1);
    let eval: Vec<Draw> = (0..config.eval_draws.max(1)).map(|_| new_draw(&mut eval_rng)).collect();
    let eval_loss = |comps: &[Component], lvr: f64| {
        eval.iter()
            .map(|d| noise_loss(comps, lvr, &examples[d.example], d, schedule, pixels))
            .sum::<f64>()
            / eval.len() as f64
    };

    let start = Component {
        bias: 0.0,
        gate: vec![0.0; 3 * embed_dim],
        mean: vec![0.0; rank],
        axes: (0..rank * rank).map(|i| if i / rank == i % rank { 1.0 } else { 0.0 }).collect(),
        log_var: vec![0.0; rank],
    };
    let initial_loss = eval_loss(std::slice::from_ref(&start), 0.0);

    let k = config.components;
    let (assign, spread) = kmeans(&coords, k, &mut rng);
    let mut resp = DMatrix::<f64>::from_fn(n, k, |i, c| if assign[i] == c { 1.0 } else { 0.0 });
    let mut comps = m_step(&coords, &resp, config.shrinkage, spread, embed_dim);
    for it in 0..config.em_iterations {
        let (next, ll) = e_step(&coords, &comps);
        if !ll.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("mixture log-likelihood {ll}"),
            });
        }
        tracing::debug!(iteration = it, log_likelihood = ll, "em");
        resp = next;
        comps = m_step(&coords, &resp, config.shrinkage, spread, embed_dim);
    }
    let mixture_loss = eval_loss(&comps, log_var_resid);

    // Adam on [bias, gate…] per component
    let log_dens = log_densities(&coords, &comps);
    let width = 1 + 3 * embed_dim;
    let np = k * width;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m1 = vec![0.0f64; np];
    let mut m2 = vec![0.0f64; np];
    let mut grad = vec![0.0f64; np];
    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0usize;
    for it in 1..=config.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for _ in 0..config.batch {
            let i = rng.random_range(0..n);
            let cond = make_condition(
                i,
                &examples,
                &by_label,
                &prompts,
                config.cond_dropout,
                config.uncond_prob,
                embed_dim,
                &mut rng,
            );
            let dens: Vec<f64> = log_dens.row(i).iter().copied().collect();
            batch_loss += gate_nll(&comps, &dens, &cond, Some(&mut grad));
        }
        batch_loss /= config.batch as f64;
        if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let worst = comps.iter().map(|c| c.bias.abs()).fold(0.0, f64::max);
            return Err(Error::Diverged {
                iteration: it,
                detail: format!(
                    "loss {batch_loss}; largest |gate bias| {worst:.3}; last logged {:?}",
                    log.last().map(|p: &LossPoint| p.loss)
                ),
            });
        }
        let scale = 1.0 / config.batch as f64;
        let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for p in 0..np {
            let g = grad[p] * scale;
            m1[p] = b1 * m1[p] + (1.0 - b1) * g;
            m2[p] = b2 * m2[p] + (1.0 - b2) * g * g;
            let step = config.learning_rate * (m1[p] / c1) / ((m2[p] / c2).sqrt() + eps);
            let comp = &mut comps[p / width];
            match p % width {
                0 => comp.bias -= step,
                j => comp.gate[j - 1] -= step,
            }
        }
        window += batch_loss;
        window_n += 1;
        if it % config.log_every == 0 || it == config.iterations {
            log.push(LossPoint {
                iteration: it,
                loss: window / window_n as f64,
            });
            tracing::debug!(iteration = it, loss = window / window_n as f64, "gate");
            window = 0.0;
            window_n = 0;
        }
    }
    let final_loss = eval_loss(&comps, log_var_resid);
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            iteration: config.iterations,
            detail: "final evaluation loss is not finite".into(),
        });
    }

    let mut basis_rows = vec![0.0f32; pixels * rank];
    for p in 0..pixels {
        for i in 0..rank {
            basis_rows[p * rank + i] = basis[(p, i)];
        }
    }
    let mut model = MixtureDenoiser::assemble(
        &config.id,
        canvas,
        embed_dim,
        embedder.id(),
        schedule.clone(),
        mean,
        basis_rows,
        log_var_resid,
        comps,
    )?;
    model.training = Some(TrainingReport {
        examples: n,
        rank,
        components: k,
        iterations: config.iterations,
        initial_loss,
        mixture_loss,
        final_loss,
        log,
        seconds: started.elapsed().as_secs_f64(),
    });
    Ok(model)
}
