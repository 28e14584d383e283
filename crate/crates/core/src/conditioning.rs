//! Conditioning assembly: prompt keywords, inspiration and template
//! resolution with dataset fallback, embeddings, and provenance.
//!
//! The wheel template travels on the global route (one embedding for the
//! whole image). Inspirations travel on the non-global route as a list of
//! weighted embeddings that the backend pools.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exemplars::{Dataset, ExemplarStore};
use crate::image::{CropRect, ImageRef, ImageRepo, ImageTensor};
use crate::request::{ConceptGroup, GenerationRequest};

pub const DEFAULT_PROMPT: &str = "a photo of a car wheel design";
pub const MAX_FALLBACK: usize = 3;

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Unit-norm image embedding.
    fn embed(&self, img: &ImageTensor) -> Result<Vec<f32>>;
    /// Unit-norm text embedding.
    fn embed_text(&self, text: &str) -> Vec<f32>;
}

/// 8x8 centred thumbnail plus an 8-bin gradient-orientation histogram.
/// Text is a normalized sum of per-keyword pseudo-random directions.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEmbedder;

impl ToyEmbedder {
    pub const ID: &'static str = "toy-embed-v1";
    const GRID: usize = 8;
    const BINS: usize = 8;
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> usize {
        Self::GRID * Self::GRID + Self::BINS
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f32>> {
        let gray = img.to_gray();
        let thumb = gray.resize(Self::GRID, Self::GRID);
        let mean = thumb.data().iter().sum::<f32>() / thumb.data().len() as f32;
        let mut pixels: Vec<f32> = thumb.data().iter().map(|v| v - mean).collect();
        normalize(&mut pixels);

        let (h, w) = (gray.height(), gray.width());
        let mut hist = vec![0.0f32; Self::BINS];
        for r in 1..h.saturating_sub(1) {
            for c in 1..w.saturating_sub(1) {
                let gx = gray.get(r, c + 1, 0) - gray.get(r, c - 1, 0);
                let gy = gray.get(r + 1, c, 0) - gray.get(r - 1, c, 0);
                let mag = gx.hypot(gy);
                if mag > 1e-6 {
                    let a = gy.atan2(gx).rem_euclid(std::f32::consts::PI);
                    let bin = ((a / std::f32::consts::PI * Self::BINS as f32) as usize).min(Self::BINS - 1);
                    hist[bin] += mag;
                }
            }
        }
        normalize(&mut hist);

        let mut v = pixels;
        v.extend(hist);
        if !normalize(&mut v) {
            v[0] = 1.0;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Embedding {
                what: "image".into(),
                message: "non-finite embedding".into(),
            });
        }
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.dim()];
        for token in text.split(',').map(|t| t.trim().to_lowercase()).filter(|t| !t.is_empty()) {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
            let mut dir: Vec<f32> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&mut dir);
            for (a, d) in acc.iter_mut().zip(dir) {
                *a += d;
            }
        }
        if !normalize(&mut acc) {
            acc[0] = 1.0;
        }
        acc
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Scales to unit L2 norm; returns false (leaving zeros) for a zero vector.
fn normalize(v: &mut [f32]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n <= 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub embedding: Vec<f32>,
    pub weight: f32,
}

/// Where each conditioning input came from, kept with every generation record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    /// Seed of the RNG used for dataset sampling.
    pub sampling_seed: u64,
    pub groups: Vec<GroupProvenance>,
    pub template: TemplateProvenance,
    #[serde(default)]
    pub template_as_sketch: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Provenance {
    pub fn exemplar_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.groups.iter().flat_map(|g| g.exemplar_ids.iter().cloned()).collect();
        if let Some(t) = &self.template.exemplar_id {
            ids.push(t.clone());
        }
        ids
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSource {
    #[default]
    User,
    Exemplars,
    PromptOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupProvenance {
    pub keyword: String,
    pub source: GroupSource,
    #[serde(default)]
    pub inspiration_ids: Vec<String>,
    #[serde(default)]
    pub exemplar_ids: Vec<String>,
    #[serde(default)]
    pub warning: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSource {
    User,
    Exemplar,
    #[default]
    Neutral,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateProvenance {
    pub source: TemplateSource,
    #[serde(default)]
    pub keyword: Option<String>,
    #[serde(default)]
    pub exemplar_id: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub prompt: String,
    /// Empty for the unconditional bundle.
    pub prompt_embedding: Vec<f32>,
    pub global_image: Option<Vec<f32>>,
    pub context_images: Vec<ContextEntry>,
    pub provenance: Provenance,
}

impl ConditioningBundle {
    /// No prompt, no images.
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn is_unconditional(&self) -> bool {
        self.prompt_embedding.is_empty() && self.global_image.is_none() && self.context_images.is_empty()
    }

    /// Fixed-size feature `[prompt | global | pooled context]`, each block `dim`
    /// wide, zero where absent.
    ///
    /// Context entries are pooled with a weighted-softmax surrogate of
    /// cross-attention that includes an always-present null slot:
    /// `a_i = w_i·exp(q·e_i) / (1 + Σ_j w_j·exp(q·e_j))`, with the prompt
    /// embedding as query. A zero-weight entry contributes nothing.
    pub fn feature_vector(&self, dim: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; 3 * dim];
        if self.prompt_embedding.len() == dim {
            out[..dim].copy_from_slice(&self.prompt_embedding);
        }
        if let Some(g) = self.global_image.as_ref().filter(|g| g.len() == dim) {
            out[dim..2 * dim].copy_from_slice(g);
        }
        let query = &self.prompt_embedding;
        let mut denom = 1.0f32;
        let mut scores = Vec::with_capacity(self.context_images.len());
        for e in &self.context_images {
            let s = if query.len() == e.embedding.len() {
                query.iter().zip(&e.embedding).map(|(a, b)| a * b).sum::<f32>()
            } else {
                0.0
            };
            let a = e.weight * s.exp();
            denom += a;
            scores.push(a);
        }
        let pooled = &mut out[2 * dim..];
        for (e, a) in self.context_images.iter().zip(scores) {
            if e.embedding.len() != dim {
                continue;
            }
            let a = a / denom;
            for (p, v) in pooled.iter_mut().zip(&e.embedding) {
                *p += a * v;
            }
        }
        out
    }
}

/// Default prompt followed by keywords in descending group weight (stable on ties).
pub fn assemble_prompt(concepts: &[ConceptGroup], default_prompt: &str) -> String {
    let mut order: Vec<&ConceptGroup> = concepts.iter().filter(|g| !g.keyword.trim().is_empty()).collect();
    order.sort_by(|a, b| b.group_weight.total_cmp(&a.group_weight));
    let mut prompt = default_prompt.to_string();
    for g in order {
        prompt.push_str(", ");
        prompt.push_str(&g.keyword.trim().to_lowercase());
    }
    prompt
}

#[derive(Clone, Debug, PartialEq)]
pub enum InspirationOrigin {
    User { id: String, image: ImageRef },
    Exemplar { id: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedInspiration {
    pub keyword: String,
    pub origin: InspirationOrigin,
    pub crop: Option<CropRect>,
    /// User image weight times group weight, or the group weight for exemplars.
    pub weight: f32,
}

/// Chooses the images each group contributes.
///
/// Groups whose user images all end up with zero effective weight are
/// treated like groups without images, so setting a weight to zero is
/// equivalent to deleting the image.
pub fn resolve_inspirations(
    concepts: &[ConceptGroup],
    store: &ExemplarStore,
    rng: &mut impl Rng,
    max_fallback: usize,
) -> (Vec<ResolvedInspiration>, Vec<GroupProvenance>) {
    let mut out = Vec::new();
    let mut prov = Vec::new();
    for g in concepts {
        let keyword = g.keyword.trim().to_lowercase();
        let user: Vec<_> = g
            .inspirations
            .iter()
            .map(|i| (i, i.weight * g.group_weight))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        if !user.is_empty() {
            prov.push(GroupProvenance {
                keyword: keyword.clone(),
                source: GroupSource::User,
                inspiration_ids: user.iter().map(|(i, _)| i.id.clone()).collect(),
                ..Default::default()
            });
            for (i, w) in user {
                out.push(ResolvedInspiration {
                    keyword: keyword.clone(),
                    origin: InspirationOrigin::User {
                        id: i.id.clone(),
                        image: i.image.clone(),
                    },
                    crop: i.crop,
                    weight: w,
                });
            }
            continue;
        }

        let candidates = store.candidates(&keyword, Dataset::Inspiration);
        if candidates.is_empty() {
            prov.push(GroupProvenance {
                keyword: keyword.clone(),
                source: GroupSource::PromptOnly,
                warning: Some(format!("no images for `{keyword}`; group contributes to the prompt only")),
                ..Default::default()
            });
            continue;
        }
        let take = max_fallback.min(candidates.len());
        let mut picked: Vec<usize> = sample_indices(rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        let ids: Vec<String> = picked.iter().map(|&i| candidates[i].to_string()).collect();
        for id in &ids {
            out.push(ResolvedInspiration {
                keyword: keyword.clone(),
                origin: InspirationOrigin::Exemplar { id: id.clone() },
                crop: None,
                weight: g.group_weight,
            });
        }
        prov.push(GroupProvenance {
            keyword,
            source: GroupSource::Exemplars,
            exemplar_ids: ids,
            ..Default::default()
        });
    }
    (out, prov)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemplateChoice {
    User(ImageRef),
    Exemplar(String),
    /// Blank disc on white.
    Neutral,
}

/// User template if given, else a wheel sampled for the highest-weight keyword.
pub fn resolve_template(
    req: &GenerationRequest,
    store: &ExemplarStore,
    rng: &mut impl Rng,
) -> (TemplateChoice, TemplateProvenance) {
    if let Some(t) = &req.template {
        return (
            TemplateChoice::User(t.clone()),
            TemplateProvenance {
                source: TemplateSource::User,
                ..Default::default()
            },
        );
    }
    let mut best: Option<&ConceptGroup> = None;
    for g in req.concepts.iter().filter(|g| !g.keyword.trim().is_empty()) {
        if best.is_none_or(|b| g.group_weight > b.group_weight) {
            best = Some(g);
        }
    }
    let keyword = best.map(|g| g.keyword.trim().to_lowercase());
    if let Some(kw) = &keyword {
        let candidates = store.candidates(kw, Dataset::Wheel);
        if !candidates.is_empty() {
            let id = candidates[rng.random_range(0..candidates.len())].to_string();
            return (
                TemplateChoice::Exemplar(id.clone()),
                TemplateProvenance {
                    source: TemplateSource::Exemplar,
                    keyword: keyword.clone(),
                    exemplar_id: Some(id),
                    note: None,
                },
            );
        }
    }
    (
        TemplateChoice::Neutral,
        TemplateProvenance {
            source: TemplateSource::Neutral,
            keyword,
            exemplar_id: None,
            note: Some("no wheel available for the keyword; using a blank disc".into()),
        },
    )
}

/// Mid-grey disc of radius `0.45·canvas` on white.
pub fn neutral_template(canvas: usize) -> ImageTensor {
    let c = (canvas as f64 - 1.0) / 2.0;
    let radius = 0.45 * canvas as f64;
    ImageTensor::from_fn(canvas, canvas, |r, col| {
        if (r as f64 - c).hypot(col as f64 - c) <= radius {
            0.5
        } else {
            1.0
        }
    })
}

/// Bundle plus the template image and whether it was drawn from the dataset.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub bundle: ConditioningBundle,
    pub template: ImageTensor,
    pub template_from_dataset: bool,
}

/// Everything `build_bundle` reads from.
pub struct ConditioningSources<'a> {
    pub embedder: &'a dyn Embedder,
    pub exemplars: &'a ExemplarStore,
    pub images: &'a dyn ImageRepo,
    pub canvas: usize,
    pub default_prompt: &'a str,
}

pub fn build_bundle(
    req: &GenerationRequest,
    src: &ConditioningSources<'_>,
    rng: &mut impl Rng,
) -> Result<Conditioning> {
    let prompt = assemble_prompt(&req.concepts, src.default_prompt);
    let (inspirations, groups) = resolve_inspirations(&req.concepts, src.exemplars, rng, MAX_FALLBACK);
    let (choice, template_prov) = resolve_template(req, src.exemplars, rng);

    let (template, from_dataset): (ImageTensor, bool) = match &choice {
        TemplateChoice::User(r) => (src.images.get(r)?, false),
        TemplateChoice::Exemplar(id) => (Arc::unwrap_or_clone(src.exemplars.image(id)?), true),
        TemplateChoice::Neutral => (neutral_template(src.canvas), false),
    };
    let template = template.to_canvas(src.canvas);
    let global = src.embedder.embed(&template).map_err(|e| Error::Embedding {
        what: "template".into(),
        message: e.to_string(),
    })?;

    let mut context = Vec::new();
    for insp in inspirations.iter().filter(|i| i.weight > 0.0) {
        let (img, name) = match &insp.origin {
            InspirationOrigin::User { id, image } => (src.images.get(image)?, format!("inspiration `{id}`")),
            InspirationOrigin::Exemplar { id } => {
                (Arc::unwrap_or_clone(src.exemplars.image(id)?), format!("exemplar `{id}`"))
            }
        };
        let img = match &insp.crop {
            Some(c) => img.crop(c)?,
            None => img,
        };
        let embedding = src.embedder.embed(&img).map_err(|e| Error::Embedding {
            what: name,
            message: e.to_string(),
        })?;
        context.push(ContextEntry {
            embedding,
            weight: insp.weight.clamp(0.0, 1.0),
        });
    }

    let warnings = groups.iter().filter_map(|g| g.warning.clone()).collect();
    Ok(Conditioning {
        bundle: ConditioningBundle {
            prompt_embedding: src.embedder.embed_text(&prompt),
            prompt: prompt.clone(),
            global_image: Some(global),
            context_images: context,
            provenance: Provenance {
                prompt,
                sampling_seed: 0,
                groups,
                template: template_prov,
                template_as_sketch: false,
                warnings,
            },
        },
        template,
        template_from_dataset: from_dataset,
    })
}
