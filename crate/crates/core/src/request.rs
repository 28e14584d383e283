//! The user-facing request model: hierarchical concept groups, symmetry settings,
//! validation and feedback deltas.

use std::collections::HashSet;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CropRect, ImageRef};
use crate::pipeline::ProjectMode;
use crate::symmetry::Interpolation;

/// Per-group limits enforced by the HTTP service and the studio UI.
pub const SERVICE_MAX_GROUPS: usize = 3;
pub const SERVICE_MAX_IMAGES_PER_GROUP: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspirationSource {
    #[default]
    User,
    ExemplarDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspirationImage {
    /// Stable within a request; feedback deltas address images by this id.
    #[serde(default)]
    pub id: String,
    pub image: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRect>,
    #[serde(default = "one")]
    pub weight: f32,
    #[serde(default)]
    pub source: InspirationSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub keyword: String,
    #[serde(default)]
    pub inspirations: Vec<InspirationImage>,
    #[serde(default = "one")]
    pub group_weight: f32,
}

impl ConceptGroup {
    pub fn new(keyword: &str) -> Self {
        Self {
            keyword: normalize_keyword(keyword),
            inspirations: Vec::new(),
            group_weight: 1.0,
        }
    }

    pub fn with_image(mut self, id: &str, image: ImageRef, weight: f32) -> Self {
        self.inspirations.push(InspirationImage {
            id: id.to_string(),
            image,
            crop: None,
            weight,
            source: InspirationSource::User,
        });
        self
    }
}

pub fn normalize_keyword(k: &str) -> String {
    k.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryConfig {
    pub enabled: bool,
    /// Repetition number.
    pub k: u32,
    /// `(row, col)` in pixel coordinates; pixel centres sit on integers.
    pub center: (f64, f64),
    pub radius: f64,
    #[serde(default = "yes")]
    pub final_replication: bool,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl SymmetryConfig {
    /// Centred on the pixel grid with the mask just outside a standard wheel.
    pub fn for_canvas(canvas: usize, k: u32) -> Self {
        let c = (canvas as f64 - 1.0) / 2.0;
        Self {
            enabled: true,
            k,
            center: (c, c),
            radius: 0.47 * canvas as f64,
            final_replication: true,
            interpolation: Interpolation::Bilinear,
        }
    }

    pub fn disabled(canvas: usize) -> Self {
        Self {
            enabled: false,
            ..Self::for_canvas(canvas, 2)
        }
    }

    /// Largest radius whose disc (measured between pixel centres) stays on the canvas.
    pub fn max_radius(canvas: usize, center: (f64, f64)) -> f64 {
        let edge = canvas as f64 - 1.0;
        center.0.min(center.1).min(edge - center.0).min(edge - center.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    /// Fraction of the schedule the sketch is diffused to before denoising starts.
    #[serde(default = "default_strength")]
    pub sketch_strength: f64,
    /// Steps where constraints are projected; `None` uses the deployment default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<usize>>,
    #[serde(default)]
    pub project_mode: ProjectMode,
    /// Use a dataset-sampled wheel as the initial sketch when none is supplied.
    #[serde(default = "yes")]
    pub template_as_sketch: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            sketch_strength: default_strength(),
            boundaries: None,
            project_mode: ProjectMode::default(),
            template_as_sketch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<ImageRef>,
    pub concepts: Vec<ConceptGroup>,
    pub symmetry: SymmetryConfig,
    pub output_count: u32,
    #[serde(default)]
    pub seed: u64,
    pub backend_id: String,
    #[serde(default)]
    pub sampling: SamplingOptions,
}

impl GenerationRequest {
    pub fn new(concepts: Vec<ConceptGroup>, symmetry: SymmetryConfig, backend_id: &str) -> Self {
        Self {
            sketch: None,
            template: None,
            concepts,
            symmetry,
            output_count: 1,
            seed: 0,
            backend_id: backend_id.to_string(),
            sampling: SamplingOptions::default(),
        }
    }

    /// Lowercases keywords and assigns ids to unnamed inspirations.
    pub fn normalize(&mut self) {
        let mut taken: HashSet<String> = self
            .concepts
            .iter()
            .flat_map(|g| g.inspirations.iter().map(|i| i.id.clone()))
            .filter(|id| !id.is_empty())
            .collect();
        let mut next = 0usize;
        for group in &mut self.concepts {
            group.keyword = normalize_keyword(&group.keyword);
            for insp in &mut group.inspirations {
                if insp.id.is_empty() {
                    insp.id = fresh_id(&mut taken, &mut next);
                }
            }
        }
    }

    pub fn inspiration_ids(&self) -> impl Iterator<Item = &str> {
        self.concepts
            .iter()
            .flat_map(|g| g.inspirations.iter().map(|i| i.id.as_str()))
    }
}

fn fresh_id(taken: &mut HashSet<String>, next: &mut usize) -> String {
    loop {
        let id = format!("insp-{next}");
        *next += 1;
        if taken.insert(id.clone()) {
            return id;
        }
    }
}

/// One broken rule, rendered as `field: rule`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every request invariant against a square canvas of side `canvas`.
/// Returns an empty list when the request is well formed.
pub fn validate_request(req: &GenerationRequest, canvas: usize) -> Vec<Violation> {
    let mut out = Vec::new();

    if req.concepts.is_empty() {
        out.push(Violation::new("concepts", "at least one required"));
    } else if req.concepts.iter().all(|g| g.keyword.trim().is_empty()) {
        out.push(Violation::new("concepts", "at least one nonempty keyword required"));
    }

    let mut seen = HashSet::new();
    for (i, g) in req.concepts.iter().enumerate() {
        if g.keyword.trim().is_empty() {
            out.push(Violation::new(format!("concepts[{i}].keyword"), "must be nonempty"));
        }
        if !unit(g.group_weight) {
            out.push(Violation::new(format!("concepts[{i}].group_weight"), "must be in [0, 1]"));
        }
        for (j, insp) in g.inspirations.iter().enumerate() {
            let field = format!("concepts[{i}].inspirations[{j}]");
            if !unit(insp.weight) {
                out.push(Violation::new(format!("{field}.weight"), "must be in [0, 1]"));
            }
            if let Some(crop) = &insp.crop {
                if !crop.fits(insp.image.width, insp.image.height) {
                    out.push(Violation::new(
                        format!("{field}.crop"),
                        format!(
                            "must have positive area inside the {}x{} image",
                            insp.image.width, insp.image.height
                        ),
                    ));
                }
            }
            if !insp.id.is_empty() && !seen.insert(insp.id.as_str()) {
                out.push(Violation::new(format!("{field}.id"), format!("duplicate id `{}`", insp.id)));
            }
        }
    }

    if req.output_count < 1 {
        out.push(Violation::new("output_count", "must be ≥ 1"));
    }

    let sym = &req.symmetry;
    if sym.enabled && sym.k < 2 {
        out.push(Violation::new("symmetry.k", "must be ≥ 2"));
    }
    let (cr, cc) = sym.center;
    let edge = canvas as f64 - 1.0;
    if !(cr.is_finite() && cc.is_finite() && (0.0..=edge).contains(&cr) && (0.0..=edge).contains(&cc)) {
        out.push(Violation::new("symmetry.center", format!("must lie inside the {canvas}x{canvas} canvas")));
    } else if !(sym.radius.is_finite() && sym.radius >= 0.0)
        || sym.radius > SymmetryConfig::max_radius(canvas, sym.center) + 1e-9
    {
        out.push(Violation::new(
            "symmetry.radius",
            format!("circle must fit inside the {canvas}x{canvas} canvas"),
        ));
    }

    for (name, img) in [("sketch", &req.sketch), ("template", &req.template)] {
        if let Some(r) = img {
            if r.width as usize != canvas || r.height as usize != canvas {
                out.push(Violation::new(
                    name,
                    format!("must be {canvas}x{canvas} to match the canvas, got {}x{}", r.width, r.height),
                ));
            }
        }
    }

    let s = &req.sampling;
    if !(s.sketch_strength > 0.0 && s.sketch_strength <= 1.0) {
        out.push(Violation::new("sampling.sketch_strength", "must be in (0, 1]"));
    }
    if let Some(b) = &s.boundaries {
        if b.first() == Some(&0) || b.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation::new("sampling.boundaries", "must be strictly increasing and positive"));
        }
    }

    if req.backend_id.trim().is_empty() {
        out.push(Violation::new("backend_id", "must be nonempty"));
    }
    out
}

/// Additional limits of the interactive tier: at most three groups of three images.
pub fn validate_service_limits(req: &GenerationRequest) -> Vec<Violation> {
    let mut out = Vec::new();
    if req.concepts.len() > SERVICE_MAX_GROUPS {
        out.push(Violation::new(
            "concepts",
            format!("at most {SERVICE_MAX_GROUPS} concept groups allowed"),
        ));
    }
    for (i, g) in req.concepts.iter().enumerate() {
        if g.inspirations.len() > SERVICE_MAX_IMAGES_PER_GROUP {
            out.push(Violation::new(
                format!("concepts[{i}].inspirations"),
                format!("at most {SERVICE_MAX_IMAGES_PER_GROUP} images per group allowed"),
            ));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddedInspiration {
    pub keyword: String,
    pub inspiration: InspirationImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightChange {
    pub id: String,
    pub weight: f32,
}

/// Edits a designer makes to a generated result before regenerating.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDelta {
    #[serde(default)]
    pub added_inspirations: Vec<AddedInspiration>,
    #[serde(default)]
    pub removed_inspiration_ids: Vec<String>,
    #[serde(default)]
    pub weight_changes: Vec<WeightChange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry_change: Option<SymmetryConfig>,
    #[serde(default)]
    pub note: String,
    /// Pins the child's seed; otherwise a fresh one is drawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl FeedbackDelta {
    pub fn is_empty(&self) -> bool {
        self.added_inspirations.is_empty()
            && self.removed_inspiration_ids.is_empty()
            && self.weight_changes.is_empty()
            && self.symmetry_change.is_none()
    }
}

/// Derives the child request for a regeneration. The parent is left untouched.
pub fn apply_feedback(
    parent: &GenerationRequest,
    delta: &FeedbackDelta,
    rng: &mut dyn RngCore,
) -> Result<GenerationRequest> {
    let existing: HashSet<&str> = parent.inspiration_ids().collect();
    for id in &delta.removed_inspiration_ids {
        if !existing.contains(id.as_str()) {
            return Err(Error::Reference(format!("inspiration `{id}` is not part of the parent request")));
        }
    }

    let mut child = parent.clone();
    let removed: HashSet<&str> = delta.removed_inspiration_ids.iter().map(String::as_str).collect();
    for group in &mut child.concepts {
        group.inspirations.retain(|i| !removed.contains(i.id.as_str()));
    }

    let mut taken: HashSet<String> = child.inspiration_ids().map(str::to_string).collect();
    let mut next = 0usize;
    for added in &delta.added_inspirations {
        let keyword = normalize_keyword(&added.keyword);
        let mut insp = added.inspiration.clone();
        if insp.id.is_empty() {
            insp.id = fresh_id(&mut taken, &mut next);
        } else if !taken.insert(insp.id.clone()) {
            return Err(Error::Reference(format!("inspiration id `{}` already in use", insp.id)));
        }
        match child.concepts.iter_mut().find(|g| g.keyword == keyword) {
            Some(group) => group.inspirations.push(insp),
            None => {
                let mut group = ConceptGroup::new(&keyword);
                group.inspirations.push(insp);
                child.concepts.push(group);
            }
        }
    }

    for change in &delta.weight_changes {
        let target = child
            .concepts
            .iter_mut()
            .flat_map(|g| g.inspirations.iter_mut())
            .find(|i| i.id == change.id)
            .ok_or_else(|| Error::Reference(format!("inspiration `{}` not found", change.id)))?;
        target.weight = change.weight;
    }

    if let Some(sym) = &delta.symmetry_change {
        child.symmetry = sym.clone();
    }
    child.seed = delta.seed.unwrap_or_else(|| rng.next_u64());
    Ok(child)
}

fn unit(w: f32) -> bool {
    (0.0..=1.0).contains(&w)
}

fn one() -> f32 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_strength() -> f64 {
    0.6
}
