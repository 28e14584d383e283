//! Request → images, with records, regeneration and replay.

use std::sync::{Arc, RwLock};

use chrono::Utc;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{build_bundle, ConditioningSources, Embedder, Provenance, DEFAULT_PROMPT};
use crate::error::{Error, Result};
use crate::exemplars::ExemplarStore;
use crate::image::{ImageRef, ImageRepo, ImageTensor};
use crate::pipeline::{run_pipeline, BackendRegistry, DenoiseSchedule, DenoiserBackend, PipelineJob, SubProcessPlan};
use crate::records::{GenerationRecord, RecordStore};
use crate::request::{apply_feedback, validate_request, FeedbackDelta, GenerationRequest, Violation};

/// Seed of the RNG that samples exemplars and templates, derived from the request seed.
pub fn conditioning_seed(seed: u64) -> u64 {
    let mut z = seed ^ 0x5EED_C0DE_D00D_F00D;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// The normalized request that produced the images.
    pub request: GenerationRequest,
    pub images: Vec<ImageTensor>,
    pub provenance: Provenance,
}

/// Shared generation context. Safe to use from several threads; the
/// exemplar store is swapped atomically so each run sees one snapshot.
pub struct Generator {
    canvas: usize,
    backends: BackendRegistry,
    embedder: Arc<dyn Embedder>,
    images: Arc<dyn ImageRepo>,
    exemplars: RwLock<Arc<ExemplarStore>>,
    pub default_prompt: String,
    /// Used for backends without a schedule of their own.
    pub default_schedule: DenoiseSchedule,
}

impl Generator {
    pub fn new(
        canvas: usize,
        backends: BackendRegistry,
        embedder: Arc<dyn Embedder>,
        images: Arc<dyn ImageRepo>,
        exemplars: ExemplarStore,
    ) -> Self {
        Self {
            canvas,
            backends,
            embedder,
            images,
            exemplars: RwLock::new(Arc::new(exemplars)),
            default_prompt: DEFAULT_PROMPT.to_string(),
            default_schedule: DenoiseSchedule::default_toy(),
        }
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    pub fn backends(&self) -> &BackendRegistry {
        &self.backends
    }

    pub fn images(&self) -> &Arc<dyn ImageRepo> {
        &self.images
    }

    pub fn exemplars(&self) -> Arc<ExemplarStore> {
        self.exemplars.read().expect("exemplar lock poisoned").clone()
    }

    /// Copy-on-write update of the exemplar store.
    pub fn update_exemplars<T>(&self, f: impl FnOnce(&mut ExemplarStore) -> Result<T>) -> Result<T> {
        let mut guard = self.exemplars.write().expect("exemplar lock poisoned");
        let mut next = ExemplarStore::clone(&guard);
        let out = f(&mut next)?;
        *guard = Arc::new(next);
        Ok(out)
    }

    fn backend(&self, id: &str) -> Option<Arc<dyn DenoiserBackend>> {
        self.backends.get(id).ok()
    }

    fn schedule_for<'a>(&'a self, backend: &'a dyn DenoiserBackend) -> &'a DenoiseSchedule {
        backend.native_schedule().unwrap_or(&self.default_schedule)
    }

    /// Normalizes and validates a request against this deployment.
    pub fn check(&self, req: &GenerationRequest) -> Result<GenerationRequest> {
        let mut req = req.clone();
        req.normalize();
        let mut violations = validate_request(&req, self.canvas);
        match self.backend(&req.backend_id) {
            None if !req.backend_id.trim().is_empty() => {
                violations.push(Violation::new(
                    "backend_id",
                    format!("unknown backend `{}`", req.backend_id),
                ));
            }
            None => {}
            Some(b) => {
                if b.canvas() != self.canvas {
                    violations.push(Violation::new(
                        "backend_id",
                        format!("backend works at {0}x{0}, deployment canvas is {1}x{1}", b.canvas(), self.canvas),
                    ));
                }
                if let Some(e) = b.required_embedder() {
                    if e != self.embedder.id() {
                        violations.push(Violation::new(
                            "backend_id",
                            format!("backend needs embedder `{e}`, deployment uses `{}`", self.embedder.id()),
                        ));
                    }
                }
                let steps = self.schedule_for(b.as_ref()).steps();
                if let Some(bs) = &req.sampling.boundaries {
                    if bs.last().is_some_and(|&l| l >= steps) {
                        violations.push(Violation::new(
                            "sampling.boundaries",
                            format!("must be below the {steps}-step schedule"),
                        ));
                    }
                }
            }
        }
        if violations.is_empty() {
            Ok(req)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    /// Runs a request. Any failed output fails the whole generation.
    pub fn generate(&self, req: &GenerationRequest) -> Result<Generation> {
        let req = self.check(req)?;
        let backend = self.backends.get(&req.backend_id)?;
        let schedule = self.schedule_for(backend.as_ref());
        let exemplars = self.exemplars();

        let cond_seed = conditioning_seed(req.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cond_seed);
        let sources = ConditioningSources {
            embedder: self.embedder.as_ref(),
            exemplars: &exemplars,
            images: self.images.as_ref(),
            canvas: self.canvas,
            default_prompt: &self.default_prompt,
        };
        let mut cond = build_bundle(&req, &sources, &mut rng)?;
        cond.bundle.provenance.sampling_seed = cond_seed;

        let user_sketch = match &req.sketch {
            Some(r) => Some(self.images.get(r)?),
            None => None,
        };
        let sketch = match user_sketch {
            Some(s) => Some(s),
            None if req.sampling.template_as_sketch => {
                cond.bundle.provenance.template_as_sketch = true;
                Some(cond.template.clone())
            }
            None => None,
        };

        let plan = match &req.sampling.boundaries {
            Some(b) => SubProcessPlan::new(b.clone(), req.sampling.project_mode, schedule.steps())?,
            None => SubProcessPlan::default_for(schedule.steps(), req.sampling.project_mode),
        };
        let job = PipelineJob {
            request: &req,
            sketch: sketch.as_ref(),
            cond: &cond.bundle,
            backend: backend.as_ref(),
            schedule,
            plan: &plan,
        };
        let images = run_pipeline(&job)?.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Generation {
            provenance: cond.bundle.provenance,
            request: req,
            images,
        })
    }

    /// Generates, stores the images and appends a record.
    pub fn generate_record(
        &self,
        req: &GenerationRequest,
        parent: Option<(&str, &FeedbackDelta)>,
        records: &RecordStore,
    ) -> Result<GenerationRecord> {
        self.generate_record_with_id(&GenerationRecord::new_id(), req, parent, records)
    }

    pub fn generate_record_with_id(
        &self,
        id: &str,
        req: &GenerationRequest,
        parent: Option<(&str, &FeedbackDelta)>,
        records: &RecordStore,
    ) -> Result<GenerationRecord> {
        if let Some((p, _)) = parent {
            if !records.contains(p) {
                return Err(Error::Reference(format!("parent record {p} not found")));
            }
        }
        let generation = self.generate(req)?;
        let outputs = generation
            .images
            .iter()
            .map(|img| self.images.put(img))
            .collect::<Result<Vec<_>>>()?;
        let rec = GenerationRecord {
            id: id.to_string(),
            request: generation.request,
            parent_id: parent.map(|(p, _)| p.to_string()),
            feedback: parent.map(|(_, d)| d.clone()),
            outputs,
            created_at: Utc::now(),
            resolved_conditioning: generation.provenance,
        };
        records.insert(rec.clone())?;
        Ok(rec)
    }

    /// Child request for feedback on `parent_id`; the fresh seed comes from `rng`
    /// unless the delta pins one.
    pub fn child_request(
        &self,
        records: &RecordStore,
        parent_id: &str,
        delta: &FeedbackDelta,
        rng: &mut dyn RngCore,
    ) -> Result<GenerationRequest> {
        let parent = records
            .get(parent_id)
            .ok_or_else(|| Error::Reference(format!("record {parent_id} not found")))?;
        apply_feedback(&parent.request, delta, rng)
    }

    pub fn regenerate(
        &self,
        records: &RecordStore,
        parent_id: &str,
        delta: &FeedbackDelta,
        rng: &mut dyn RngCore,
    ) -> Result<GenerationRecord> {
        let child = self.child_request(records, parent_id, delta, rng)?;
        self.generate_record(&child, Some((parent_id, delta)), records)
    }

    /// Re-runs a record's snapshot.
    pub fn replay(&self, rec: &GenerationRecord) -> Result<Vec<ImageTensor>> {
        Ok(self.generate(&rec.request)?.images)
    }

    /// Whether a replay reproduces the stored PNGs byte for byte.
    pub fn verify_replay(&self, rec: &GenerationRecord) -> Result<bool> {
        let images = self.replay(rec)?;
        let refs = images
            .iter()
            .map(|img| Ok(ImageRef::for_png(&img.to_png()?, img)))
            .collect::<Result<Vec<_>>>()?;
        Ok(refs == rec.outputs)
    }
}
