use std::collections::BTreeMap;
use std::sync::Arc;

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::pipeline::DenoiseSchedule;

/// A noise-prediction model operating in `[-1, 1]` pixel space.
///
/// Inputs and outputs are interleaved `canvas x canvas x channels` buffers.
/// Implementations must be deterministic for identical inputs.
pub trait DenoiserBackend: Send + Sync {
    fn id(&self) -> &str;

    fn canvas(&self) -> usize;

    fn channels(&self) -> usize {
        1
    }

    /// Whether concurrent `predict_noise` calls are allowed. The pipeline
    /// serializes calls to backends that return `false`.
    fn parallel_safe(&self) -> bool {
        true
    }

    /// Schedule the model was trained with, if it has one.
    fn native_schedule(&self) -> Option<&DenoiseSchedule> {
        None
    }

    /// Embedder whose vectors the model was trained on, if it reads conditioning at all.
    fn required_embedder(&self) -> Option<&str> {
        None
    }

    fn predict_noise(&self, noisy: &[f32], step: usize, cond: &ConditioningBundle) -> Result<Vec<f32>>;
}

/// Predicts zero noise everywhere. Useful as a stub whose updates have a closed form.
#[derive(Debug, Clone)]
pub struct ZeroNoiseBackend {
    canvas: usize,
}

impl ZeroNoiseBackend {
    pub const ID: &'static str = "stub-zero";

    pub fn new(canvas: usize) -> Self {
        Self { canvas }
    }
}

impl DenoiserBackend for ZeroNoiseBackend {
    fn id(&self) -> &str {
        Self::ID
    }

    fn canvas(&self) -> usize {
        self.canvas
    }

    fn predict_noise(&self, noisy: &[f32], _step: usize, _cond: &ConditioningBundle) -> Result<Vec<f32>> {
        Ok(vec![0.0; noisy.len()])
    }
}

/// Backends addressable by `backend_id`.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn DenoiserBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, backend: Arc<dyn DenoiserBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn with(mut self, backend: Arc<dyn DenoiserBackend>) -> Self {
        self.register(backend);
        self
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn DenoiserBackend>> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Reference(format!("unknown backend `{id}`")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}
