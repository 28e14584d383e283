//! Local HTTP service: sessions, a FIFO generation queue, feedback-driven
//! regeneration with lineage, content-addressed images and exemplar
//! annotation rounds.
//!
//! Store layout under the configured root:
//!
//! ```text
//! images/      <sha256>.png, generated and uploaded
//! records/     <record-id>.json
//! jobs/        <job-id>.json
//! sessions/    <session-id>.json
//! exemplars/   manifest.json + images/
//! annotation/  <task-id>.json
//! ```

mod annotation;
mod api;
mod config;
mod fsutil;
mod jobs;
mod sessions;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

use anyhow::{bail, Context, Result};
use wheelgen_core::exemplars::{build_corpus, ExemplarStore};
use wheelgen_core::image::DiskImageStore;
use wheelgen_core::pipeline::ZeroNoiseBackend;
use wheelgen_core::toy::MixtureDenoiser;
use wheelgen_core::{BackendRegistry, DenoiseSchedule, DenoiserBackend, Generator, RecordStore, ToyEmbedder};

pub use annotation::{Annotations, Round, DEFAULT_PERCENTILE, DEFAULT_QUORUM};
pub use api::router;
pub use config::ServiceConfig;
pub use jobs::{Job, JobBoard, JobState, Timings};
pub use sessions::{Session, Sessions};

/// Everything a handler or worker needs. Handlers hold no other state.
pub struct AppState {
    pub config: ServiceConfig,
    pub generator: Generator,
    pub records: RecordStore,
    pub jobs: JobBoard,
    pub sessions: Sessions,
    pub annotations: Annotations,
    /// Filled into requests that leave `backend_id` empty.
    pub default_backend: String,
}

pub fn image_url(sha256: &str) -> String {
    format!("/images/{sha256}")
}

/// Schedule of the built-in stub mixture; short so it stays interactive.
pub fn stub_schedule() -> DenoiseSchedule {
    DenoiseSchedule::linear(250, 4e-4, 0.08).expect("static schedule is valid")
}

/// The two stubs plus, when given, a trained mixture artifact. Returns the
/// artifact's backend id alongside.
pub fn standard_backends(canvas: usize, model: Option<&Path>) -> Result<(BackendRegistry, Option<String>)> {
    let mut backends = BackendRegistry::new()
        .with(Arc::new(ZeroNoiseBackend::new(canvas)))
        .with(Arc::new(MixtureDenoiser::synthetic(canvas, 16, stub_schedule(), 0)?));
    let mut model_id = None;
    if let Some(path) = model {
        let model = MixtureDenoiser::load(path).with_context(|| format!("loading model {}", path.display()))?;
        if model.canvas() != canvas {
            bail!("model {} works at {}px, canvas is {canvas}px", path.display(), model.canvas());
        }
        model_id = Some(model.id().to_string());
        backends.register(Arc::new(model));
    }
    Ok((backends, model_id))
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let root = &config.store;
        let canvas = config.canvas;

        let (backends, model_id) = standard_backends(canvas, config.model.as_deref())?;
        let default_backend = config
            .default_backend
            .clone()
            .or(model_id)
            .unwrap_or_else(|| MixtureDenoiser::SYNTHETIC_ID.to_string());
        if !backends.contains(&default_backend) {
            bail!("default backend `{default_backend}` is not registered");
        }

        let ex_dir = root.join("exemplars");
        std::fs::create_dir_all(&ex_dir).with_context(|| ex_dir.display().to_string())?;
        let mut exemplars = ExemplarStore::open(&ex_dir)?;
        if exemplars.is_empty() && config.seed_corpus > 0 {
            tracing::info!("seeding exemplar store with {} synthetic wheels", config.seed_corpus);
            exemplars.add_corpus(&build_corpus(config.seed_corpus, 0, canvas)?);
            exemplars.save()?;
        }

        let images = Arc::new(DiskImageStore::open(root.join("images"))?);
        let generator = Generator::new(canvas, backends, Arc::new(ToyEmbedder), images, exemplars);
        Ok(Self {
            records: RecordStore::open(root.join("records"))?,
            jobs: JobBoard::open(root.join("jobs"))?,
            sessions: Sessions::open(root.join("sessions"))?,
            annotations: Annotations::open(root.join("annotation"))?,
            generator,
            default_backend,
            config,
        })
    }

    /// Runs one job to completion; panics become failures.
    pub fn run_job(&self, job: &Job) -> jobs::Outcome {
        let parent = job.parent_id.as_deref().zip(job.feedback.as_ref());
        let run = catch_unwind(AssertUnwindSafe(|| self.generator.generate_record(&job.request, parent, &self.records)));
        match run {
            Ok(Ok(rec)) => Ok((rec.id, rec.outputs.iter().map(|o| image_url(&o.sha256)).collect())),
            Ok(Err(e)) => Err(e.to_string()),
            Err(_) => Err("generation panicked".into()),
        }
    }
}

/// The shared state plus its worker threads. Dropping it stops the
/// workers after their current job.
pub struct Service {
    state: Arc<AppState>,
    workers: Vec<JoinHandle<()>>,
}

impl Service {
    pub fn start(config: ServiceConfig) -> Result<Self> {
        let state = Arc::new(AppState::open(config)?);
        let workers = (0..state.config.workers)
            .map(|i| {
                let state = state.clone();
                std::thread::Builder::new()
                    .name(format!("wheelgen-worker-{i}"))
                    .spawn(move || {
                        while let Some(job) = state.jobs.next() {
                            tracing::info!(job = %job.id, "running");
                            let outcome = state.run_job(&job);
                            if let Err(e) = &outcome {
                                tracing::warn!(job = %job.id, "failed: {e}");
                            }
                            state.jobs.finish(&job.id, outcome);
                        }
                    })
                    .expect("spawning worker thread")
            })
            .collect();
        Ok(Self { state, workers })
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn router(&self) -> axum::Router {
        router(self.state.clone())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.state.jobs.close();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds the configured address and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let addr = config.addr;
    let service = tokio::task::spawn_blocking(move || Service::start(config)).await??;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tokio::task::spawn_blocking(move || service.shutdown()).await?;
    Ok(())
}
