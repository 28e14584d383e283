//! Symmetry-constrained, keyword-conditioned wheel design generation.
//!
//! The crate holds the request model, the rotational-symmetry operators, the
//! denoising pipeline with interleaved constraint projection, conditioning
//! assembly, the exemplar data pipeline, a small trainable toy denoiser, and
//! the record store used by the service and CLI.

pub mod codec;
pub mod conditioning;
pub mod engine;
pub mod error;
pub mod exemplars;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod records;
pub mod request;
pub mod symmetry;
pub mod toy;

pub use conditioning::{ConditioningBundle, Embedder, ToyEmbedder};
pub use engine::{Generation, Generator};
pub use error::{Error, Result};
pub use image::{CropRect, ImageRef, ImageRepo, ImageTensor};
pub use pipeline::{BackendRegistry, DenoiseSchedule, DenoiserBackend, ProjectMode, SubProcessPlan};
pub use records::{GenerationRecord, RecordStore};
pub use request::{ConceptGroup, FeedbackDelta, GenerationRequest, SymmetryConfig};
pub use symmetry::{symmetrize, symmetry_score, Interpolation};
