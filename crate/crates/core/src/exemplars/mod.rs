//! Annotation votes, exemplar aggregation, the labelled image store and the
//! synthetic wheel corpus.

mod store;
mod votes;
mod wheel;

pub use store::{Dataset, ExemplarEntry, ExemplarStore, MANIFEST};
pub use votes::{aggregate_top_percent, percentile_target, record_vote, AnnotationTask, ExemplarSet, VoteMatrix};
pub use wheel::{build_corpus, gen_wheel, Corpus, CorpusItem, LabelReport, WheelParams, LABELS, OUTER_RADIUS};
