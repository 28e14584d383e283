//! Annotation rounds: raters vote per keyword, and once a round reaches
//! its quorum the top-voted wheels become that keyword's exemplar set.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use wheelgen_core::exemplars::{aggregate_top_percent, record_vote, AnnotationTask, ExemplarSet, VoteMatrix};

use crate::fsutil::{read_all, write_json};

pub const DEFAULT_QUORUM: u32 = 16;
pub const DEFAULT_PERCENTILE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub task: AnnotationTask,
    pub votes: VoteMatrix,
    /// Raters needed before the round is aggregated.
    pub quorum: u32,
    pub percentile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<ExemplarSet>,
    pub created_at: DateTime<Utc>,
}

impl Round {
    pub fn new(task: AnnotationTask, quorum: u32, percentile: f64) -> Self {
        Self {
            votes: VoteMatrix::for_task(&task),
            task,
            quorum,
            percentile,
            exemplars: None,
            created_at: Utc::now(),
        }
    }

    pub fn reached_quorum(&self) -> bool {
        self.votes.rater_count >= self.quorum
    }
}

pub enum VoteError {
    UnknownTask,
    DuplicateRater(String),
    Rejected(String),
    Storage(anyhow::Error),
}

pub struct Annotations {
    dir: PathBuf,
    rounds: Mutex<BTreeMap<String, Round>>,
}

impl Annotations {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        let rounds = read_all::<Round>(&dir)?.into_iter().map(|r| (r.task.id.clone(), r)).collect();
        Ok(Self {
            dir,
            rounds: Mutex::new(rounds),
        })
    }

    fn persist(&self, round: &Round) -> Result<()> {
        let path = self.dir.join(format!("{}.json", round.task.id));
        write_json(&path, round).with_context(|| path.display().to_string())
    }

    /// Registers a round; `false` when the id is taken.
    pub fn create(&self, round: Round) -> Result<bool> {
        let mut rounds = self.rounds.lock().expect("annotation lock poisoned");
        if rounds.contains_key(&round.task.id) {
            return Ok(false);
        }
        self.persist(&round)?;
        rounds.insert(round.task.id.clone(), round);
        Ok(true)
    }

    pub fn get(&self, id: &str) -> Option<Round> {
        self.rounds.lock().expect("annotation lock poisoned").get(id).cloned()
    }

    pub fn for_keyword(&self, keyword: &str) -> Vec<Round> {
        self.rounds
            .lock()
            .expect("annotation lock poisoned")
            .values()
            .filter(|r| r.task.keyword == keyword)
            .cloned()
            .collect()
    }

    /// Records one rater's picks and re-aggregates once the quorum is met.
    /// Returns the updated round.
    pub fn vote(&self, id: &str, rater: &str, selected: &[String]) -> Result<Round, VoteError> {
        let mut rounds = self.rounds.lock().expect("annotation lock poisoned");
        let round = rounds.get_mut(id).ok_or(VoteError::UnknownTask)?;
        if round.votes.raters.contains(rater) {
            return Err(VoteError::DuplicateRater(format!("rater `{rater}` already voted on `{id}`")));
        }
        let mut votes = round.votes.clone();
        record_vote(&round.task, &mut votes, rater, selected).map_err(|e| VoteError::Rejected(e.to_string()))?;
        let mut next = round.clone();
        next.votes = votes;
        if next.reached_quorum() {
            next.exemplars =
                Some(aggregate_top_percent(&next.votes, next.percentile, 1).map_err(|e| VoteError::Rejected(e.to_string()))?);
        }
        self.persist(&next).map_err(VoteError::Storage)?;
        *round = next.clone();
        Ok(next)
    }
}
