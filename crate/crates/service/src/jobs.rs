//! Generation jobs and the FIFO queue the workers drain.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use wheelgen_core::{FeedbackDelta, GenerationRequest};

use crate::fsutil::{read_all, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub queued_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    /// Normalized request, seed included.
    pub request: GenerationRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    /// Image URLs, once done.
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timings: Timings,
}

impl Job {
    pub fn new(request: GenerationRequest, session_id: Option<String>, parent: Option<(String, FeedbackDelta)>) -> Self {
        let (parent_id, feedback) = parent.unzip();
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            state: JobState::Queued,
            session_id,
            request,
            parent_id,
            feedback,
            record_id: None,
            outputs: Vec::new(),
            error: None,
            timings: Timings {
                queued_at: Utc::now(),
                started_at: None,
                finished_at: None,
                run_seconds: None,
            },
        }
    }

    fn advance(&mut self, next: JobState) {
        assert!(self.state.can_become(next), "job {} cannot go from {:?} to {:?}", self.id, self.state, next);
        let now = Utc::now();
        match next {
            JobState::Running => self.timings.started_at = Some(now),
            _ => {
                self.timings.finished_at = Some(now);
                if let Some(s) = self.timings.started_at {
                    self.timings.run_seconds = Some((now - s).num_milliseconds() as f64 / 1000.0);
                }
            }
        }
        self.state = next;
    }
}

pub type Outcome = std::result::Result<(String, Vec<String>), String>;

#[derive(Default)]
struct Queue {
    pending: VecDeque<String>,
    closed: bool,
}

/// All jobs, mirrored to `<dir>/<id>.json`, plus the pending queue.
pub struct JobBoard {
    dir: PathBuf,
    jobs: Mutex<BTreeMap<String, Job>>,
    queue: Mutex<Queue>,
    ready: Condvar,
}

impl JobBoard {
    /// Loads persisted jobs. Queued jobs go back on the queue in submission
    /// order; jobs caught running by a shutdown are failed.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        let mut loaded: Vec<Job> = read_all(&dir).with_context(|| dir.display().to_string())?;
        loaded.sort_by(|a, b| a.timings.queued_at.cmp(&b.timings.queued_at).then_with(|| a.id.cmp(&b.id)));
        let mut queue = Queue::default();
        let mut jobs = BTreeMap::new();
        for mut job in loaded {
            match job.state {
                JobState::Queued => queue.pending.push_back(job.id.clone()),
                JobState::Running => {
                    job.advance(JobState::Failed);
                    job.error = Some("interrupted by a service restart".into());
                    write_json(&dir.join(format!("{}.json", job.id)), &job)?;
                }
                _ => {}
            }
            jobs.insert(job.id.clone(), job);
        }
        Ok(Self {
            dir,
            jobs: Mutex::new(jobs),
            queue: Mutex::new(queue),
            ready: Condvar::new(),
        })
    }

    fn persist(&self, job: &Job) -> Result<()> {
        let path = self.dir.join(format!("{}.json", job.id));
        write_json(&path, job).with_context(|| path.display().to_string())
    }

    pub fn submit(&self, job: Job) -> Result<Job> {
        self.persist(&job)?;
        self.jobs.lock().expect("job lock poisoned").insert(job.id.clone(), job.clone());
        self.queue.lock().expect("queue lock poisoned").pending.push_back(job.id.clone());
        self.ready.notify_one();
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job lock poisoned").get(id).cloned()
    }

    pub fn for_session(&self, session: &str) -> Vec<Job> {
        let mut out: Vec<Job> = self
            .jobs
            .lock()
            .expect("job lock poisoned")
            .values()
            .filter(|j| j.session_id.as_deref() == Some(session))
            .cloned()
            .collect();
        out.sort_by_key(|j| j.timings.queued_at);
        out
    }

    pub fn pending(&self) -> usize {
        self.queue.lock().expect("queue lock poisoned").pending.len()
    }

    /// Blocks until a job is available and marks it running; `None` once closed.
    pub fn next(&self) -> Option<Job> {
        let mut q = self.queue.lock().expect("queue lock poisoned");
        loop {
            if q.closed {
                return None;
            }
            if let Some(id) = q.pending.pop_front() {
                drop(q);
                return Some(self.transition(&id, JobState::Running, |_| {}));
            }
            q = self.ready.wait(q).expect("queue lock poisoned");
        }
    }

    pub fn finish(&self, id: &str, outcome: Outcome) -> Job {
        match outcome {
            Ok((record_id, outputs)) => self.transition(id, JobState::Done, |j| {
                j.record_id = Some(record_id);
                j.outputs = outputs;
            }),
            Err(e) => self.transition(id, JobState::Failed, |j| j.error = Some(e)),
        }
    }

    fn transition(&self, id: &str, next: JobState, edit: impl FnOnce(&mut Job)) -> Job {
        let mut jobs = self.jobs.lock().expect("job lock poisoned");
        let job = jobs.get_mut(id).expect("queued job is on the board");
        job.advance(next);
        edit(job);
        if let Err(e) = self.persist(job) {
            tracing::error!("persisting job {id}: {e:#}");
        }
        job.clone()
    }

    /// Wakes every waiting worker; `next` returns `None` from then on.
    pub fn close(&self) {
        self.queue.lock().expect("queue lock poisoned").closed = true;
        self.ready.notify_all();
    }
}
