use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    InvertReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub result_id: Option<String>,
    pub error: Option<String>,
    /// Optimizer updates this job performed; zero when served from cache.
    pub iterations: usize,
}

/// Registry of jobs; statuses only move forward.
#[derive(Debug, Default)]
pub(crate) struct JobTable {
    jobs: HashMap<String, Job>,
    next: u64,
}

impl JobTable {
    pub fn create(&mut self, kind: JobKind) -> String {
        self.next += 1;
        let id = format!("job-{:06}", self.next);
        self.jobs.insert(
            id.clone(),
            Job {
                id: id.clone(),
                kind,
                status: JobStatus::Queued,
                progress: 0.0,
                result_id: None,
                error: None,
                iterations: 0,
            },
        );
        id
    }

    pub fn get(&self, id: &str) -> Option<&Job> {
        self.jobs.get(id)
    }

    /// Applies `f` if the job exists and the update does not move its status
    /// backwards or out of a finished state.
    pub fn update(&mut self, id: &str, f: impl FnOnce(&mut Job)) {
        let Some(job) = self.jobs.get_mut(id) else {
            return;
        };
        if job.status.is_finished() {
            return;
        }
        let mut next = job.clone();
        f(&mut next);
        if next.status >= job.status {
            *job = next;
        }
    }
}
