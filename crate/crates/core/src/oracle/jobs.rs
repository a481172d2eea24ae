//! Review and boxing jobs with leases.
//!
//! All mutations go through one mutex, so the store behaves as a serialized
//! single-writer state machine: `pending -> leased -> done`, with expired
//! leases falling back to `pending` and `done` terminal.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, ImageId};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Test clock advanced by hand.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Review,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JobResult {
    Review { contains: bool },
    Boxes { boxes: Vec<BoundingBox> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Leased { worker: String, deadline_ms: u64 },
    Done { worker: String, result: JobResult },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: u64,
    pub kind: JobKind,
    pub image_id: ImageId,
    pub iteration: u32,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JobError {
    #[error("unknown job {0}")]
    NotFound(u64),
    #[error("lease lost on job {0}")]
    LeaseLost(u64),
    #[error("job {job_id} is a {kind:?} job")]
    WrongKind { job_id: u64, kind: JobKind },
    #[error("image {0} has no positive review, cannot be boxed")]
    NotReviewedPositive(ImageId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubmitAck {
    Stored,
    /// Identical resubmission of an already stored result.
    Duplicate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCounts {
    pub pending: usize,
    pub leased: usize,
    pub done: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: u32,
    pub review: JobCounts,
    #[serde(rename = "box")]
    pub boxing: JobCounts,
}

#[derive(Default)]
struct Inner {
    jobs: BTreeMap<u64, Job>,
    next_id: u64,
    iteration: u32,
}

pub struct JobStore {
    inner: Mutex<Inner>,
    done: Condvar,
    clock: Arc<dyn Clock>,
    lease_timeout_ms: u64,
}

impl JobStore {
    pub fn new(clock: Arc<dyn Clock>, lease_timeout: Duration) -> Self {
        Self {
            inner: Mutex::new(Inner {
                next_id: 1,
                ..Default::default()
            }),
            done: Condvar::new(),
            clock,
            lease_timeout_ms: lease_timeout.as_millis() as u64,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn expire(inner: &mut Inner, now: u64) {
        for job in inner.jobs.values_mut() {
            if let JobState::Leased { deadline_ms, .. } = job.state {
                if now >= deadline_ms {
                    job.state = JobState::Pending;
                }
            }
        }
    }

    pub fn set_iteration(&self, iteration: u32) {
        self.lock().iteration = iteration;
    }

    /// Post one job per image. Box jobs require a finished positive review
    /// of the same image in this store.
    pub fn enqueue(&self, kind: JobKind, images: &[ImageId], iteration: u32) -> Result<Vec<u64>, JobError> {
        let mut inner = self.lock();
        if kind == JobKind::Box {
            for &img in images {
                let reviewed = inner.jobs.values().any(|j| {
                    j.image_id == img
                        && matches!(
                            &j.state,
                            JobState::Done {
                                result: JobResult::Review { contains: true },
                                ..
                            }
                        )
                });
                if !reviewed {
                    return Err(JobError::NotReviewedPositive(img));
                }
            }
        }
        let mut ids = Vec::with_capacity(images.len());
        for &image_id in images {
            let job_id = inner.next_id;
            inner.next_id += 1;
            inner.jobs.insert(
                job_id,
                Job {
                    job_id,
                    kind,
                    image_id,
                    iteration,
                    state: JobState::Pending,
                },
            );
            ids.push(job_id);
        }
        Ok(ids)
    }

    /// Lease the oldest pending job of `kind`. A worker already holding a live
    /// lease of that kind gets the same job back.
    pub fn lease(&self, kind: JobKind, worker: &str) -> Option<Job> {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        Self::expire(&mut inner, now);
        if let Some(job) = inner
            .jobs
            .values()
            .find(|j| j.kind == kind && matches!(&j.state, JobState::Leased { worker: w, .. } if w == worker))
        {
            return Some(job.clone());
        }
        let deadline_ms = now + self.lease_timeout_ms;
        let job = inner
            .jobs
            .values_mut()
            .find(|j| j.kind == kind && j.state == JobState::Pending)?;
        job.state = JobState::Leased {
            worker: worker.to_string(),
            deadline_ms,
        };
        Some(job.clone())
    }

    /// Store a result for a job leased to `worker`. Resubmitting the stored
    /// result is acknowledged as a duplicate; anything else on a job this
    /// worker does not hold is a lost lease.
    pub fn submit(&self, job_id: u64, worker: &str, result: JobResult) -> Result<SubmitAck, JobError> {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        let job = inner.jobs.get_mut(&job_id).ok_or(JobError::NotFound(job_id))?;
        let kind_ok = matches!(
            (job.kind, &result),
            (JobKind::Review, JobResult::Review { .. }) | (JobKind::Box, JobResult::Boxes { .. })
        );
        if !kind_ok {
            return Err(JobError::WrongKind { job_id, kind: job.kind });
        }
        match &job.state {
            JobState::Done { worker: w, result: r } => {
                if w == worker && *r == result {
                    Ok(SubmitAck::Duplicate)
                } else {
                    Err(JobError::LeaseLost(job_id))
                }
            }
            JobState::Leased { worker: w, deadline_ms } if w == worker && now < *deadline_ms => {
                job.state = JobState::Done {
                    worker: worker.to_string(),
                    result,
                };
                self.done.notify_all();
                Ok(SubmitAck::Stored)
            }
            _ => Err(JobError::LeaseLost(job_id)),
        }
    }

    pub fn job(&self, job_id: u64) -> Option<Job> {
        self.lock().jobs.get(&job_id).cloned()
    }

    pub fn progress(&self) -> Progress {
        let now = self.clock.now_ms();
        let inner = self.lock();
        let mut p = Progress {
            iteration: inner.iteration,
            ..Default::default()
        };
        for job in inner.jobs.values() {
            let counts = match job.kind {
                JobKind::Review => &mut p.review,
                JobKind::Box => &mut p.boxing,
            };
            match &job.state {
                JobState::Pending => counts.pending += 1,
                JobState::Leased { deadline_ms, .. } if now >= *deadline_ms => counts.pending += 1,
                JobState::Leased { .. } => counts.leased += 1,
                JobState::Done { .. } => counts.done += 1,
            }
        }
        p
    }

    /// Block until every listed job is done; results come back in the same
    /// order. `poll` bounds each wait so clock-driven expiry stays visible.
    pub fn wait_all(&self, job_ids: &[u64], poll: Duration) -> Vec<JobResult> {
        let mut inner = self.lock();
        loop {
            let results: Option<Vec<JobResult>> = job_ids
                .iter()
                .map(|id| match inner.jobs.get(id).map(|j| &j.state) {
                    Some(JobState::Done { result, .. }) => Some(result.clone()),
                    _ => None,
                })
                .collect();
            if let Some(r) = results {
                return r;
            }
            inner = self.done.wait_timeout(inner, poll).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
}
