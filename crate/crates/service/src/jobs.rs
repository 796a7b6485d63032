//! Asynchronous transfer jobs run by a fixed pool of worker threads.

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use maskblend_core::pipeline::{compose, JobRequest, Workspace};
use maskblend_core::progress::Progress;

use crate::Shared;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub stage: Option<String>,
    pub iteration: usize,
    pub total: usize,
    /// Progress reports received so far; never decreases.
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub stage: Option<String>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub request: JobRequest<String>,
    pub state: JobState,
    pub progress: JobProgress,
    /// Image id of the rendered result.
    pub result: Option<String>,
    pub error: Option<JobError>,
}

pub struct JobTable {
    jobs: Mutex<HashMap<String, Job>>,
    queue: Mutex<Option<mpsc::Sender<String>>>,
}

impl JobTable {
    pub fn new() -> Self {
        Self {
            jobs: Mutex::new(HashMap::new()),
            queue: Mutex::new(None),
        }
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// Registers and enqueues a job, or returns `None` when `limit` jobs are
    /// already active.
    pub fn submit(&self, request: JobRequest<String>, limit: usize) -> Option<String> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        {
            let mut jobs = self.jobs.lock().unwrap();
            if jobs.values().filter(|j| j.state < JobState::Done).count() >= limit {
                return None;
            }
            jobs.insert(
                id.clone(),
                Job {
                    id: id.clone(),
                    request,
                    state: JobState::Queued,
                    progress: JobProgress::default(),
                    result: None,
                    error: None,
                },
            );
        }
        if let Some(tx) = self.queue.lock().unwrap().as_ref() {
            tx.send(id.clone()).expect("worker pool alive");
        }
        Some(id)
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.jobs.lock().unwrap().get_mut(id) {
            f(j);
        }
    }
}

struct JobProgressSink<'a> {
    table: &'a JobTable,
    id: &'a str,
}

impl Progress for JobProgressSink<'_> {
    fn report(&self, stage: &str, iteration: usize, total: usize) {
        self.table.update(self.id, |j| {
            j.progress.stage = Some(stage.to_string());
            j.progress.iteration = iteration;
            j.progress.total = total;
            j.progress.steps += 1;
        });
    }
}

fn run_job(shared: &Shared, id: &str) {
    let Some(job) = shared.jobs.get(id) else { return };
    shared.jobs.update(id, |j| j.state = JobState::Running);
    let backend = &shared.backend;
    let num_classes = backend.segmenter.num_classes();
    let outcome = (|| {
        let req = job.request.resolve(
            num_classes,
            |i| shared.store.load_image(i),
            |m| shared.store.load_mask(m, num_classes),
        )?;
        let ws = Workspace::create(shared.store.job_dir(id))?;
        let sink = JobProgressSink { table: &shared.jobs, id };
        let out = compose(backend, &req, &shared.cache, Some(&ws), &sink)?;
        shared.store.put_image(&out.image.encode_png()?)
    })();
    shared.jobs.update(id, |j| match outcome {
        Ok(image_id) => {
            j.state = JobState::Done;
            j.result = Some(image_id);
        }
        Err(e) => {
            log::warn!("job {id} failed: {e}");
            j.state = JobState::Failed;
            j.error = Some(JobError {
                stage: e.stage().map(str::to_string),
                message: e.to_string(),
            });
        }
    });
}

/// Starts `workers` threads pulling job ids from the queue.
pub fn start_workers(shared: Arc<Shared>, workers: usize) {
    let (tx, rx) = mpsc::channel::<String>();
    *shared.jobs.queue.lock().unwrap() = Some(tx);
    let rx = Arc::new(Mutex::new(rx));
    for n in 0..workers.max(1) {
        let rx = rx.clone();
        let shared = shared.clone();
        std::thread::Builder::new()
            .name(format!("maskblend-worker-{n}"))
            .spawn(move || loop {
                let next = rx.lock().unwrap().recv();
                match next {
                    Ok(id) => run_job(&shared, &id),
                    Err(_) => break,
                }
            })
            .expect("spawn worker thread");
    }
}
