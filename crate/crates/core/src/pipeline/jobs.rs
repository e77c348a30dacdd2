//! FIFO job queue with a fixed worker pool, cancellation and an append-only
//! event journal per job.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{EventSink, ProgressUpdate};
use crate::error::{Error, Result};
use crate::trainer::{ProgressSink, TrainEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    AirGen,
    AirAug,
    Train,
    CrossValidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed | JobStatus::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub stage: String,
    pub progress: f64,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub error: Option<String>,
    /// Job-specific output, e.g. the produced dataset or model id.
    pub result: Option<serde_json::Value>,
}

/// One line of a job's event journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub job_id: String,
    pub stage: String,
    pub progress: f64,
    pub message: String,
    pub ts: DateTime<Utc>,
    /// Present on the final event only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<JobStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<serde_json::Value>,
}

impl JobEvent {
    pub fn is_terminal(&self) -> bool {
        self.status.is_some_and(JobStatus::is_terminal)
    }
}

struct Journal {
    events: Vec<JobEvent>,
    log: Option<File>,
}

struct JobEntry {
    state: Mutex<JobState>,
    journal: Mutex<Journal>,
    changed: Condvar,
    cancel: AtomicBool,
    resource: Option<String>,
}

impl JobEntry {
    fn push(&self, mut event: JobEvent) {
        let mut state = self.state.lock().unwrap();
        if state.status.is_terminal() && !event.is_terminal() {
            return;
        }
        if event.progress < state.progress {
            event.progress = state.progress;
        }
        state.progress = event.progress;
        state.stage = event.stage.clone();
        let mut journal = self.journal.lock().unwrap();
        if let Some(log) = journal.log.as_mut() {
            if let Ok(line) = serde_json::to_string(&event) {
                let _ = writeln!(log, "{line}").and_then(|_| log.flush());
            }
        }
        journal.events.push(event);
        drop(journal);
        drop(state);
        self.changed.notify_all();
    }

    fn finish(&self, status: JobStatus, message: String, error: Option<String>, result: Option<serde_json::Value>) {
        let (job_id, stage, progress) = {
            let mut state = self.state.lock().unwrap();
            if state.status.is_terminal() {
                return;
            }
            state.finished_at = Some(Utc::now());
            state.error = error;
            state.result = result;
            if status == JobStatus::Succeeded {
                state.progress = 1.0;
            }
            state.status = status;
            (state.job_id.clone(), state.stage.clone(), state.progress)
        };
        self.push(JobEvent {
            job_id,
            stage,
            progress,
            message,
            ts: Utc::now(),
            status: Some(status),
            data: None,
        });
    }
}

/// Handle given to running work: event emission and cancellation.
pub struct JobContext {
    entry: Arc<JobEntry>,
    job_id: String,
    train_total: AtomicUsize,
    train_done: AtomicUsize,
}

impl JobContext {
    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn cancel_flag(&self) -> &AtomicBool {
        &self.entry.cancel
    }

    pub fn is_cancelled(&self) -> bool {
        self.entry.cancel.load(Ordering::SeqCst)
    }

    pub fn emit(&self, stage: &str, progress: f64, message: impl Into<String>, data: Option<serde_json::Value>) {
        self.entry.push(JobEvent {
            job_id: self.job_id.clone(),
            stage: stage.to_string(),
            // `+ 0.0` normalises -0.0.
            progress: progress.clamp(0.0, 1.0) + 0.0,
            message: message.into(),
            ts: Utc::now(),
            status: None,
            data,
        });
    }

    /// Total epochs across all folds, for training progress.
    pub fn set_train_total(&self, epochs: usize) {
        self.train_total.store(epochs, Ordering::SeqCst);
    }
}

impl EventSink for JobContext {
    fn emit(&self, update: ProgressUpdate) {
        JobContext::emit(self, update.stage.as_str(), update.progress, update.message, None);
    }
}

impl ProgressSink for JobContext {
    fn emit(&self, event: TrainEvent) {
        let done = self.train_done.fetch_add(1, Ordering::SeqCst) + 1;
        let total = self.train_total.load(Ordering::SeqCst).max(done);
        let message = match event.fold {
            Some(f) => format!("fold {} epoch {}/{}", f + 1, event.epoch, event.epochs),
            None => format!("epoch {}/{}", event.epoch, event.epochs),
        };
        JobContext::emit(
            self,
            "train",
            0.95 * done as f64 / total as f64,
            message,
            serde_json::to_value(&event).ok(),
        );
    }
}

pub type Work = Box<dyn FnOnce(&JobContext) -> Result<serde_json::Value> + Send>;

struct Shared {
    queue: Mutex<VecDeque<(Arc<JobEntry>, Work)>>,
    available: Condvar,
    jobs: Mutex<HashMap<String, Arc<JobEntry>>>,
    events_dir: Option<PathBuf>,
    shutdown: AtomicBool,
    counter: AtomicU64,
}

#[derive(Clone)]
pub struct JobManager {
    shared: Arc<Shared>,
    _guard: Arc<ShutdownGuard>,
}

/// Stops the workers once the last manager handle is dropped.
struct ShutdownGuard(Arc<Shared>);

impl Drop for ShutdownGuard {
    fn drop(&mut self) {
        self.0.shutdown.store(true, Ordering::SeqCst);
        self.0.available.notify_all();
    }
}

impl JobManager {
    /// Starts `workers` executor threads. With `events_dir`, each job's
    /// events are also appended to `<events_dir>/<job_id>.events.jsonl`.
    pub fn new(workers: usize, events_dir: Option<PathBuf>) -> Self {
        let shared = Arc::new(Shared {
            queue: Mutex::new(VecDeque::new()),
            available: Condvar::new(),
            jobs: Mutex::new(HashMap::new()),
            events_dir,
            shutdown: AtomicBool::new(false),
            counter: AtomicU64::new(0),
        });
        for _ in 0..workers.max(1) {
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || worker(&shared));
        }
        JobManager {
            _guard: Arc::new(ShutdownGuard(Arc::clone(&shared))),
            shared,
        }
    }

    pub fn submit(&self, kind: JobKind, work: Work) -> Result<String> {
        self.submit_for(kind, None, work)
    }

    /// Submits work that holds `resource` (a dataset id) until it finishes.
    pub fn submit_for(&self, kind: JobKind, resource: Option<String>, work: Work) -> Result<String> {
        let n = self.shared.counter.fetch_add(1, Ordering::SeqCst);
        let nonce: u64 = rand::random();
        let job_id = format!("job-{n:04}-{nonce:016x}");
        let log = match &self.shared.events_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = events_path(dir, &job_id);
                Some(OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?)
            }
            None => None,
        };
        let entry = Arc::new(JobEntry {
            state: Mutex::new(JobState {
                job_id: job_id.clone(),
                kind,
                status: JobStatus::Queued,
                stage: "queued".into(),
                progress: 0.0,
                started_at: None,
                finished_at: None,
                error: None,
                result: None,
            }),
            journal: Mutex::new(Journal { events: Vec::new(), log }),
            changed: Condvar::new(),
            cancel: AtomicBool::new(false),
            resource,
        });
        self.shared.jobs.lock().unwrap().insert(job_id.clone(), Arc::clone(&entry));
        self.shared.queue.lock().unwrap().push_back((entry, work));
        self.shared.available.notify_one();
        Ok(job_id)
    }

    fn entry(&self, job_id: &str) -> Result<Arc<JobEntry>> {
        self.shared
            .jobs
            .lock()
            .unwrap()
            .get(job_id)
            .cloned()
            .ok_or_else(|| Error::UnknownJob(job_id.to_string()))
    }

    pub fn status(&self, job_id: &str) -> Result<JobState> {
        Ok(self.entry(job_id)?.state.lock().unwrap().clone())
    }

    /// Queued jobs are cancelled immediately; running jobs stop at the next
    /// item boundary. Terminal jobs are returned unchanged.
    pub fn cancel(&self, job_id: &str) -> Result<JobState> {
        let entry = self.entry(job_id)?;
        let status = entry.state.lock().unwrap().status;
        match status {
            JobStatus::Queued => {
                entry.cancel.store(true, Ordering::SeqCst);
                entry.finish(JobStatus::Cancelled, "cancelled before start".into(), None, None);
            }
            JobStatus::Running => entry.cancel.store(true, Ordering::SeqCst),
            _ => {}
        }
        let state = entry.state.lock().unwrap().clone();
        Ok(state)
    }

    /// Whether a non-terminal job holds `resource`.
    pub fn is_busy(&self, resource: &str) -> bool {
        self.shared.jobs.lock().unwrap().values().any(|e| {
            e.resource.as_deref() == Some(resource) && !e.state.lock().unwrap().status.is_terminal()
        })
    }

    /// Events from index `from` onward, and whether the job has finished.
    pub fn events(&self, job_id: &str, from: usize) -> Result<(Vec<JobEvent>, bool)> {
        let entry = self.entry(job_id)?;
        let journal = entry.journal.lock().unwrap();
        let events = journal.events.get(from..).map(<[JobEvent]>::to_vec).unwrap_or_default();
        let done = journal.events.last().is_some_and(JobEvent::is_terminal);
        Ok((events, done))
    }

    /// Like [`events`](Self::events) but blocks up to `timeout` for new events.
    pub fn wait_events(&self, job_id: &str, from: usize, timeout: Duration) -> Result<(Vec<JobEvent>, bool)> {
        let entry = self.entry(job_id)?;
        let deadline = Instant::now() + timeout;
        let mut journal = entry.journal.lock().unwrap();
        loop {
            let done = journal.events.last().is_some_and(JobEvent::is_terminal);
            if journal.events.len() > from || done {
                let events = journal.events.get(from..).map(<[JobEvent]>::to_vec).unwrap_or_default();
                return Ok((events, done));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok((Vec::new(), false));
            }
            journal = entry.changed.wait_timeout(journal, deadline - now).unwrap().0;
        }
    }

    /// Blocks until the job is terminal or `timeout` elapses.
    pub fn wait(&self, job_id: &str, timeout: Duration) -> Result<JobState> {
        let entry = self.entry(job_id)?;
        let deadline = Instant::now() + timeout;
        let mut journal = entry.journal.lock().unwrap();
        loop {
            if journal.events.last().is_some_and(JobEvent::is_terminal) {
                drop(journal);
                return self.status(job_id);
            }
            let now = Instant::now();
            if now >= deadline {
                drop(journal);
                return self.status(job_id);
            }
            journal = entry.changed.wait_timeout(journal, deadline - now).unwrap().0;
        }
    }
}

pub fn events_path(dir: &Path, job_id: &str) -> PathBuf {
    dir.join(format!("{job_id}.events.jsonl"))
}

fn worker(shared: &Shared) {
    loop {
        let (entry, work) = {
            let mut queue = shared.queue.lock().unwrap();
            loop {
                if let Some(item) = queue.pop_front() {
                    break item;
                }
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                queue = shared.available.wait_timeout(queue, Duration::from_millis(500)).unwrap().0;
            }
        };
        let job_id = {
            let mut state = entry.state.lock().unwrap();
            if state.status != JobStatus::Queued {
                continue;
            }
            state.status = JobStatus::Running;
            state.started_at = Some(Utc::now());
            state.job_id.clone()
        };
        let ctx = JobContext {
            entry: Arc::clone(&entry),
            job_id,
            train_total: AtomicUsize::new(0),
            train_done: AtomicUsize::new(0),
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| work(&ctx)));
        let stage = entry.state.lock().unwrap().stage.clone();
        match outcome {
            Ok(Ok(result)) => entry.finish(JobStatus::Succeeded, "succeeded".into(), None, Some(result)),
            Ok(Err(Error::Cancelled)) => entry.finish(JobStatus::Cancelled, "cancelled".into(), None, None),
            Ok(Err(e)) if entry.cancel.load(Ordering::SeqCst) => {
                entry.finish(JobStatus::Cancelled, format!("cancelled ({e})"), None, None)
            }
            Ok(Err(e)) => {
                let msg = format!("stage {stage}: {e}");
                entry.finish(JobStatus::Failed, msg.clone(), Some(msg), None)
            }
            Err(_) => {
                let msg = format!("stage {stage}: internal error (worker panicked)");
                entry.finish(JobStatus::Failed, msg.clone(), Some(msg), None)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::mpsc;

    use super::*;

    #[test]
    fn success_path_and_terminal_event() {
        let jm = JobManager::new(1, None);
        let id = jm
            .submit(
                JobKind::Train,
                Box::new(|ctx| {
                    ctx.emit("train", 0.5, "half", None);
                    Ok(serde_json::json!({"model_id": "m-1"}))
                }),
            )
            .unwrap();
        let state = jm.wait(&id, Duration::from_secs(10)).unwrap();
        assert_eq!(state.status, JobStatus::Succeeded);
        assert_eq!(state.progress, 1.0);
        assert_eq!(state.result.unwrap()["model_id"], "m-1");
        let (events, done) = jm.events(&id, 0).unwrap();
        assert!(done);
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].status, Some(JobStatus::Succeeded));
    }

    #[test]
    fn queued_job_cancels_without_running() {
        let jm = JobManager::new(1, None);
        let (tx, rx) = mpsc::channel::<()>();
        let blocker = jm
            .submit(
                JobKind::AirGen,
                Box::new(move |_| {
                    rx.recv().ok();
                    Ok(serde_json::Value::Null)
                }),
            )
            .unwrap();
        let ran = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&ran);
        let queued = jm
            .submit(
                JobKind::AirGen,
                Box::new(move |_| {
                    flag.store(true, Ordering::SeqCst);
                    Ok(serde_json::Value::Null)
                }),
            )
            .unwrap();
        let s = jm.status(&queued).unwrap();
        assert_eq!((s.status, s.progress), (JobStatus::Queued, 0.0));
        assert_eq!(jm.cancel(&queued).unwrap().status, JobStatus::Cancelled);
        tx.send(()).unwrap();
        jm.wait(&blocker, Duration::from_secs(10)).unwrap();
        std::thread::sleep(Duration::from_millis(50));
        assert!(!ran.load(Ordering::SeqCst));
        assert_eq!(jm.cancel(&queued).unwrap().status, JobStatus::Cancelled);
    }

    #[test]
    fn running_job_cancels_at_boundary() {
        let jm = JobManager::new(2, None);
        let id = jm
            .submit(
                JobKind::AirGen,
                Box::new(|ctx| {
                    for i in 0..1000 {
                        if ctx.is_cancelled() {
                            return Err(Error::Cancelled);
                        }
                        ctx.emit("generate", i as f64 / 1000.0, "item", None);
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Ok(serde_json::Value::Null)
                }),
            )
            .unwrap();
        jm.wait_events(&id, 0, Duration::from_secs(5)).unwrap();
        jm.cancel(&id).unwrap();
        let s = jm.wait(&id, Duration::from_secs(10)).unwrap();
        assert_eq!(s.status, JobStatus::Cancelled);
        assert!(s.progress < 1.0);
    }

    #[test]
    fn failure_carries_stage_context() {
        let jm = JobManager::new(1, None);
        let id = jm
            .submit(
                JobKind::AirGen,
                Box::new(|ctx| {
                    ctx.emit("generate", 0.1, "started", None);
                    Err(Error::backend("http://x", Some(500), "boom"))
                }),
            )
            .unwrap();
        let s = jm.wait(&id, Duration::from_secs(10)).unwrap();
        assert_eq!(s.status, JobStatus::Failed);
        assert!(s.error.unwrap().starts_with("stage generate:"));
    }

    #[test]
    fn unknown_job() {
        let jm = JobManager::new(1, None);
        assert!(matches!(jm.status("nope"), Err(Error::UnknownJob(_))));
    }

    #[test]
    fn events_journal_file_and_busy_resource() {
        let dir = tempfile::tempdir().unwrap();
        let jm = JobManager::new(1, Some(dir.path().to_path_buf()));
        let (tx, rx) = mpsc::channel::<()>();
        let id = jm
            .submit_for(
                JobKind::AirGen,
                Some("ds-1".into()),
                Box::new(move |ctx| {
                    ctx.emit("prompts", 0.0, "go", None);
                    rx.recv().ok();
                    Ok(serde_json::Value::Null)
                }),
            )
            .unwrap();
        assert!(jm.is_busy("ds-1"));
        assert!(!jm.is_busy("ds-2"));
        tx.send(()).unwrap();
        jm.wait(&id, Duration::from_secs(10)).unwrap();
        assert!(!jm.is_busy("ds-1"));
        let text = std::fs::read_to_string(events_path(dir.path(), &id)).unwrap();
        let lines: Vec<JobEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].is_terminal());
    }
}
