//! Asynchronous save queue with stochastic exponential backoff.
//!
//! `enqueue` only takes a short lock and pushes onto the session's lane. A
//! single worker thread drains lanes into a [`RecordSink`]. A failed write
//! stays at the head of its lane, so later records of that session wait
//! behind it and per-session order is preserved. Other sessions keep
//! flowing. After `max_attempts` failures the record goes to the dead-letter
//! sink and its session is flagged.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::log::LogFile;
use super::record::{Record, SessionId};
use crate::rng::{Rng, RngStream};

/// Somewhere records can be written.
pub trait RecordSink: Send {
    fn append(&mut self, record: &Record) -> io::Result<()>;
}

impl RecordSink for LogFile {
    fn append(&mut self, record: &Record) -> io::Result<()> {
        LogFile::append(self, record)
    }
}

/// In-memory sink; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<Record>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<Record> {
        self.records.lock().unwrap().clone()
    }
}

impl RecordSink for MemorySink {
    fn append(&mut self, record: &Record) -> io::Result<()> {
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }
}

/// How a [`FaultySink`] decides to fail.
#[derive(Debug, Clone)]
pub enum FaultPlan {
    /// Each write fails independently with probability `p`.
    Random { p: f64, seed: u64 },
    /// The first `n` attempts at every record fail.
    FailFirst(u32),
}

/// Wraps a sink and injects write failures. Failed writes leave no trace in
/// the inner sink.
pub struct FaultySink<S> {
    inner: S,
    plan: FaultPlan,
    stream: RngStream,
    consecutive: u32,
}

impl<S: RecordSink> FaultySink<S> {
    pub fn new(inner: S, plan: FaultPlan) -> Self {
        let seed = match plan {
            FaultPlan::Random { seed, .. } => seed,
            FaultPlan::FailFirst(_) => 0,
        };
        Self {
            inner,
            plan,
            stream: Rng::new(seed).split(0xFA17).stream(),
            consecutive: 0,
        }
    }
}

impl<S: RecordSink> RecordSink for FaultySink<S> {
    fn append(&mut self, record: &Record) -> io::Result<()> {
        let fail = match self.plan {
            FaultPlan::Random { p, .. } => self.stream.bernoulli(p),
            FaultPlan::FailFirst(n) => self.consecutive < n,
        };
        if fail {
            self.consecutive += 1;
            return Err(io::Error::other("injected save failure"));
        }
        self.consecutive = 0;
        self.inner.append(record)
    }
}

/// Delay before retry number `attempt + 1`: uniform over
/// `[base·2^attempt·(1−jitter), base·2^attempt·(1+jitter)]` via `u ∈ [0, 1)`,
/// then capped at `max_ms`.
pub fn backoff_delay(attempt: u32, base_ms: f64, jitter: f64, max_ms: f64, u: f64) -> f64 {
    let (lo, hi) = backoff_bounds(attempt, base_ms, jitter);
    (lo + u * (hi - lo)).min(max_ms)
}

/// Uncapped envelope for `attempt`.
pub fn backoff_bounds(attempt: u32, base_ms: f64, jitter: f64) -> (f64, f64) {
    let centre = base_ms * 2f64.powi(attempt.min(1023) as i32);
    (centre * (1.0 - jitter), centre * (1.0 + jitter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackoffConfig {
    pub base_ms: f64,
    pub jitter: f64,
    pub max_delay_ms: f64,
    pub max_attempts: u32,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        Self {
            base_ms: 100.0,
            jitter: 0.5,
            max_delay_ms: 30_000.0,
            max_attempts: 8,
        }
    }
}

impl BackoffConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_ms > 0.0 && self.base_ms.is_finite()) {
            return Err(format!("base_ms must be positive, got {}", self.base_ms));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(format!("jitter must be in [0, 1), got {}", self.jitter));
        }
        if self.max_delay_ms.is_nan() || self.max_delay_ms < self.base_ms {
            return Err("max_delay_ms must be at least base_ms".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn sample(&self, attempt: u32, stream: &mut RngStream) -> f64 {
        backoff_delay(
            attempt,
            self.base_ms,
            self.jitter,
            self.max_delay_ms,
            stream.next_f64(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    pub backoff: BackoffConfig,
    /// Pending records across all sessions before enqueue refuses.
    pub capacity: usize,
    /// Seed of the backoff jitter stream.
    pub seed: u64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            backoff: BackoffConfig::default(),
            capacity: 65_536,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaveError {
    /// The transport should pause the participant in a "saving" state.
    #[error("save queue full ({pending} pending, capacity {capacity})")]
    Backpressure { pending: usize, capacity: usize },
    #[error("save queue is shut down")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaveAck {
    /// Global enqueue order.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaveTask {
    pub record: Record,
    pub attempts: u32,
    /// Queue-clock ms at which the next attempt may run.
    pub next_attempt_ms: f64,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySample {
    /// Zero-based index of the failed attempt.
    pub attempt: u32,
    pub delay_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueStats {
    pub enqueued: u64,
    pub written: u64,
    pub failed_attempts: u64,
    pub dead_lettered: u64,
    /// Attempts needed by each written record, in write order.
    pub attempts_per_write: Vec<u32>,
    pub delays: Vec<DelaySample>,
    pub rejected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Running,
    Drain,
    Abort,
}

struct State {
    lanes: HashMap<SessionId, VecDeque<SaveTask>>,
    pending: usize,
    next_seq: u64,
    mode: Mode,
    stats: QueueStats,
    flagged: HashSet<SessionId>,
    dead: Vec<Record>,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
    idle: Condvar,
    epoch: Instant,
    capacity: usize,
}

impl Shared {
    fn now_ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3
    }
}

pub struct SaveQueue {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

impl SaveQueue {
    /// Starts the worker. `dead_letter` receives records that exhausted
    /// their attempts.
    pub fn start(
        config: QueueConfig,
        sink: Box<dyn RecordSink>,
        dead_letter: Box<dyn RecordSink>,
    ) -> Result<Self, String> {
        config.backoff.validate()?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                lanes: HashMap::new(),
                pending: 0,
                next_seq: 0,
                mode: Mode::Running,
                stats: QueueStats::default(),
                flagged: HashSet::new(),
                dead: Vec::new(),
            }),
            wake: Condvar::new(),
            idle: Condvar::new(),
            epoch: Instant::now(),
            capacity: config.capacity.max(1),
        });
        let worker_shared = Arc::clone(&shared);
        let worker = std::thread::Builder::new()
            .name("save-queue".into())
            .spawn(move || worker_loop(worker_shared, config, sink, dead_letter))
            .map_err(|e| e.to_string())?;
        Ok(Self {
            shared,
            worker: Some(worker),
        })
    }

    /// Queues a record. Never waits for I/O.
    pub fn enqueue(&self, record: Record) -> Result<SaveAck, SaveError> {
        let mut st = self.shared.state.lock().unwrap();
        if st.mode != Mode::Running {
            return Err(SaveError::Closed);
        }
        if st.pending >= self.shared.capacity {
            st.stats.rejected += 1;
            return Err(SaveError::Backpressure {
                pending: st.pending,
                capacity: self.shared.capacity,
            });
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.pending += 1;
        st.stats.enqueued += 1;
        let task = SaveTask {
            next_attempt_ms: self.shared.now_ms(),
            record,
            attempts: 0,
            seq,
        };
        st.lanes
            .entry(task.record.session())
            .or_default()
            .push_back(task);
        drop(st);
        self.shared.wake.notify_one();
        Ok(SaveAck { seq })
    }

    pub fn pending(&self) -> usize {
        self.shared.state.lock().unwrap().pending
    }

    pub fn stats(&self) -> QueueStats {
        self.shared.state.lock().unwrap().stats.clone()
    }

    pub fn flagged_sessions(&self) -> Vec<SessionId> {
        let mut v: Vec<_> = self
            .shared
            .state
            .lock()
            .unwrap()
            .flagged
            .iter()
            .copied()
            .collect();
        v.sort();
        v
    }

    pub fn dead_letters(&self) -> Vec<Record> {
        self.shared.state.lock().unwrap().dead.clone()
    }

    /// Blocks until every queued record is written or dead-lettered, or the
    /// timeout passes. Returns whether the queue drained.
    pub fn flush(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock().unwrap();
        while st.pending > 0 {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self.shared.idle.wait_timeout(st, deadline - now).unwrap().0;
        }
        true
    }

    /// Drains the queue and stops the worker.
    pub fn shutdown(mut self) -> QueueStats {
        self.stop(Mode::Drain);
        self.stats()
    }

    /// Stops the worker immediately, dropping anything still queued. Used to
    /// simulate a crash.
    pub fn abort(mut self) -> QueueStats {
        self.stop(Mode::Abort);
        self.stats()
    }

    fn stop(&mut self, mode: Mode) {
        {
            let mut st = self.shared.state.lock().unwrap();
            if st.mode == Mode::Running {
                st.mode = mode;
            }
        }
        self.shared.wake.notify_all();
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SaveQueue {
    fn drop(&mut self) {
        self.stop(Mode::Drain);
    }
}

fn worker_loop(
    shared: Arc<Shared>,
    config: QueueConfig,
    mut sink: Box<dyn RecordSink>,
    mut dead_letter: Box<dyn RecordSink>,
) {
    let mut jitter = Rng::new(config.seed).split(0xBAC0FF).stream();
    let backoff = config.backoff;
    let mut st = shared.state.lock().unwrap();
    loop {
        if st.mode == Mode::Abort {
            return;
        }
        let head = st
            .lanes
            .values()
            .filter_map(|lane| lane.front())
            .min_by(|a, b| {
                a.next_attempt_ms
                    .total_cmp(&b.next_attempt_ms)
                    .then(a.seq.cmp(&b.seq))
            })
            .map(|t| (t.record.clone(), t.next_attempt_ms));
        let Some((record, due)) = head else {
            if st.mode == Mode::Drain {
                return;
            }
            st = shared.wake.wait(st).unwrap();
            continue;
        };
        let now = shared.now_ms();
        if due > now {
            let wait = Duration::from_secs_f64((due - now) / 1e3);
            st = shared.wake.wait_timeout(st, wait).unwrap().0;
            continue;
        }
        drop(st);
        let result = sink.append(&record);
        st = shared.state.lock().unwrap();
        let session = record.session();
        let lane = st.lanes.get_mut(&session).expect("lane of head task");
        let task = lane.front_mut().expect("head task");
        task.attempts += 1;
        let attempts = task.attempts;
        match result {
            Ok(()) => {
                lane.pop_front();
                st.stats.written += 1;
                st.stats.attempts_per_write.push(attempts);
                finish_task(&mut st, &shared, session);
            }
            Err(e) if attempts >= backoff.max_attempts => {
                lane.pop_front();
                st.stats.failed_attempts += 1;
                st.stats.dead_lettered += 1;
                st.flagged.insert(session);
                tracing::error!(%session, kind = record.kind_name(), attempts, error = %e, "record dead-lettered");
                if let Err(e) = dead_letter.append(&record) {
                    tracing::error!(%session, error = %e, "dead-letter write failed");
                }
                st.dead.push(record);
                finish_task(&mut st, &shared, session);
            }
            Err(e) => {
                let delay = backoff.sample(attempts - 1, &mut jitter);
                task.next_attempt_ms = shared.now_ms().max(task.next_attempt_ms) + delay;
                st.stats.failed_attempts += 1;
                st.stats.delays.push(DelaySample {
                    attempt: attempts - 1,
                    delay_ms: delay,
                });
                tracing::debug!(%session, attempts, delay_ms = delay, error = %e, "save failed, retrying");
            }
        }
    }
}

fn finish_task(st: &mut State, shared: &Shared, session: SessionId) {
    if st.lanes.get(&session).is_some_and(|l| l.is_empty()) {
        st.lanes.remove(&session);
    }
    st.pending -= 1;
    if st.pending == 0 {
        shared.idle.notify_all();
    }
}
