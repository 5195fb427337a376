//! Durable session storage: an append-only checksummed record log, an
//! asynchronous save queue in front of it, event-sourced session restore and
//! dataset export.

pub mod export;
pub mod log;
pub mod queue;
pub mod record;
pub mod session;

pub use export::{export_log, Dataset, Manifest, StepRow};
pub use log::{read_log, scan, Corruption, LogFile, LogScan};
pub use queue::{
    backoff_bounds, backoff_delay, BackoffConfig, FaultPlan, FaultySink, MemorySink, QueueConfig,
    QueueStats, RecordSink, SaveAck, SaveError, SaveQueue,
};
pub use record::{
    ChatRecord, ChatRole, FeedbackRecord, Record, SessionId, SessionStarted, StepRecord,
    FLAG_CLOCK_ANOMALY,
};
pub use session::{
    episode_rng, replay_session, restore_session, session_records, ChatEntry, FeedbackEntry,
    FoldError, RestoreError, Restored, SessionState, SNAPSHOT_EVERY,
};
