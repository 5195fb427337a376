//! Server configuration: a TOML file, then `WEBRL_*` environment overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use webrl_core::persistence::QueueConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    /// Socket address to bind, e.g. `127.0.0.1:8080`.
    pub listen: String,
    /// Experiment definition (TOML).
    pub experiment: PathBuf,
    /// Holds `records.log` and `dead-letter.log`.
    pub data_dir: PathBuf,
    /// fsync after every appended record.
    pub fsync: bool,
    pub heartbeat_ms: u64,
    /// Consecutive silent heartbeat intervals before a session is marked idle.
    pub missed_heartbeats: u32,
    pub queue: QueueConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            experiment: PathBuf::from("experiment.toml"),
            data_dir: PathBuf::from("data"),
            fsync: true,
            heartbeat_ms: 15_000,
            missed_heartbeats: 3,
            queue: QueueConfig::default(),
        }
    }
}

/// Environment variables read by [`ServerConfig::apply_env`].
pub const ENV_VARS: [&str; 11] = [
    "WEBRL_LISTEN",
    "WEBRL_EXPERIMENT",
    "WEBRL_DATA_DIR",
    "WEBRL_FSYNC",
    "WEBRL_HEARTBEAT_MS",
    "WEBRL_MISSED_HEARTBEATS",
    "WEBRL_BACKOFF_BASE_MS",
    "WEBRL_BACKOFF_JITTER",
    "WEBRL_BACKOFF_MAX_DELAY_MS",
    "WEBRL_BACKOFF_MAX_ATTEMPTS",
    "WEBRL_QUEUE_CAPACITY",
];

fn parse<T: std::str::FromStr>(name: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| anyhow::anyhow!("{name}={value:?}: {e}"))
}

impl ServerConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` if given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    /// Applies overrides from `(name, value)` pairs; unrelated names are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> anyhow::Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "WEBRL_LISTEN" => self.listen = v.to_string(),
                "WEBRL_EXPERIMENT" => self.experiment = v.into(),
                "WEBRL_DATA_DIR" => self.data_dir = v.into(),
                "WEBRL_FSYNC" => self.fsync = parse(k, v)?,
                "WEBRL_HEARTBEAT_MS" => self.heartbeat_ms = parse(k, v)?,
                "WEBRL_MISSED_HEARTBEATS" => self.missed_heartbeats = parse(k, v)?,
                "WEBRL_BACKOFF_BASE_MS" => self.queue.backoff.base_ms = parse(k, v)?,
                "WEBRL_BACKOFF_JITTER" => self.queue.backoff.jitter = parse(k, v)?,
                "WEBRL_BACKOFF_MAX_DELAY_MS" => self.queue.backoff.max_delay_ms = parse(k, v)?,
                "WEBRL_BACKOFF_MAX_ATTEMPTS" => self.queue.backoff.max_attempts = parse(k, v)?,
                "WEBRL_QUEUE_CAPACITY" => self.queue.capacity = parse(k, v)?,
                _ => {}
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.listen.parse::<std::net::SocketAddr>().is_err() {
            bail!("listen: `{}` is not a socket address", self.listen);
        }
        if self.heartbeat_ms == 0 {
            bail!("heartbeat_ms must be positive");
        }
        if self.missed_heartbeats == 0 {
            bail!("missed_heartbeats must be positive");
        }
        if self.queue.capacity == 0 {
            bail!("queue.capacity must be positive");
        }
        self.queue
            .backoff
            .validate()
            .map_err(|e| anyhow::anyhow!("queue.backoff: {e}"))
    }

    pub fn heartbeat(&self) -> Duration {
        Duration::from_millis(self.heartbeat_ms)
    }

    pub fn log_path(&self) -> PathBuf {
        self.data_dir.join("records.log")
    }

    pub fn dead_letter_path(&self) -> PathBuf {
        self.data_dir.join("dead-letter.log")
    }
}
