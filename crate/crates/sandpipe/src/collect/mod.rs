//! Data collection: the polling collector with its worker pool, state
//! files and jitter scheduling, push detection, and the HTCondor/XRootD
//! receivers.
//!
//! The collector is poll-based: a bounded pool of workers queries toolkit
//! measurement archives over HTTP, publishes new records to the bus, and
//! advances a per-toolkit state file only after the publish is accepted.
//! When a toolkit starts pushing its own data, the collector notices on
//! the transformed push stream and stops polling it for good.

pub mod poller;
pub mod receivers;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

use crate::records::TestType;

pub const DEFAULT_POLL_INTERVAL_SECS: f64 = 300.0;
pub const DEFAULT_JITTER_SECS: f64 = 60.0;
/// Production runs 200 workers; the desk default is 8.
pub const DEFAULT_POOL_WIDTH: usize = 8;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("state io: {0}")]
    Io(#[from] std::io::Error),
    #[error("state file {path}: {err}")]
    BadStateFile { path: PathBuf, err: String },
    #[error("toolkit {0} request failed: {1}")]
    Http(String, String),
    #[error("bus: {0}")]
    Bus(#[from] crate::bus::BusError),
}

/// One toolkit the collector knows how to query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolkitEndpoint {
    pub hostname: String,
    pub base_url: String,
    #[serde(default)]
    pub meshes: Vec<String>,
    pub test_types: Vec<TestType>,
}

/// Per-toolkit collection state, persisted as one JSON file per toolkit.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ToolkitState {
    /// Newest record timestamp seen per test type; never decreases.
    #[serde(default)]
    pub last_collected: BTreeMap<TestType, f64>,
    #[serde(default)]
    pub push_detected: bool,
    /// Cleared permanently once push is detected.
    #[serde(default)]
    pub next_poll_at: Option<f64>,
}

/// Shared state map with atomic per-toolkit file persistence.
#[derive(Clone)]
pub struct CollectorState {
    dir: PathBuf,
    map: Arc<Mutex<HashMap<String, ToolkitState>>>,
}

impl CollectorState {
    /// Open the state directory, loading any existing state files.
    pub fn open(dir: impl Into<PathBuf>) -> Result<CollectorState, CollectError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut map = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let hostname = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let text = std::fs::read_to_string(&path)?;
                let state: ToolkitState =
                    serde_json::from_str(&text).map_err(|e| CollectError::BadStateFile {
                        path: path.clone(),
                        err: e.to_string(),
                    })?;
                map.insert(hostname, state);
            }
        }
        Ok(CollectorState {
            dir,
            map: Arc::new(Mutex::new(map)),
        })
    }

    pub fn get(&self, hostname: &str) -> ToolkitState {
        self.map.lock().unwrap().get(hostname).cloned().unwrap_or_default()
    }

    /// Mutate one toolkit's state and write its file atomically
    /// (write-then-rename).
    pub fn update<R>(
        &self,
        hostname: &str,
        f: impl FnOnce(&mut ToolkitState) -> R,
    ) -> Result<R, CollectError> {
        let mut map = self.map.lock().unwrap();
        let state = map.entry(hostname.to_string()).or_default();
        let out = f(state);
        let path = self.state_path(hostname);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(state).unwrap())?;
        std::fs::rename(&tmp, &path)?;
        Ok(out)
    }

    pub fn state_path(&self, hostname: &str) -> PathBuf {
        self.dir.join(format!("{hostname}.json"))
    }

    /// Record the newest collected timestamp for a test type, never
    /// moving backwards.
    pub fn advance_mark(
        &self,
        hostname: &str,
        test_type: TestType,
        timestamp: f64,
    ) -> Result<(), CollectError> {
        self.update(hostname, |s| {
            let mark = s.last_collected.entry(test_type).or_insert(0.0);
            if timestamp > *mark {
                *mark = timestamp;
            }
        })
    }

    /// Stop polling this toolkit forever.
    pub fn mark_push_detected(&self, hostname: &str) -> Result<(), CollectError> {
        self.update(hostname, |s| {
            s.push_detected = true;
            s.next_poll_at = None;
        })
    }

    pub fn hostnames(&self) -> Vec<String> {
        self.map.lock().unwrap().keys().cloned().collect()
    }
}

/// Decides which toolkits are due and assigns the next poll time with
/// seeded uniform jitter.
pub struct Scheduler {
    pub interval_secs: f64,
    pub jitter_secs: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl Scheduler {
    pub fn new(interval_secs: f64, jitter_secs: f64, seed: u64) -> Scheduler {
        Scheduler {
            interval_secs,
            jitter_secs,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Toolkits due at `now`: never while push-detected, immediately on
    /// fresh start, otherwise once `next_poll_at` has passed.
    pub fn due(
        &self,
        endpoints: &[ToolkitEndpoint],
        state: &CollectorState,
        now: f64,
    ) -> Vec<String> {
        endpoints
            .iter()
            .filter(|e| {
                let s = state.get(&e.hostname);
                !s.push_detected && s.next_poll_at.is_none_or(|t| now >= t)
            })
            .map(|e| e.hostname.clone())
            .collect()
    }

    /// Called when a poll is dispatched: schedule the next one at
    /// `now + interval + U(0, jitter)`.
    pub fn mark_dispatched(
        &self,
        state: &CollectorState,
        hostname: &str,
        now: f64,
    ) -> Result<(), CollectError> {
        let jitter = self.rng.lock().unwrap().gen_range(0.0..=self.jitter_secs);
        state.update(hostname, |s| {
            if !s.push_detected {
                s.next_poll_at = Some(now + self.interval_secs + jitter);
            }
        })
    }
}

/// Counters exposed on the metrics endpoint: poll durations plus
/// running/pending query counts.
#[derive(Default)]
pub struct CollectMetrics {
    pub polls_total: AtomicU64,
    pub poll_errors_total: AtomicU64,
    pub poll_duration_micros_sum: AtomicU64,
    pub records_published_total: AtomicU64,
    pub running: AtomicUsize,
    pub pending: AtomicUsize,
    pub max_concurrent: AtomicUsize,
    pub xrootd_published_total: AtomicU64,
    pub xrootd_malformed_total: AtomicU64,
    pub htcondor_published_total: AtomicU64,
    pub htcondor_rejected_total: AtomicU64,
}

impl CollectMetrics {
    pub fn record_poll(&self, duration_micros: u64, records: u64, ok: bool) {
        self.polls_total.fetch_add(1, Ordering::Relaxed);
        if !ok {
            self.poll_errors_total.fetch_add(1, Ordering::Relaxed);
        }
        self.poll_duration_micros_sum
            .fetch_add(duration_micros, Ordering::Relaxed);
        self.records_published_total
            .fetch_add(records, Ordering::Relaxed);
    }

    pub fn enter_poll(&self) {
        self.pending.fetch_sub(1, Ordering::SeqCst);
        let running = self.running.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_concurrent.fetch_max(running, Ordering::SeqCst);
    }

    pub fn exit_poll(&self) {
        self.running.fetch_sub(1, Ordering::SeqCst);
    }

    /// Plain-text exposition for the metrics endpoint.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, v: u64| {
            out.push_str(&format!("{name} {v}\n"));
        };
        line("collector_polls_total", self.polls_total.load(Ordering::Relaxed));
        line(
            "collector_poll_errors_total",
            self.poll_errors_total.load(Ordering::Relaxed),
        );
        line(
            "collector_poll_duration_micros_sum",
            self.poll_duration_micros_sum.load(Ordering::Relaxed),
        );
        line(
            "collector_records_published_total",
            self.records_published_total.load(Ordering::Relaxed),
        );
        line("collector_running", self.running.load(Ordering::Relaxed) as u64);
        line("collector_pending", self.pending.load(Ordering::Relaxed) as u64);
        line(
            "collector_max_concurrent",
            self.max_concurrent.load(Ordering::Relaxed) as u64,
        );
        line(
            "xrootd_published_total",
            self.xrootd_published_total.load(Ordering::Relaxed),
        );
        line(
            "xrootd_malformed_total",
            self.xrootd_malformed_total.load(Ordering::Relaxed),
        );
        line(
            "htcondor_published_total",
            self.htcondor_published_total.load(Ordering::Relaxed),
        );
        line(
            "htcondor_rejected_total",
            self.htcondor_rejected_total.load(Ordering::Relaxed),
        );
        out
    }
}

/// Atomic state-file write helper shared with tests.
pub fn atomic_write(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}
