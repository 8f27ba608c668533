//! Pipeline configuration: one JSON file, validated before anything
//! starts, with `SANDPIPE_<SECTION>_<KEY>` environment overrides.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BusConfig {
    /// Queues spill inserts to `<dir>/<queue>.spill.jsonl` when set.
    pub spill_dir: Option<PathBuf>,
    /// Depth alert threshold applied to the archive queue.
    pub archive_queue_threshold: Option<usize>,
}

impl Default for BusConfig {
    fn default() -> BusConfig {
        BusConfig { spill_dir: None, archive_queue_threshold: Some(10_000) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectorConfig {
    pub pool_width: usize,
    pub poll_interval_secs: f64,
    pub jitter_secs: f64,
    pub seed: u64,
    pub state_dir: PathBuf,
    pub htcondor_listen: String,
    pub xrootd_listen: String,
    pub htcondor_allowed: Vec<String>,
    pub metrics_listen: String,
}

impl Default for CollectorConfig {
    fn default() -> CollectorConfig {
        CollectorConfig {
            pool_width: crate::collect::DEFAULT_POOL_WIDTH,
            poll_interval_secs: crate::collect::DEFAULT_POLL_INTERVAL_SECS,
            jitter_secs: crate::collect::DEFAULT_JITTER_SECS,
            seed: 0,
            state_dir: PathBuf::from("state"),
            htcondor_listen: "127.0.0.1:0".into(),
            xrootd_listen: "127.0.0.1:0".into(),
            htcondor_allowed: Vec::new(),
            metrics_listen: "127.0.0.1:0".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuthConfig {
    pub server_name: String,
    pub private_key: PathBuf,
    pub public_key: PathBuf,
    pub registry: PathBuf,
    pub token_ttl_secs: u64,
    /// Token/config issuance endpoint.
    pub listen: String,
}

impl Default for AuthConfig {
    fn default() -> AuthConfig {
        AuthConfig {
            server_name: "rabbit_server".into(),
            private_key: PathBuf::from("keys/signing.key"),
            public_key: PathBuf::from("keys/signing.pub"),
            registry: PathBuf::from("registry.json"),
            token_ttl_secs: 4 * 3600,
            listen: "127.0.0.1:0".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub path: PathBuf,
    /// Read-only query/stats endpoint.
    pub listen: String,
}

impl Default for StoreConfig {
    fn default() -> StoreConfig {
        StoreConfig { path: PathBuf::from("store.jsonl"), listen: "127.0.0.1:0".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchiveConfig {
    pub spool_dir: PathBuf,
    pub upload_dir: Option<PathBuf>,
}

impl Default for ArchiveConfig {
    fn default() -> ArchiveConfig {
        ArchiveConfig { spool_dir: PathBuf::from("spool"), upload_dir: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub enabled: bool,
    /// Mesh config file; absent + enabled means the built-in demo mesh.
    pub mesh: Option<PathBuf>,
    pub demo_toolkits: usize,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig { enabled: false, mesh: None, demo_toolkits: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// `system`, `virtual:<speedup>`, or `manual:<epoch>`.
    pub clock: String,
    pub vhost: String,
    /// Push endpoint (`POST /publish/...`).
    pub push_listen: String,
    pub topology: PathBuf,
    pub bus: BusConfig,
    pub collector: CollectorConfig,
    pub auth: AuthConfig,
    pub store: StoreConfig,
    pub archive: ArchiveConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            clock: "system".into(),
            vhost: "osg-nma".into(),
            push_listen: "127.0.0.1:0".into(),
            topology: PathBuf::from("topology.json"),
            bus: BusConfig::default(),
            collector: CollectorConfig::default(),
            auth: AuthConfig::default(),
            store: StoreConfig::default(),
            archive: ArchiveConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Load, apply environment overrides, validate. Unknown keys are
    /// rejected with the offending key named.
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigError::Io { path: path.to_path_buf(), err })?;
        Self::from_json(&text, std::env::vars())
    }

    pub fn from_json(
        text: &str,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<PipelineConfig, ConfigError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        apply_env_overrides(&mut value, env)?;
        let config: PipelineConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        crate::clock::Clock::parse_spec(&self.clock)
            .map_err(|e| ConfigError::Invalid(format!("clock: {e}")))?;
        if self.collector.pool_width == 0 {
            return Err(ConfigError::Invalid("collector.pool_width must be positive".into()));
        }
        if self.collector.poll_interval_secs <= 0.0 || self.collector.jitter_secs < 0.0 {
            return Err(ConfigError::Invalid(
                "collector poll interval must be positive and jitter nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn make_clock(&self) -> crate::clock::Clock {
        crate::clock::Clock::parse_spec(&self.clock).expect("validated")
    }
}

/// `SANDPIPE_<SECTION>_<KEY>=value` overrides `{"section": {"key": ...}}`;
/// `SANDPIPE_<KEY>` overrides a top-level field. Values parse as JSON when
/// they can and fall back to plain strings.
fn apply_env_overrides(
    value: &mut serde_json::Value,
    env: impl Iterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let top_level = ["clock", "vhost", "push_listen", "topology"];
    for (name, raw) in env {
        let Some(rest) = name.strip_prefix("SANDPIPE_") else { continue };
        let parsed: serde_json::Value =
            serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw.clone()));
        let lower = rest.to_ascii_lowercase();
        let obj = value
            .as_object_mut()
            .ok_or_else(|| ConfigError::Invalid("config root must be an object".into()))?;
        if top_level.contains(&lower.as_str()) {
            obj.insert(lower, parsed);
            continue;
        }
        let Some((section, key)) = lower.split_once('_') else {
            return Err(ConfigError::Invalid(format!("unrecognized override {name}")));
        };
        let entry = obj
            .entry(section.to_string())
            .or_insert_with(|| serde_json::json!({}));
        let section_obj = entry
            .as_object_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("{section} is not an object")))?;
        section_obj.insert(key.to_string(), parsed);
    }
    Ok(())
}
