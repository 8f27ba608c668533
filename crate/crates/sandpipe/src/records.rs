//! Raw measurement records as they travel on the wire.
//!
//! A measurement reaches the pipeline in one of two shapes. Pulled records
//! come from a toolkit's measurement archive: endpoints are hostnames and
//! durations are plain floats in seconds. Pushed records come straight
//! from the measurement tools: endpoints are IP addresses and durations
//! are ISO-8601 strings such as `PT0.0005S`. The ingest layer converges
//! both shapes onto one normalized form.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestType {
    Latency,
    PacketLoss,
    Throughput,
    Retransmits,
    Trace,
    HtcondorXfer,
    XrootdTcp,
}

impl TestType {
    pub const PERFSONAR: [TestType; 5] = [
        TestType::Latency,
        TestType::PacketLoss,
        TestType::Throughput,
        TestType::Retransmits,
        TestType::Trace,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestType::Latency => "latency",
            TestType::PacketLoss => "packet-loss",
            TestType::Throughput => "throughput",
            TestType::Retransmits => "retransmits",
            TestType::Trace => "trace",
            TestType::HtcondorXfer => "htcondor-xfer",
            TestType::XrootdTcp => "xrootd-tcp",
        }
    }

    /// Word used in topic keys. Traceroute data travels under
    /// `perfsonar.raw.packet-trace`.
    pub fn topic_word(&self) -> &'static str {
        match self {
            TestType::Trace => "packet-trace",
            other => other.as_str(),
        }
    }

    pub fn from_query(s: &str) -> Option<TestType> {
        match s {
            "latency" => Some(TestType::Latency),
            "packet-loss" => Some(TestType::PacketLoss),
            "throughput" => Some(TestType::Throughput),
            "retransmits" => Some(TestType::Retransmits),
            "trace" | "packet-trace" => Some(TestType::Trace),
            "htcondor-xfer" => Some(TestType::HtcondorXfer),
            "xrootd-tcp" => Some(TestType::XrootdTcp),
            _ => None,
        }
    }
}

impl fmt::Display for TestType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// A measurement as emitted by a source, before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum RawRecord {
    Pull(PullRecord),
    Push(PushRecord),
}

impl RawRecord {
    pub fn test_type(&self) -> TestType {
        match self {
            RawRecord::Pull(r) => r.test_type,
            RawRecord::Push(r) => r.test_type,
        }
    }

    pub fn timestamp(&self) -> f64 {
        match self {
            RawRecord::Pull(r) => r.timestamp,
            RawRecord::Push(r) => r.timestamp,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("record serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RawRecord, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// Polled from a measurement archive: hostnames, float durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullRecord {
    pub test_type: TestType,
    pub timestamp: f64,
    pub source: String,
    pub destination: String,
    pub values: Map<String, Value>,
}

/// Pushed by the toolkit itself: IP addresses, ISO-8601 durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushRecord {
    pub test_type: TestType,
    pub timestamp: f64,
    pub source: String,
    pub destination: String,
    pub values: Map<String, Value>,
}

/// Serialize a duration the way pushed records carry it: `PT0.0005S`.
pub fn to_iso_duration(seconds: f64) -> String {
    format!("PT{seconds}S")
}

/// Parse `PT<seconds>S`. `None` if the string is not an ISO duration at
/// all; `Some(Err)` if it looks like one but the number is bad.
pub fn parse_iso_duration(s: &str) -> Option<Result<f64, String>> {
    let inner = s.strip_prefix("PT")?.strip_suffix('S')?;
    Some(
        inner
            .parse::<f64>()
            .map_err(|_| format!("unparseable ISO-8601 duration {s:?}")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iso_duration_round_trip() {
        assert_eq!(parse_iso_duration("PT0.0005S"), Some(Ok(0.0005)));
        assert_eq!(to_iso_duration(0.0005), "PT0.0005S");
        assert_eq!(parse_iso_duration("0.0005"), None);
        assert!(parse_iso_duration("PTxS").unwrap().is_err());
    }

    #[test]
    fn record_wire_round_trip() {
        let rec = RawRecord::Push(PushRecord {
            test_type: TestType::Latency,
            timestamp: 1618444800.0,
            source: "192.0.2.10".into(),
            destination: "192.0.2.20".into(),
            values: serde_json::from_str(r#"{"rtt":"PT0.0005S"}"#).unwrap(),
        });
        let bytes = rec.to_bytes();
        assert_eq!(RawRecord::from_bytes(&bytes).unwrap(), rec);
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["variant"], "push");
        assert_eq!(v["test_type"], "latency");
    }

    #[test]
    fn trace_topic_word_differs() {
        assert_eq!(TestType::Trace.topic_word(), "packet-trace");
        assert_eq!(TestType::Trace.as_str(), "trace");
        assert_eq!(TestType::from_query("packet-trace"), Some(TestType::Trace));
    }
}
