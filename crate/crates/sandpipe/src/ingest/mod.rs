//! Normalization, dedup IDs, enrichment, and the ingester consumer loops.
//!
//! Pushed and pulled copies of the same measurement must converge: after
//! `normalize`, ISO-8601 durations are floats in seconds and endpoints
//! carry both hostname and IP, so `record_id` produces the same ID for
//! both copies and the store's upsert absorbs the duplicate.

pub mod htcondor;
pub mod topology;

pub use htcondor::enrich_htcondor;
pub use topology::{domain_of, GeoPoint, SiteInfo, SiteTopology};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

use crate::bus::{Broker, Consumer, TopicKey};
use crate::records::{parse_iso_duration, RawRecord, TestType};
use crate::store::Store;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unparseable record: {0}")]
    Unparseable(String),
    #[error("{0}")]
    BadValue(String),
    #[error("missing mandatory field {0}")]
    MissingField(&'static str),
}

/// The converged shape of a measurement, independent of how it arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRecord {
    pub test_type: TestType,
    pub timestamp: f64,
    pub source_host: String,
    pub source_ip: Option<String>,
    pub dest_host: String,
    pub dest_ip: Option<String>,
    pub values: Map<String, Value>,
}

/// Flattened, annotated, ID-bearing record ready for the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedDocument {
    pub id: String,
    pub fields: BTreeMap<String, Value>,
    pub ingest_time: f64,
}

impl EnrichedDocument {
    pub fn test_type(&self) -> Option<&str> {
        self.fields.get("test_type").and_then(Value::as_str)
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.fields.get("timestamp").and_then(Value::as_f64)
    }
}

fn looks_like_ip(s: &str) -> bool {
    s.parse::<std::net::IpAddr>().is_ok()
}

/// Convert every ISO-8601 duration string in a value tree to float
/// seconds. Fails on a malformed duration.
fn normalize_value(v: &Value) -> Result<Value, IngestError> {
    match v {
        Value::String(s) => match parse_iso_duration(s) {
            Some(Ok(secs)) => Ok(Value::from(secs)),
            Some(Err(e)) => Err(IngestError::BadValue(e)),
            None => Ok(v.clone()),
        },
        Value::Array(items) => Ok(Value::Array(
            items.iter().map(normalize_value).collect::<Result<_, _>>()?,
        )),
        Value::Object(map) => {
            let mut out = Map::new();
            for (k, val) in map {
                out.insert(k.clone(), normalize_value(val)?);
            }
            Ok(Value::Object(out))
        }
        other => Ok(other.clone()),
    }
}

/// Converge a raw record onto the normalized form. Push-variant durations
/// become floats, push-variant IPs are resolved to hostnames (IP kept),
/// and pull-variant hostnames get their IPs backfilled when the topology
/// knows them.
pub fn normalize(raw: &RawRecord, topo: &SiteTopology) -> Result<NormalizedRecord, IngestError> {
    let (source, destination, values) = match raw {
        RawRecord::Pull(r) => (&r.source, &r.destination, &r.values),
        RawRecord::Push(r) => (&r.source, &r.destination, &r.values),
    };
    if source.is_empty() {
        return Err(IngestError::MissingField("source"));
    }
    if destination.is_empty() {
        return Err(IngestError::MissingField("destination"));
    }

    let resolve = |endpoint: &str| -> (String, Option<String>) {
        if looks_like_ip(endpoint) {
            match topo.host_for_ip(endpoint) {
                Some(host) => (host.to_string(), Some(endpoint.to_string())),
                // unresolvable IP: keep the IP as the host-position value
                None => (endpoint.to_string(), Some(endpoint.to_string())),
            }
        } else {
            (
                endpoint.to_string(),
                topo.ip_for_host(endpoint).map(String::from),
            )
        }
    };
    let (source_host, source_ip) = resolve(source);
    let (dest_host, dest_ip) = resolve(destination);

    let mut norm_values = Map::new();
    for (k, v) in values {
        norm_values.insert(k.clone(), normalize_value(v)?);
    }

    Ok(NormalizedRecord {
        test_type: raw.test_type(),
        timestamp: raw.timestamp(),
        source_host,
        source_ip,
        dest_host,
        dest_ip,
        values: norm_values,
    })
}

/// Deterministic dedup ID: SHA-256 over
/// `<timestamp with 3 decimals>|<source_host>|<dest_host>|<test_type>`.
/// Push- and pull-origin copies of one measurement hash identically.
pub fn record_id(n: &NormalizedRecord) -> String {
    let canonical = format!(
        "{:.3}|{}|{}|{}",
        n.timestamp, n.source_host, n.dest_host, n.test_type
    );
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn flatten_into(out: &mut BTreeMap<String, Value>, prefix: &str, v: &Value) {
    match v {
        Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}_{k}")
                };
                flatten_into(out, &key, val);
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                flatten_into(out, &format!("{prefix}_{i}"), item);
            }
        }
        scalar => {
            out.insert(prefix.to_string(), scalar.clone());
        }
    }
}

fn insert_site_fields(fields: &mut BTreeMap<String, Value>, topo: &SiteTopology, host: &str, which: &str) {
    if let Some(info) = topo.site_for_host(host) {
        fields.insert(format!("{which}_site"), Value::from(info.site.clone()));
        fields.insert(format!("{which}_vo"), Value::from(info.vo.clone()));
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Attach site metadata, flatten, and apply per-type annotations:
/// latency records gain delay summary statistics and a loss fraction,
/// traceroute records gain per-hop ASN/RTT annotations and a
/// destination-reached flag, everything else passes through.
pub fn enrich(n: &NormalizedRecord, topo: &SiteTopology, ingest_time: f64) -> EnrichedDocument {
    let mut fields: BTreeMap<String, Value> = BTreeMap::new();
    fields.insert("test_type".into(), Value::from(n.test_type.as_str()));
    fields.insert("timestamp".into(), Value::from(n.timestamp));
    fields.insert("source_host".into(), Value::from(n.source_host.clone()));
    fields.insert("dest_host".into(), Value::from(n.dest_host.clone()));
    if let Some(ip) = &n.source_ip {
        fields.insert("source_ip".into(), Value::from(ip.clone()));
    }
    if let Some(ip) = &n.dest_ip {
        fields.insert("dest_ip".into(), Value::from(ip.clone()));
    }
    insert_site_fields(&mut fields, topo, &n.source_host, "source");
    insert_site_fields(&mut fields, topo, &n.dest_host, "dest");

    match n.test_type {
        TestType::Latency => {
            for (k, v) in &n.values {
                if k == "delays" {
                    continue; // replaced by summary statistics
                }
                flatten_into(&mut fields, k, v);
            }
            if let Some(delays) = n.values.get("delays").and_then(Value::as_array) {
                let mut xs: Vec<f64> = delays.iter().filter_map(Value::as_f64).collect();
                if !xs.is_empty() {
                    xs.sort_by(|a, b| a.total_cmp(b));
                    let sum: f64 = xs.iter().sum();
                    fields.insert("delay_min".into(), Value::from(xs[0]));
                    fields.insert("delay_max".into(), Value::from(xs[xs.len() - 1]));
                    fields.insert("delay_mean".into(), Value::from(sum / xs.len() as f64));
                    fields.insert("delay_median".into(), Value::from(median(&xs)));
                }
            }
            let expected = n.values.get("expected").and_then(Value::as_f64);
            let received = n.values.get("received").and_then(Value::as_f64);
            if let (Some(expected), Some(received)) = (expected, received) {
                if expected > 0.0 {
                    let loss = (expected - received) / expected;
                    fields.insert("loss_fraction".into(), Value::from(loss));
                }
            }
        }
        TestType::Trace => {
            let hops = n.values.get("hops").and_then(Value::as_array);
            let mut last_hop_ip: Option<String> = None;
            if let Some(hops) = hops {
                fields.insert("hop_count".into(), Value::from(hops.len()));
                for (i, hop) in hops.iter().enumerate() {
                    let idx = i + 1; // hop indices start at 1
                    let ip = hop.get("ip").and_then(Value::as_str).unwrap_or_default();
                    fields.insert(format!("hop_{idx}_index"), Value::from(idx));
                    fields.insert(format!("hop_{idx}_ip"), Value::from(ip));
                    if let Some(rtt) = hop.get("rtt").and_then(Value::as_f64) {
                        fields.insert(format!("hop_{idx}_rtt"), Value::from(rtt));
                    }
                    if let Some(host) = topo.host_for_ip(ip) {
                        fields.insert(format!("hop_{idx}_hostname"), Value::from(host));
                    }
                    if let Some(asn) = topo.asn_for_ip(ip) {
                        fields.insert(format!("hop_{idx}_asn"), Value::from(asn));
                    }
                    last_hop_ip = Some(ip.to_string());
                }
            }
            let reached = match (&last_hop_ip, &n.dest_ip) {
                (Some(last), Some(dest)) => last == dest,
                _ => false,
            };
            fields.insert("destination_reached".into(), Value::from(reached));
            for (k, v) in &n.values {
                if k != "hops" {
                    flatten_into(&mut fields, k, v);
                }
            }
        }
        // throughput, packet loss, retransmits and the rest pass their
        // measurements through unmodified
        _ => {
            for (k, v) in &n.values {
                flatten_into(&mut fields, k, v);
            }
        }
    }

    EnrichedDocument {
        id: record_id(n),
        fields,
        ingest_time,
    }
}

/// Topic key an ingester queue sees for a given test type.
pub fn raw_topic(test_type: TestType) -> TopicKey {
    let key = match test_type {
        TestType::HtcondorXfer => "htcondor.raw.xfer".to_string(),
        TestType::XrootdTcp => "xrootd.raw.tcp".to_string(),
        t => format!("perfsonar.raw.{}", t.topic_word()),
    };
    TopicKey::new(key).expect("static topic keys are valid")
}

pub fn dead_letter_queue(queue: &str) -> String {
    format!("{queue}.dlq")
}

/// One ingester: consumes its queue serially, writes documents, acks.
/// Malformed records go to `<queue>.dlq` with a reason and are acked.
pub struct Ingester {
    pub broker: Broker,
    pub queue: String,
    pub store: Store,
    pub topo: Arc<SiteTopology>,
}

impl Ingester {
    /// Process everything currently in the queue, then return. The
    /// long-running form is [`Ingester::run`].
    pub fn drain(&self) -> usize {
        let consumer = self
            .broker
            .consume(&self.queue, "ingester")
            .expect("ingester queue exists");
        let mut n = 0;
        while let Some(delivery) = consumer.try_recv() {
            self.handle(&consumer, delivery.message.topic.clone(), delivery);
            n += 1;
        }
        n
    }

    /// Consumer loop; returns when `stop` is set and the queue is empty.
    pub fn run(&self, stop: &AtomicBool) {
        let consumer = self
            .broker
            .consume(&self.queue, "ingester")
            .expect("ingester queue exists");
        loop {
            match consumer.recv(Duration::from_millis(20)) {
                Some(delivery) => {
                    self.handle(&consumer, delivery.message.topic.clone(), delivery)
                }
                None => {
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                }
            }
        }
    }

    fn handle(&self, consumer: &Consumer, topic: TopicKey, delivery: crate::bus::Delivery) {
        let now = self.broker.clock().now();
        let result = ingest_payload(&topic, &delivery.message.payload, &self.topo, now);
        match result {
            Ok(doc) => {
                self.store.upsert(&doc).expect("store write");
                consumer.ack(&delivery);
            }
            Err(err) => {
                self.dead_letter(&topic, &delivery.message.payload, &err.to_string());
                consumer.ack(&delivery);
            }
        }
    }

    fn dead_letter(&self, topic: &TopicKey, payload: &[u8], reason: &str) {
        let dlq = dead_letter_queue(&self.queue);
        self.broker.declare_queue(&dlq, None).ok();
        let body = serde_json::json!({
            "reason": reason,
            "topic": topic.as_str(),
            "payload": String::from_utf8_lossy(payload),
        });
        self.broker
            .enqueue_direct(&dlq, topic.clone(), serde_json::to_vec(&body).unwrap(), "ingester")
            .ok();
    }
}

/// Route one payload through the right enrichment path based on its topic.
pub fn ingest_payload(
    topic: &TopicKey,
    payload: &[u8],
    topo: &SiteTopology,
    now: f64,
) -> Result<EnrichedDocument, IngestError> {
    let words: Vec<&str> = topic.words().collect();
    match words.as_slice() {
        ["perfsonar", "raw", _] => {
            let raw = RawRecord::from_bytes(payload)
                .map_err(|e| IngestError::Unparseable(e.to_string()))?;
            let normalized = normalize(&raw, topo)?;
            Ok(enrich(&normalized, topo, now))
        }
        ["htcondor", "raw", "xfer"] => {
            let wrapped: htcondor::WrappedLine = serde_json::from_slice(payload)
                .map_err(|e| IngestError::Unparseable(e.to_string()))?;
            enrich_htcondor(&wrapped.line, &wrapped.reporting_host, topo, now)
        }
        ["xrootd", "raw", "tcp"] => ingest_xrootd(payload, topo, now),
        ["perfsonar", "meta", ..] => ingest_meta(topic, payload, now),
        _ => Err(IngestError::Unparseable(format!(
            "no ingester for topic {topic}"
        ))),
    }
}

/// XRootD TCP-statistics datagrams are JSON objects with `timestamp`,
/// `src`, `dst`, and counter fields.
fn ingest_xrootd(payload: &[u8], topo: &SiteTopology, now: f64) -> Result<EnrichedDocument, IngestError> {
    let v: Value =
        serde_json::from_slice(payload).map_err(|e| IngestError::Unparseable(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| IngestError::Unparseable("xrootd datagram is not an object".into()))?;
    let timestamp = obj
        .get("timestamp")
        .and_then(Value::as_f64)
        .ok_or(IngestError::MissingField("timestamp"))?;
    let src = obj
        .get("src")
        .and_then(Value::as_str)
        .ok_or(IngestError::MissingField("src"))?;
    let dst = obj
        .get("dst")
        .and_then(Value::as_str)
        .ok_or(IngestError::MissingField("dst"))?;
    let mut values = Map::new();
    for (k, val) in obj {
        if !matches!(k.as_str(), "timestamp" | "src" | "dst") {
            values.insert(k.clone(), val.clone());
        }
    }
    let raw = RawRecord::Push(crate::records::PushRecord {
        test_type: TestType::XrootdTcp,
        timestamp,
        source: src.to_string(),
        destination: dst.to_string(),
        values,
    });
    let normalized = normalize(&raw, topo)?;
    Ok(enrich(&normalized, topo, now))
}

/// Generic pass-through for status/metadata topics: flatten and hash the
/// whole payload.
fn ingest_meta(topic: &TopicKey, payload: &[u8], now: f64) -> Result<EnrichedDocument, IngestError> {
    let v: Value =
        serde_json::from_slice(payload).map_err(|e| IngestError::Unparseable(e.to_string()))?;
    let mut fields = BTreeMap::new();
    fields.insert("test_type".into(), Value::from("meta"));
    fields.insert("topic".into(), Value::from(topic.as_str()));
    flatten_into(&mut fields, "", &v);
    let id = hex::encode(Sha256::digest(payload));
    Ok(EnrichedDocument {
        id,
        fields,
        ingest_time: now,
    })
}
