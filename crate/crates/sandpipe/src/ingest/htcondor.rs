//! Enrichment of HTCondor transfer log lines.
//!
//! The raw unit is one log line from a submit host:
//!
//! ```text
//! 2021-04-14T12:00:00Z upload Dest=192.0.2.55 Bytes=1048576 PacketsLost=2 TcpReorders=0
//! ```
//!
//! A timestamp, a direction token, then key=value pairs of TCP
//! statistics. The receiver wraps each line with the reporting hostname
//! before it hits the bus; enrichment happens here.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use super::topology::{domain_of, SiteTopology};
use super::{EnrichedDocument, IngestError};

/// Wire form on the `htcondor.raw.xfer` topic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WrappedLine {
    pub line: String,
    pub reporting_host: String,
    pub received_at: f64,
}

/// Parse a value to its native representation: integer, float, or string.
fn native_value(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return Value::from(f);
    }
    Value::from(s)
}

/// The seven enrichment steps for one HTCondor log line:
/// direction tag, timestamp parse, native value conversion, destination
/// geo, destination domain, unique ID, document emission.
pub fn enrich_htcondor(
    raw_line: &str,
    reporting_host: &str,
    topo: &SiteTopology,
    ingest_time: f64,
) -> Result<EnrichedDocument, IngestError> {
    let mut parts = raw_line.split_whitespace();
    let ts_str = parts
        .next()
        .ok_or(IngestError::MissingField("timestamp"))?;
    // (2) timestamp parsed to epoch
    let timestamp = chrono::DateTime::parse_from_rfc3339(ts_str)
        .map_err(|e| IngestError::Unparseable(format!("timestamp {ts_str:?}: {e}")))?
        .timestamp_millis() as f64
        / 1000.0;

    // (1) direction tag
    let direction = match parts.next() {
        Some(d @ ("upload" | "download")) => d,
        other => {
            return Err(IngestError::Unparseable(format!(
                "expected upload|download, got {other:?}"
            )))
        }
    };

    let mut fields: BTreeMap<String, Value> = BTreeMap::new();
    fields.insert("test_type".into(), Value::from("htcondor-xfer"));
    fields.insert("timestamp".into(), Value::from(timestamp));
    fields.insert("direction".into(), Value::from(direction));
    fields.insert("reporting_host".into(), Value::from(reporting_host));

    // (3) key=value pairs to native representations
    let mut dest_ip: Option<String> = None;
    for pair in parts {
        let Some((k, v)) = pair.split_once('=') else {
            continue; // stray token, ignore
        };
        if k == "Dest" {
            dest_ip = Some(v.to_string());
        }
        fields.insert(k.to_string(), native_value(v));
    }

    if let Some(ip) = &dest_ip {
        fields.insert("dest_ip".into(), Value::from(ip.clone()));
        // (4) destination latitude/longitude
        if let Some(geo) = topo.geo_for_ip(ip) {
            fields.insert("dest_lat".into(), Value::from(geo.lat));
            fields.insert("dest_lon".into(), Value::from(geo.lon));
        }
        // (5) reverse-resolve and keep only the domain
        if let Some(host) = topo.host_for_ip(ip) {
            fields.insert("dest_host".into(), Value::from(host));
            fields.insert("dest_domain".into(), Value::from(domain_of(host)));
        }
    }

    // (6) the ID covers the full line plus the reporting host, so the
    // same line from two submit hosts stays distinct
    let id = hex::encode(Sha256::digest(
        format!("{raw_line}|{reporting_host}").as_bytes(),
    ));

    // (7) document ready for the store
    Ok(EnrichedDocument {
        id,
        fields,
        ingest_time,
    })
}
