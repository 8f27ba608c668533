//! Table-style reporting over the document store: per-type volumes plus
//! the weekly HTCondor transfer summary (volume per submit host, change
//! from the previous week, mean packets lost, hosts that went silent).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};

use crate::store::{QueryFilter, Store};

/// Parse `7d`, `12h`, `30m`, or `3600s` (bare numbers are seconds).
pub fn parse_window(spec: &str) -> Result<f64, String> {
    let spec = spec.trim();
    let (number, unit) = match spec.char_indices().rfind(|(_, c)| c.is_ascii_digit() || *c == '.') {
        Some((i, _)) => spec.split_at(i + 1),
        None => return Err(format!("bad window {spec:?}")),
    };
    let n: f64 = number.parse().map_err(|_| format!("bad window {spec:?}"))?;
    let secs = match unit {
        "d" => n * 86400.0,
        "h" => n * 3600.0,
        "m" => n * 60.0,
        "s" | "" => n,
        other => return Err(format!("unknown window unit {other:?}")),
    };
    if secs <= 0.0 {
        return Err("window must be positive".into());
    }
    Ok(secs)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub documents: u64,
    pub bytes: u64,
    pub per_day: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmitHostReport {
    pub host: String,
    pub transfers: u64,
    pub bytes: u64,
    pub previous_bytes: u64,
    pub bytes_delta: i64,
    pub mean_packets_lost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HtcondorWeekly {
    pub hosts: Vec<SubmitHostReport>,
    /// Reported in the previous window, silent in this one.
    pub stopped_reporting: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub window_secs: f64,
    pub from: f64,
    pub to: f64,
    pub per_type: BTreeMap<String, TypeReport>,
    pub total_documents: u64,
    pub htcondor: HtcondorWeekly,
}

/// Pure function of store contents and `[now - window, now)`.
pub fn build_report(store: &Store, now: f64, window_secs: f64) -> Report {
    let from = now - window_secs;
    let docs = store.query(&QueryFilter { from: Some(from), to: Some(now), ..Default::default() });

    let mut per_type: BTreeMap<String, TypeReport> = BTreeMap::new();
    let mut total = 0;
    for doc in &docs {
        let t = doc.document.test_type().unwrap_or("unknown").to_string();
        let entry = per_type.entry(t).or_default();
        entry.documents += 1;
        entry.bytes += serde_json::to_vec(&doc.document.fields).map(|b| b.len() as u64).unwrap_or(0);
        total += 1;
    }
    for entry in per_type.values_mut() {
        entry.per_day = entry.documents as f64 * 86400.0 / window_secs;
    }

    let condor_stats = |lo: f64, hi: f64| -> BTreeMap<String, (u64, u64, f64)> {
        let mut out: BTreeMap<String, (u64, u64, f64)> = BTreeMap::new();
        let docs = store.query(&QueryFilter {
            from: Some(lo),
            to: Some(hi),
            test_type: Some("htcondor-xfer".into()),
            ..Default::default()
        });
        for doc in docs {
            let f = &doc.document.fields;
            let host = f
                .get("reporting_host")
                .and_then(Value::as_str)
                .unwrap_or("unknown")
                .to_string();
            let bytes = f.get("Bytes").and_then(Value::as_u64).unwrap_or(0);
            let lost = f.get("PacketsLost").and_then(Value::as_f64).unwrap_or(0.0);
            let entry = out.entry(host).or_insert((0, 0, 0.0));
            entry.0 += 1;
            entry.1 += bytes;
            entry.2 += lost;
        }
        out
    };
    let current = condor_stats(from, now);
    let previous = condor_stats(from - window_secs, from);

    let hosts = current
        .iter()
        .map(|(host, (transfers, bytes, lost_sum))| {
            let previous_bytes = previous.get(host).map(|p| p.1).unwrap_or(0);
            SubmitHostReport {
                host: host.clone(),
                transfers: *transfers,
                bytes: *bytes,
                previous_bytes,
                bytes_delta: *bytes as i64 - previous_bytes as i64,
                mean_packets_lost: if *transfers > 0 {
                    lost_sum / *transfers as f64
                } else {
                    0.0
                },
            }
        })
        .collect();
    let stopped_reporting: Vec<String> = previous
        .keys()
        .collect::<BTreeSet<_>>()
        .difference(&current.keys().collect())
        .map(|s| s.to_string())
        .collect();

    Report {
        window_secs,
        from,
        to: now,
        per_type,
        total_documents: total,
        htcondor: HtcondorWeekly { hosts, stopped_reporting },
    }
}

/// Human-readable table form.
pub fn render_human(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Window: {:.0}s ({:.3} .. {:.3})\n\n",
        report.window_secs, report.from, report.to
    ));
    out.push_str(&format!("{:<16} {:>12} {:>14} {:>12}\n", "type", "documents", "bytes", "per day"));
    for (t, s) in &report.per_type {
        out.push_str(&format!(
            "{:<16} {:>12} {:>14} {:>12.1}\n",
            t, s.documents, s.bytes, s.per_day
        ));
    }
    out.push_str(&format!("{:<16} {:>12}\n", "total", report.total_documents));

    out.push_str("\nHTCondor transfers by submit host\n");
    out.push_str(&format!(
        "{:<28} {:>10} {:>14} {:>+14} {:>12}\n",
        "host", "transfers", "bytes", "delta", "pkts lost"
    ));
    for h in &report.htcondor.hosts {
        out.push_str(&format!(
            "{:<28} {:>10} {:>14} {:>+14} {:>12.2}\n",
            h.host, h.transfers, h.bytes, h.bytes_delta, h.mean_packets_lost
        ));
    }
    if report.htcondor.stopped_reporting.is_empty() {
        out.push_str("stopped reporting: none\n");
    } else {
        out.push_str(&format!(
            "stopped reporting: {}\n",
            report.htcondor.stopped_reporting.join(", ")
        ));
    }
    out
}
