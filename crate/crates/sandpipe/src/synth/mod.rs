//! Deterministic synthetic measurement sources.
//!
//! A mesh config plus a seed fully determines every record the mock
//! sources emit: per-pair emission schedules are fixed grids, and each
//! event's randomness comes from an RNG keyed on (seed, pair, type,
//! event index). Regenerating any window of simulated time reproduces
//! identical streams, which is what makes the report and replay oracles
//! possible.

pub mod toolkit;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use crate::ingest::SiteTopology;
use crate::records::{to_iso_duration, PullRecord, PushRecord, TestType};

/// OWAMP sends 600 packets per test minute.
pub const PACKETS_PER_TEST: u64 = 600;
/// Delay samples carried per latency record.
pub const DELAY_SAMPLES: usize = 20;

/// Production daily rates scaled down by 10^4.
pub const DESK_SCALE_DIVISOR: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolkitMode {
    Pull,
    Push,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthToolkit {
    pub hostname: String,
    pub ip: String,
    pub site: String,
    pub vo: String,
    pub mode: ToolkitMode,
}

/// Per-pair delay/loss model: constants plus seeded noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairParams {
    pub delay_base_secs: f64,
    pub delay_jitter_secs: f64,
    pub loss_prob: f64,
    pub throughput_bps: f64,
    pub retransmit_rate: f64,
}

impl Default for PairParams {
    fn default() -> PairParams {
        PairParams::base()
    }
}

/// Records per simulated day per test type. Defaults are the production
/// daily volumes divided by 10^4.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateTable {
    pub latency: f64,
    pub packet_loss: f64,
    pub throughput: f64,
    pub retransmits: f64,
    pub trace: f64,
    pub htcondor: f64,
    pub xrootd: f64,
}

impl Default for RateTable {
    fn default() -> RateTable {
        RateTable {
            latency: 7.95e6 / DESK_SCALE_DIVISOR,
            packet_loss: 8.08e6 / DESK_SCALE_DIVISOR,
            throughput: 19.2e3 / DESK_SCALE_DIVISOR,
            retransmits: 18.8e3 / DESK_SCALE_DIVISOR,
            trace: 2.14e6 / DESK_SCALE_DIVISOR,
            htcondor: 446e3 / DESK_SCALE_DIVISOR,
            xrootd: 50.0,
        }
    }
}

/// The whole synthetic world: toolkits, pair models, paths, rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub seed: u64,
    pub toolkits: Vec<SynthToolkit>,
    #[serde(default)]
    pub default_pair: PairParams,
    /// Keyed `<src_host>|<dst_host>`; pairs not listed use the default.
    #[serde(default)]
    pub pair_overrides: BTreeMap<String, PairParams>,
    #[serde(default)]
    pub rates: RateTable,
    /// Keyed `<src_host>|<dst_host>`; ordered hop IPs, last hop = dest.
    #[serde(default)]
    pub path_table: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub submit_hosts: Vec<String>,
}

impl MeshConfig {
    pub fn load(path: &Path) -> std::io::Result<MeshConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    /// A small demo mesh: `n` toolkits on 192.0.2.0/24 with a shared
    /// router backbone, every ordered pair testing.
    pub fn demo(seed: u64, n: usize) -> MeshConfig {
        let toolkits: Vec<SynthToolkit> = (0..n)
            .map(|i| SynthToolkit {
                hostname: format!("ps{i}.site{i}.example.edu"),
                ip: format!("192.0.2.{}", 10 + i),
                site: format!("Site{i}"),
                vo: "osg".into(),
                mode: if i % 3 == 2 { ToolkitMode::Push } else { ToolkitMode::Pull },
            })
            .collect();
        let mut path_table = BTreeMap::new();
        for a in &toolkits {
            for b in &toolkits {
                if a.hostname == b.hostname {
                    continue;
                }
                // src-edge router, two backbone routers, dest-edge, dest
                let hops = vec![
                    format!("198.51.100.{}", 1 + ip_octet(&a.ip)),
                    "203.0.113.1".to_string(),
                    "203.0.113.2".to_string(),
                    format!("198.51.100.{}", 1 + ip_octet(&b.ip)),
                    b.ip.clone(),
                ];
                path_table.insert(format!("{}|{}", a.hostname, b.hostname), hops);
            }
        }
        MeshConfig {
            seed,
            toolkits,
            default_pair: PairParams::base(),
            pair_overrides: BTreeMap::new(),
            rates: RateTable::default(),
            path_table,
            submit_hosts: (0..3).map(|i| format!("submit{i}.cs.example.edu")).collect(),
        }
    }

    pub fn pairs(&self) -> Vec<(&SynthToolkit, &SynthToolkit)> {
        let mut out = Vec::new();
        for a in &self.toolkits {
            for b in &self.toolkits {
                if a.hostname != b.hostname {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn pair_params(&self, src: &str, dst: &str) -> PairParams {
        self.pair_overrides
            .get(&format!("{src}|{dst}"))
            .copied()
            .unwrap_or(self.default_pair)
    }

    /// Site topology covering every toolkit and every router hop, with
    /// deterministic ASN and geo assignments. This is the file the
    /// ingesters load; it never involves live DNS.
    pub fn topology(&self) -> SiteTopology {
        let mut topo = SiteTopology::default();
        for t in &self.toolkits {
            topo.add_host(&t.hostname, &t.ip, &t.site, &t.vo);
            topo.ip_to_asn.insert(t.ip.clone(), derived_asn(&t.ip));
            topo.ip_to_geo.insert(t.ip.clone(), derived_geo(&t.ip));
        }
        for hops in self.path_table.values() {
            for ip in hops {
                topo.ip_to_asn.entry(ip.clone()).or_insert_with(|| derived_asn(ip));
                topo.ip_to_geo.entry(ip.clone()).or_insert_with(|| derived_geo(ip));
            }
        }
        for (i, host) in self.submit_hosts.iter().enumerate() {
            let ip = format!("192.0.2.{}", 200 + i);
            topo.add_host(host, &ip, "SubmitSite", "osg");
            topo.ip_to_geo.insert(ip, derived_geo(host));
        }
        topo.rebuild_inverse();
        topo
    }

    pub fn toolkit(&self, hostname: &str) -> Option<&SynthToolkit> {
        self.toolkits.iter().find(|t| t.hostname == hostname)
    }
}

impl PairParams {
    pub fn base() -> PairParams {
        PairParams {
            delay_base_secs: 0.0005,
            delay_jitter_secs: 0.0001,
            loss_prob: 0.01,
            throughput_bps: 9.4e9,
            retransmit_rate: 0.0,
        }
    }
}

fn ip_octet(ip: &str) -> usize {
    ip.rsplit('.').next().and_then(|o| o.parse().ok()).unwrap_or(0)
}

fn derived_asn(ip: &str) -> u32 {
    let digest = Sha256::digest(ip.as_bytes());
    1000 + u32::from(digest[0]) * 256 + u32::from(digest[1])
}

fn derived_geo(key: &str) -> crate::ingest::GeoPoint {
    let digest = Sha256::digest(key.as_bytes());
    crate::ingest::GeoPoint {
        lat: f64::from(digest[2]) / 255.0 * 160.0 - 80.0,
        lon: f64::from(digest[3]) / 255.0 * 360.0 - 180.0,
    }
}

/// RNG for one generator event, keyed so every event is independent and
/// reproducible in isolation.
pub fn event_rng(seed: u64, src: &str, dst: &str, kind: &str, index: u64) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}|{src}|{dst}|{kind}|{index}").as_bytes());
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

fn binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    (0..n).filter(|_| rng.gen::<f64>() < p).count() as u64
}

/// One latency test minute: a latency record with delay samples and a
/// matching packet-loss record, both with the 600-packet accounting.
pub fn generate_latency_batch(
    src: &SynthToolkit,
    dst: &SynthToolkit,
    params: &PairParams,
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> (PullRecord, PullRecord) {
    let lost = binomial(rng, PACKETS_PER_TEST, params.loss_prob);
    let received = PACKETS_PER_TEST - lost;
    let delays: Vec<f64> = (0..DELAY_SAMPLES)
        .map(|_| params.delay_base_secs + rng.gen::<f64>() * params.delay_jitter_secs)
        .collect();
    let latency = PullRecord {
        test_type: TestType::Latency,
        timestamp,
        source: src.hostname.clone(),
        destination: dst.hostname.clone(),
        values: obj(json!({
            "expected": PACKETS_PER_TEST,
            "received": received,
            "delays": delays,
        })),
    };
    let packet_loss = PullRecord {
        test_type: TestType::PacketLoss,
        timestamp,
        source: src.hostname.clone(),
        destination: dst.hostname.clone(),
        values: obj(json!({
            "expected": PACKETS_PER_TEST,
            "received": received,
        })),
    };
    (latency, packet_loss)
}

/// One iperf3 run: a throughput record and its retransmit count.
pub fn generate_throughput(
    src: &SynthToolkit,
    dst: &SynthToolkit,
    params: &PairParams,
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> (PullRecord, PullRecord) {
    let achieved = params.throughput_bps * (0.9 + rng.gen::<f64>() * 0.1);
    let retransmits = binomial(rng, 1000, params.retransmit_rate);
    let throughput = PullRecord {
        test_type: TestType::Throughput,
        timestamp,
        source: src.hostname.clone(),
        destination: dst.hostname.clone(),
        values: obj(json!({"throughput": achieved, "duration": 25.0})),
    };
    let retrans = PullRecord {
        test_type: TestType::Retransmits,
        timestamp,
        source: src.hostname.clone(),
        destination: dst.hostname.clone(),
        values: obj(json!({"retransmits": retransmits})),
    };
    (throughput, retrans)
}

/// One traceroute, hops straight from the path table.
pub fn generate_trace(
    src: &SynthToolkit,
    dst: &SynthToolkit,
    path: &[String],
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> PullRecord {
    let hops: Vec<Value> = path
        .iter()
        .enumerate()
        .map(|(i, ip)| {
            json!({
                "ip": ip,
                "rtt": 0.001 * (i as f64 + 1.0) + rng.gen::<f64>() * 0.0002,
            })
        })
        .collect();
    PullRecord {
        test_type: TestType::Trace,
        timestamp,
        source: src.hostname.clone(),
        destination: dst.hostname.clone(),
        values: obj(json!({"hops": hops})),
    }
}

/// One HTCondor transfer log line: timestamp, direction, key=value
/// pairs including bytes and packet-loss counters.
pub fn generate_htcondor_line(
    dest_ip: &str,
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> String {
    let ts = chrono::DateTime::from_timestamp(timestamp as i64, 0)
        .expect("timestamp in range")
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let direction = if rng.gen::<bool>() { "upload" } else { "download" };
    let bytes: u64 = rng.gen_range(1_000_000..10_000_000_000);
    let lost: u64 = rng.gen_range(0..20);
    format!("{ts} {direction} Dest={dest_ip} Bytes={bytes} PacketsLost={lost} Duration={:.1}", bytes as f64 / 1.0e8)
}

/// One XRootD transfer summary datagram.
pub fn generate_xrootd(
    src: &SynthToolkit,
    dst: &SynthToolkit,
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> Value {
    json!({
        "timestamp": timestamp,
        "src": src.ip,
        "dst": dst.ip,
        "read_bytes": rng.gen_range(0u64..1_000_000_000),
        "write_bytes": rng.gen_range(0u64..1_000_000_000),
        "rtt": 0.0001 + rng.gen::<f64>() * 0.001,
    })
}

/// Push-form copy of a pull record: endpoints become IPs and every
/// duration field becomes an ISO-8601 string. These are the only
/// format deltas between the two channels.
pub fn push_variant(pull: &PullRecord, topo: &SiteTopology) -> PushRecord {
    let to_ip = |host: &str| {
        topo.ip_for_host(host).map(String::from).unwrap_or_else(|| host.to_string())
    };
    let mut values = pull.values.clone();
    if let Some(Value::Array(delays)) = values.get_mut("delays") {
        for d in delays.iter_mut() {
            if let Some(secs) = d.as_f64() {
                *d = Value::from(to_iso_duration(secs));
            }
        }
    }
    if let Some(Value::Array(hops)) = values.get_mut("hops") {
        for hop in hops.iter_mut() {
            if let Some(rtt) = hop.get("rtt").and_then(Value::as_f64) {
                hop["rtt"] = Value::from(to_iso_duration(rtt));
            }
        }
    }
    PushRecord {
        test_type: pull.test_type,
        timestamp: pull.timestamp,
        source: to_ip(&pull.source),
        destination: to_ip(&pull.destination),
        values,
    }
}

fn obj(v: Value) -> Map<String, Value> {
    v.as_object().expect("object literal").clone()
}

/// What one mock source emits at one instant.
#[derive(Debug, Clone)]
pub enum Emission {
    Perfsonar { toolkit: String, record: PullRecord },
    Htcondor { submit_host: String, line: String },
    Xrootd { datagram: Value },
}

impl Emission {
    pub fn timestamp(&self) -> f64 {
        match self {
            Emission::Perfsonar { record, .. } => record.timestamp,
            Emission::Htcondor { line, .. } => line
                .split_whitespace()
                .next()
                .and_then(|ts| chrono::DateTime::parse_from_rfc3339(ts).ok())
                .map(|dt| dt.timestamp() as f64)
                .unwrap_or(0.0),
            Emission::Xrootd { datagram } => {
                datagram.get("timestamp").and_then(Value::as_f64).unwrap_or(0.0)
            }
        }
    }
}

/// Exact per-type and per-submit-host counts for a generated window.
/// The report command must reproduce these numbers from the store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLedger {
    pub counts: BTreeMap<TestType, u64>,
    pub htcondor_by_host: BTreeMap<String, u64>,
}

impl GeneratorLedger {
    fn count(&mut self, t: TestType) {
        *self.counts.entry(t).or_insert(0) += 1;
    }
}

/// Event indices of one global per-type grid falling in `[t0, t1)`.
/// Event k fires at `(k + 0.5) * day / rate`, so a whole simulated day
/// holds exactly `rate` events and windows compose.
fn grid(rate_per_day: f64, t0: f64, t1: f64) -> impl Iterator<Item = (u64, f64)> {
    let interval = if rate_per_day > 0.0 { 86400.0 / rate_per_day } else { f64::INFINITY };
    let start = ((t0 / interval) - 0.5).ceil().max(0.0) as u64;
    (start..).map(move |k| (k, (k as f64 + 0.5) * interval)).take_while(move |&(_, t)| t < t1)
}

/// Enumerate every emission in `[t0, t1)`. Events of each type form one
/// fixed grid walked round-robin over the pairs, so per-type counts over
/// a window are exact and any window can be regenerated independently.
pub fn generate_window(mesh: &MeshConfig, t0: f64, t1: f64) -> (Vec<Emission>, GeneratorLedger) {
    let mut out = Vec::new();
    let mut ledger = GeneratorLedger::default();
    let pairs = mesh.pairs();
    if pairs.is_empty() {
        return (out, ledger);
    }

    for (k, t) in grid(mesh.rates.latency, t0, t1) {
        let (src, dst) = pairs[k as usize % pairs.len()];
        let params = mesh.pair_params(&src.hostname, &dst.hostname);
        let mut rng = event_rng(mesh.seed, &src.hostname, &dst.hostname, "latency", k);
        let (lat, loss) = generate_latency_batch(src, dst, &params, t, &mut rng);
        ledger.count(TestType::Latency);
        ledger.count(TestType::PacketLoss);
        out.push(Emission::Perfsonar { toolkit: src.hostname.clone(), record: lat });
        out.push(Emission::Perfsonar { toolkit: src.hostname.clone(), record: loss });
    }
    for (k, t) in grid(mesh.rates.throughput, t0, t1) {
        let (src, dst) = pairs[k as usize % pairs.len()];
        let params = mesh.pair_params(&src.hostname, &dst.hostname);
        let mut rng = event_rng(mesh.seed, &src.hostname, &dst.hostname, "throughput", k);
        let (tput, retrans) = generate_throughput(src, dst, &params, t, &mut rng);
        ledger.count(TestType::Throughput);
        ledger.count(TestType::Retransmits);
        out.push(Emission::Perfsonar { toolkit: src.hostname.clone(), record: tput });
        out.push(Emission::Perfsonar { toolkit: src.hostname.clone(), record: retrans });
    }
    for (k, t) in grid(mesh.rates.trace, t0, t1) {
        let (src, dst) = pairs[k as usize % pairs.len()];
        let key = format!("{}|{}", src.hostname, dst.hostname);
        let Some(path) = mesh.path_table.get(&key) else { continue };
        let mut rng = event_rng(mesh.seed, &src.hostname, &dst.hostname, "trace", k);
        let trace = generate_trace(src, dst, path, t, &mut rng);
        ledger.count(TestType::Trace);
        out.push(Emission::Perfsonar { toolkit: src.hostname.clone(), record: trace });
    }
    for (k, t) in grid(mesh.rates.xrootd, t0, t1) {
        let (src, dst) = pairs[k as usize % pairs.len()];
        let mut rng = event_rng(mesh.seed, &src.hostname, &dst.hostname, "xrootd", k);
        let datagram = generate_xrootd(src, dst, t, &mut rng);
        ledger.count(TestType::XrootdTcp);
        out.push(Emission::Xrootd { datagram });
    }

    if !mesh.submit_hosts.is_empty() {
        let topo = mesh.topology();
        for (k, t) in grid(mesh.rates.htcondor, t0, t1) {
            let host = &mesh.submit_hosts[k as usize % mesh.submit_hosts.len()];
            let mut rng = event_rng(mesh.seed, host, "", "htcondor", k);
            // transfers target a random toolkit's storage IP
            let dest = &mesh.toolkits[rng.gen_range(0..mesh.toolkits.len())];
            let dest_ip = topo.ip_for_host(&dest.hostname).unwrap_or(&dest.ip);
            let line = generate_htcondor_line(dest_ip, t, &mut rng);
            ledger.count(TestType::HtcondorXfer);
            *ledger.htcondor_by_host.entry(host.clone()).or_insert(0) += 1;
            out.push(Emission::Htcondor { submit_host: host.clone(), line });
        }
    }

    out.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()));
    (out, ledger)
}
