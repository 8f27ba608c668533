//! Wiring: declares the standard bus topology and runs the whole
//! pipeline as one orchestrated process.
//!
//! The flow is the production shape at desk scale. Pushed records enter
//! the protected `osg.ps-push.raw` exchange, the collector's transformer
//! re-publishes them to `osg.ps-push.transformed`, which chains into the
//! fanout `osg.ps.raw`. Polled records are published straight to
//! `osg.ps.raw`. From there every record reaches both the archive queue
//! and `amq.topic`, which routes to the per-type ingester queues.
//! Replay publishes to `osg.ps.replay`, bound into `amq.topic` so
//! replayed records are re-ingested without re-entering the archive.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::archive::{self, Archiver, ARCHIVE_QUEUE, REPLAY_EXCHANGE};
use crate::auth::{self, RegistryEntry, ToolkitRegistry};
use crate::bus::{Broker, BusError, ExchangeKind, TokenGate};
use crate::clock::Clock;
use crate::collect::poller::{
    self, CollectorPool, PUSH_COLLECTOR_QUEUE, PUSH_TRANSFORMED_EXCHANGE, RAW_EXCHANGE,
};
use crate::collect::receivers::{HtcondorReceiver, XrootdReceiver};
use crate::collect::{CollectMetrics, CollectorState, Scheduler, ToolkitEndpoint};
use crate::config::PipelineConfig;
use crate::httpd::{self, HttpHandle};
use crate::ingest::{Ingester, SiteTopology};
use crate::records::TestType;
use crate::store::Store;
use crate::synth::toolkit::MockToolkit;
use crate::synth::{generate_window, Emission, GeneratorLedger, MeshConfig, ToolkitMode};

pub const PUSH_EXCHANGE: &str = "osg.ps-push.raw";
pub const TOPIC_EXCHANGE: &str = "amq.topic";

/// The per-type ingester queues and their `amq.topic` binding patterns.
pub const INGEST_QUEUES: [(&str, &str); 8] = [
    ("ingest.latency", "perfsonar.raw.latency"),
    ("ingest.packet-loss", "perfsonar.raw.packet-loss"),
    ("ingest.throughput", "perfsonar.raw.throughput"),
    ("ingest.retransmits", "perfsonar.raw.retransmits"),
    ("ingest.packet-trace", "perfsonar.raw.packet-trace"),
    ("ingest.htcondor-xfer", "htcondor.raw.xfer"),
    ("ingest.xrootd-tcp", "xrootd.raw.tcp"),
    ("ingest.meta", "perfsonar.meta.#"),
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Auth(#[from] crate::auth::AuthError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
    #[error(transparent)]
    Collect(#[from] crate::collect::CollectError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Setup(String),
}

/// Declare the standard exchanges, queues, and bindings on a fresh
/// broker. Idempotent.
pub fn declare_topology(
    broker: &Broker,
    vhost: &str,
    archive_threshold: Option<usize>,
) -> Result<(), BusError> {
    broker.declare_exchange(vhost, RAW_EXCHANGE, ExchangeKind::Fanout)?;
    broker.declare_exchange(vhost, PUSH_EXCHANGE, ExchangeKind::Topic)?;
    broker.protect_exchange(vhost, PUSH_EXCHANGE)?;
    broker.declare_exchange(vhost, PUSH_TRANSFORMED_EXCHANGE, ExchangeKind::Topic)?;
    broker.declare_exchange(vhost, TOPIC_EXCHANGE, ExchangeKind::Topic)?;
    broker.declare_exchange(vhost, REPLAY_EXCHANGE, ExchangeKind::Topic)?;

    broker.declare_queue(ARCHIVE_QUEUE, archive_threshold)?;
    broker.declare_queue(PUSH_COLLECTOR_QUEUE, None)?;
    for (queue, _) in INGEST_QUEUES {
        broker.declare_queue(queue, None)?;
        broker.declare_queue(&crate::ingest::dead_letter_queue(queue), None)?;
    }

    broker.bind(vhost, PUSH_EXCHANGE, "#", PUSH_COLLECTOR_QUEUE)?;
    broker.bind(vhost, PUSH_TRANSFORMED_EXCHANGE, "#", RAW_EXCHANGE)?;
    broker.bind(vhost, RAW_EXCHANGE, "#", ARCHIVE_QUEUE)?;
    broker.bind(vhost, RAW_EXCHANGE, "#", TOPIC_EXCHANGE)?;
    broker.bind(vhost, REPLAY_EXCHANGE, "#", TOPIC_EXCHANGE)?;
    for (queue, pattern) in INGEST_QUEUES {
        broker.bind(vhost, TOPIC_EXCHANGE, pattern, queue)?;
    }
    Ok(())
}

/// Issues (and transparently refreshes) push tokens for mock toolkits.
struct TokenSource {
    registry: ToolkitRegistry,
    signing_key: ed25519_dalek::SigningKey,
    server_name: String,
    ttl_secs: u64,
    clock: Clock,
    cache: Mutex<std::collections::HashMap<String, String>>,
}

impl TokenSource {
    fn get(&self, hostname: &str) -> Result<String, crate::auth::AuthError> {
        let now = self.clock.now();
        let mut cache = self.cache.lock().unwrap();
        if let Some(token) = cache.get(hostname) {
            if let Some(claims) = auth::decode_claims(token) {
                if (claims.exp as f64) > now + 60.0 {
                    return Ok(token.clone());
                }
            }
        }
        let entry = self
            .registry
            .entries
            .get(hostname)
            .ok_or_else(|| crate::auth::AuthError::UnknownSubject(hostname.to_string()))?;
        let token = auth::issue_token(
            hostname,
            entry.registered_ip,
            &self.registry,
            &self.server_name,
            now,
            self.ttl_secs,
            &self.signing_key,
        )?;
        cache.insert(hostname.to_string(), token.clone());
        Ok(token)
    }
}

/// A running pipeline: all component threads plus the handles tests and
/// the CLI need to poke at it.
pub struct Pipeline {
    pub broker: Broker,
    pub store: Store,
    pub clock: Clock,
    pub topo: Arc<SiteTopology>,
    pub metrics: Arc<CollectMetrics>,
    pub mesh: Option<Arc<MeshConfig>>,
    pub push_addr: std::net::SocketAddr,
    pub store_addr: std::net::SocketAddr,
    pub config_addr: std::net::SocketAddr,
    pub metrics_addr: std::net::SocketAddr,
    ledger: Arc<Mutex<GeneratorLedger>>,
    ledger_path: std::path::PathBuf,
    stop_sources: Arc<AtomicBool>,
    stop_consumers: Arc<AtomicBool>,
    final_poll: Option<(Vec<ToolkitEndpoint>, CollectorState, String)>,
    pool: Option<CollectorPool>,
    threads: Vec<JoinHandle<()>>,
    _toolkits: Arc<Vec<MockToolkit>>,
    _http: Vec<HttpHandle>,
}

impl Pipeline {
    pub fn start(config: &PipelineConfig) -> Result<Pipeline, PipelineError> {
        let clock = config.make_clock();
        let broker = Broker::new(clock.clone());
        if let Some(dir) = &config.bus.spill_dir {
            std::fs::create_dir_all(dir)?;
            broker.set_spill_dir(dir);
        }
        declare_topology(&broker, &config.vhost, config.bus.archive_queue_threshold)?;

        // key material and registry
        if !config.auth.private_key.exists() {
            if let Some(parent) = config.auth.private_key.parent() {
                std::fs::create_dir_all(parent)?;
            }
            auth::generate_keypair(&config.auth.private_key, &config.auth.public_key)?;
        }
        let signing_key = auth::load_signing_key(&config.auth.private_key)?;
        let verifying_key = auth::load_verifying_key(&config.auth.public_key)?;
        broker.set_token_gate(TokenGate {
            verifying_key,
            server_name: config.auth.server_name.clone(),
        });

        let mesh: Option<Arc<MeshConfig>> = if config.synth.enabled {
            let mesh = match &config.synth.mesh {
                Some(path) => MeshConfig::load(path)?,
                None => MeshConfig::demo(config.collector.seed, config.synth.demo_toolkits),
            };
            Some(Arc::new(mesh))
        } else {
            None
        };

        let registry = if config.auth.registry.exists() {
            ToolkitRegistry::load(&config.auth.registry)?
        } else if let Some(mesh) = &mesh {
            // synth toolkits push from loopback at desk scale
            let mut registry = ToolkitRegistry::default();
            for t in &mesh.toolkits {
                registry.entries.insert(
                    t.hostname.clone(),
                    RegistryEntry {
                        registered_ip: "127.0.0.1".parse().unwrap(),
                        allowed_scope: format!(
                            "{}.write:{}/{}/perfsonar.raw.*",
                            config.auth.server_name, config.vhost, PUSH_EXCHANGE
                        ),
                    },
                );
            }
            registry.save(&config.auth.registry)?;
            registry
        } else {
            ToolkitRegistry::default()
        };

        let topo = Arc::new(if config.topology.exists() {
            SiteTopology::load(&config.topology)?
        } else if let Some(mesh) = &mesh {
            let topo = mesh.topology();
            topo.save(&config.topology)?;
            topo
        } else {
            return Err(PipelineError::Setup(format!(
                "topology file {} not found",
                config.topology.display()
            )));
        });

        let store = Store::open(&config.store.path)?;
        let metrics = Arc::new(CollectMetrics::default());
        let stop_sources = Arc::new(AtomicBool::new(false));
        let stop_consumers = Arc::new(AtomicBool::new(false));
        let mut threads: Vec<JoinHandle<()>> = Vec::new();

        // ingesters, one per queue
        for (queue, _) in INGEST_QUEUES {
            let ingester = Ingester {
                broker: broker.clone(),
                queue: queue.to_string(),
                store: store.clone(),
                topo: Arc::clone(&topo),
            };
            let stop = Arc::clone(&stop_consumers);
            threads.push(std::thread::spawn(move || ingester.run(&stop)));
        }

        // archiver + periodic upload
        std::fs::create_dir_all(&config.archive.spool_dir)?;
        let archiver = Archiver::new(&config.archive.spool_dir, clock.clone())?;
        {
            let broker = broker.clone();
            let stop = Arc::clone(&stop_consumers);
            threads.push(std::thread::spawn(move || {
                if let Err(e) = archive::run_archiver(&broker, archiver, &stop) {
                    log::error!("archiver stopped: {e}");
                }
            }));
        }
        if let Some(upload) = config.archive.upload_dir.clone() {
            std::fs::create_dir_all(&upload)?;
            let spool = config.archive.spool_dir.clone();
            let stop = Arc::clone(&stop_consumers);
            threads.push(std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if let Err(e) = archive::upload_closed(&spool, &upload) {
                        log::error!("segment upload failed: {e}");
                    }
                    std::thread::sleep(Duration::from_millis(100));
                }
                let _ = archive::upload_closed(&spool, &upload);
            }));
        }

        // push transformer
        std::fs::create_dir_all(&config.collector.state_dir)?;
        let state = CollectorState::open(&config.collector.state_dir)?;
        let polled_hosts: Vec<String> = mesh
            .as_ref()
            .map(|m| {
                m.toolkits
                    .iter()
                    .filter(|t| t.mode != ToolkitMode::Push)
                    .map(|t| t.hostname.clone())
                    .collect()
            })
            .unwrap_or_default();
        {
            let broker = broker.clone();
            let vhost = config.vhost.clone();
            let state = state.clone();
            let topo = Arc::clone(&topo);
            let stop = Arc::clone(&stop_consumers);
            threads.push(std::thread::spawn(move || {
                if let Err(e) = poller::run_push_transformer(
                    &broker,
                    &vhost,
                    &state,
                    &topo,
                    &polled_hosts,
                    &stop,
                ) {
                    log::error!("push transformer stopped: {e}");
                }
            }));
        }

        // receivers
        let htcondor = HtcondorReceiver::bind(&config.collector.htcondor_listen)?;
        let xrootd = XrootdReceiver::bind(&config.collector.xrootd_listen)?;
        let htcondor_addr = htcondor.local_addr;
        let xrootd_addr = xrootd.local_addr;
        let mut allowed = config.collector.htcondor_allowed.clone();
        if let Some(mesh) = &mesh {
            allowed.extend(mesh.submit_hosts.iter().cloned());
        }
        for handle in crate::collect::receivers::spawn_receivers(
            broker.clone(),
            config.vhost.clone(),
            RAW_EXCHANGE.to_string(),
            htcondor,
            xrootd,
            allowed,
            Arc::clone(&metrics),
            Arc::clone(&stop_consumers),
        ) {
            threads.push(std::thread::spawn(move || {
                if let Err(e) = handle.join().expect("receiver thread") {
                    log::error!("receiver stopped: {e}");
                }
            }));
        }

        // mock toolkits + collector pool
        let mut toolkits = Vec::new();
        let mut endpoints = Vec::new();
        if let Some(mesh) = &mesh {
            for t in &mesh.toolkits {
                let mock = MockToolkit::start(&t.hostname, t.mode)?;
                if t.mode != ToolkitMode::Push {
                    endpoints.push(ToolkitEndpoint {
                        hostname: t.hostname.clone(),
                        base_url: mock.base_url.clone(),
                        meshes: vec!["demo".into()],
                        test_types: TestType::PERFSONAR.to_vec(),
                    });
                }
                toolkits.push(mock);
            }
        }
        let toolkits = Arc::new(toolkits);
        let final_poll = (!endpoints.is_empty()).then(|| {
            (endpoints.clone(), state.clone(), config.vhost.clone())
        });
        let pool = if endpoints.is_empty() {
            None
        } else {
            let scheduler = Arc::new(Scheduler::new(
                config.collector.poll_interval_secs,
                config.collector.jitter_secs,
                config.collector.seed,
            ));
            let job_broker = broker.clone();
            let job_state = state.clone();
            let job_vhost = config.vhost.clone();
            Some(CollectorPool::start(
                config.collector.pool_width,
                endpoints,
                state.clone(),
                scheduler,
                clock.clone(),
                Arc::clone(&metrics),
                Arc::new(move |endpoint: &ToolkitEndpoint| {
                    poller::poll_toolkit(endpoint, &job_state, &job_broker, &job_vhost)
                }),
                Duration::from_millis(5),
            ))
        };

        // synthetic mesh driver
        let ledger = Arc::new(Mutex::new(GeneratorLedger::default()));
        let ledger_path = config.collector.state_dir.join("ledger.json");
        if let Some(mesh) = &mesh {
            let token_source = TokenSource {
                registry: registry.clone(),
                signing_key: signing_key.clone(),
                server_name: config.auth.server_name.clone(),
                ttl_secs: config.auth.token_ttl_secs,
                clock: clock.clone(),
                cache: Mutex::new(Default::default()),
            };
            let mesh = Arc::clone(mesh);
            let toolkits = Arc::clone(&toolkits);
            let topo = Arc::clone(&topo);
            let broker = broker.clone();
            let vhost = config.vhost.clone();
            let clock = clock.clone();
            let ledger = Arc::clone(&ledger);
            let ledger_path = ledger_path.clone();
            let stop = Arc::clone(&stop_sources);
            threads.push(std::thread::spawn(move || {
                run_mesh_driver(
                    &mesh,
                    &toolkits,
                    &topo,
                    &broker,
                    &vhost,
                    &clock,
                    &token_source,
                    htcondor_addr,
                    xrootd_addr,
                    &ledger,
                    &ledger_path,
                    &stop,
                );
            }));
        }

        // HTTP surfaces
        let push_http = httpd::start_push_endpoint(&config.push_listen, broker.clone())?;
        let store_http = httpd::start_store_endpoint(&config.store.listen, store.clone())?;
        let config_http = httpd::start_config_endpoint(
            &config.auth.listen,
            registry,
            signing_key,
            config.auth.server_name.clone(),
            config.auth.token_ttl_secs,
            clock.clone(),
            mesh.clone(),
        )?;
        let metrics_http =
            httpd::start_metrics_endpoint(&config.collector.metrics_listen, Arc::clone(&metrics))?;

        Ok(Pipeline {
            broker,
            store,
            clock,
            topo,
            metrics,
            mesh,
            push_addr: push_http.addr,
            store_addr: store_http.addr,
            config_addr: config_http.addr,
            metrics_addr: metrics_http.addr,
            ledger,
            ledger_path,
            stop_sources,
            stop_consumers,
            final_poll,
            pool,
            threads,
            _toolkits: toolkits,
            _http: vec![push_http, store_http, config_http, metrics_http],
        })
    }

    pub fn ledger(&self) -> GeneratorLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn ledger_path(&self) -> &std::path::Path {
        &self.ledger_path
    }

    /// Ordered shutdown: stop the sources, drain the bus, stop the
    /// consumers, join everything. Returns once the store is flushed.
    pub fn shutdown(mut self) -> Result<(), PipelineError> {
        self.stop_sources.store(true, Ordering::Relaxed);
        if let Some(pool) = self.pool.take() {
            pool.shutdown();
        }
        // sweep anything still sitting unpolled in the mock archives so
        // the store ends up covering the generator ledger exactly
        if let Some((endpoints, state, vhost)) = &self.final_poll {
            for endpoint in endpoints {
                if state.get(&endpoint.hostname).push_detected {
                    continue;
                }
                if let Err(e) = poller::poll_toolkit(endpoint, state, &self.broker, vhost) {
                    log::warn!("final poll of {} failed: {e}", endpoint.hostname);
                }
            }
        }
        // let in-flight datagrams and ack frames land
        std::thread::sleep(Duration::from_millis(200));
        // wait for the bus to drain before stopping consumers
        let deadline = std::time::Instant::now() + Duration::from_secs(30);
        loop {
            let depth: usize = self
                .broker
                .queue_names()
                .iter()
                .filter(|q| !q.ends_with(".dlq"))
                .map(|q| self.broker.queue_depth(q).unwrap_or(0))
                .sum();
            if depth == 0 || std::time::Instant::now() > deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        self.stop_consumers.store(true, Ordering::Relaxed);
        for thread in self.threads.drain(..) {
            let _ = thread.join();
        }
        Ok(())
    }
}

/// Turn generator emissions into live traffic: offer pulls to the mock
/// archives, push via the token-gated exchange, ship HTCondor lines over
/// TCP, fire XRootD datagrams over UDP.
#[allow(clippy::too_many_arguments)]
fn run_mesh_driver(
    mesh: &MeshConfig,
    toolkits: &[MockToolkit],
    topo: &SiteTopology,
    broker: &Broker,
    vhost: &str,
    clock: &Clock,
    tokens: &TokenSource,
    htcondor_addr: std::net::SocketAddr,
    xrootd_addr: std::net::SocketAddr,
    ledger: &Mutex<GeneratorLedger>,
    ledger_path: &std::path::Path,
    stop: &AtomicBool,
) {
    let udp = std::net::UdpSocket::bind("127.0.0.1:0").expect("udp socket");
    let mut condor_pending: std::collections::HashMap<String, Vec<String>> = Default::default();
    let mut last = clock.now();
    while !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(20));
        let now = clock.now();
        if now <= last {
            continue;
        }
        let (emissions, window_ledger) = generate_window(mesh, last, now);
        last = now;
        for emission in emissions {
            match emission {
                Emission::Perfsonar { toolkit, record } => {
                    let Some(mock) = toolkits.iter().find(|t| t.hostname == toolkit) else {
                        continue;
                    };
                    if mock.mode != ToolkitMode::Push {
                        mock.offer(record.clone());
                    }
                    if mock.mode != ToolkitMode::Pull {
                        match tokens.get(&toolkit) {
                            Ok(token) => {
                                if let Err(e) = crate::synth::toolkit::push_record(
                                    broker,
                                    vhost,
                                    PUSH_EXCHANGE,
                                    &record,
                                    topo,
                                    &toolkit,
                                    &token,
                                ) {
                                    // denied pushes are logged, the toolkit carries on
                                    log::warn!("push from {toolkit} failed: {e}");
                                }
                            }
                            Err(e) => log::warn!("no token for {toolkit}: {e}"),
                        }
                    }
                }
                Emission::Htcondor { submit_host, line } => {
                    condor_pending.entry(submit_host).or_default().push(line);
                }
                Emission::Xrootd { datagram } => {
                    let _ = udp.send_to(datagram.to_string().as_bytes(), xrootd_addr);
                }
            }
        }
        for (host, lines) in condor_pending.iter_mut() {
            if lines.is_empty() {
                continue;
            }
            match crate::collect::receivers::ship_htcondor_lines(htcondor_addr, host, lines, 0) {
                Ok(acked) => {
                    lines.drain(..acked.min(lines.len()));
                }
                Err(e) => log::warn!("htcondor shipping from {host} failed: {e}"),
            }
        }
        {
            let mut cumulative = ledger.lock().unwrap();
            for (t, n) in window_ledger.counts {
                *cumulative.counts.entry(t).or_insert(0) += n;
            }
            for (h, n) in window_ledger.htcondor_by_host {
                *cumulative.htcondor_by_host.entry(h).or_insert(0) += n;
            }
            let _ = std::fs::write(
                ledger_path,
                serde_json::to_string_pretty(&*cumulative).unwrap(),
            );
        }
    }
}
