//! The poll worker pool and the push-stream transformer.
//!
//! Workers fetch new records from toolkit measurement archives over the
//! esmond-like HTTP API (`GET /measurements?type=<t>&since=<epoch>`),
//! publish them to the raw exchange, and advance the state mark only
//! through records whose publish was accepted. Each worker owns exactly
//! one toolkit at a time.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::bus::{Broker, Credential, TopicKey};
use crate::clock::Clock;
use crate::ingest::SiteTopology;
use crate::records::{PullRecord, RawRecord};

use super::{CollectError, CollectMetrics, CollectorState, Scheduler, ToolkitEndpoint};

pub const RAW_EXCHANGE: &str = "osg.ps.raw";
pub const PUSH_TRANSFORMED_EXCHANGE: &str = "osg.ps-push.transformed";
/// Queue the collector reads pushed data from, bound to `osg.ps-push.raw`.
pub const PUSH_COLLECTOR_QUEUE: &str = "osg.ps-push.collector";

/// Fetch records newer than `since` for one test type.
pub fn fetch_measurements(
    base_url: &str,
    test_type: crate::records::TestType,
    since: f64,
) -> Result<Vec<PullRecord>, String> {
    let url = format!(
        "{base_url}/measurements?type={}&since={since}",
        test_type.as_str()
    );
    let body = ureq::get(&url)
        .timeout(Duration::from_secs(10))
        .call()
        .map_err(|e| e.to_string())?
        .into_string()
        .map_err(|e| e.to_string())?;
    serde_json::from_str(&body).map_err(|e| e.to_string())
}

/// Poll one toolkit across all its test types. Returns the number of
/// records published. State advances only through accepted publishes;
/// an HTTP failure leaves state untouched for the next schedule.
pub fn poll_toolkit(
    endpoint: &ToolkitEndpoint,
    state: &CollectorState,
    broker: &Broker,
    vhost: &str,
) -> Result<usize, CollectError> {
    let mut published = 0;
    for &test_type in &endpoint.test_types {
        let since = state
            .get(&endpoint.hostname)
            .last_collected
            .get(&test_type)
            .copied()
            .unwrap_or(0.0);
        let records = fetch_measurements(&endpoint.base_url, test_type, since)
            .map_err(|e| CollectError::Http(endpoint.hostname.clone(), e))?;
        for record in records {
            let ts = record.timestamp;
            let key = TopicKey::new(format!("perfsonar.raw.{}", test_type.topic_word()))
                .expect("static key");
            let payload = RawRecord::Pull(record).to_bytes();
            broker.publish(vhost, RAW_EXCHANGE, key, payload, &endpoint.hostname, Credential::Internal)?;
            // the mark moves only after the publish was accepted
            state.advance_mark(&endpoint.hostname, test_type, ts)?;
            published += 1;
        }
    }
    Ok(published)
}

pub type PollJob = Arc<dyn Fn(&ToolkitEndpoint) -> Result<usize, CollectError> + Send + Sync>;

/// Bounded worker pool driven by the scheduler. Generic over the poll
/// action so tests can substitute an instrumented job.
pub struct CollectorPool {
    handles: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
}

impl CollectorPool {
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        width: usize,
        endpoints: Vec<ToolkitEndpoint>,
        state: CollectorState,
        scheduler: Arc<Scheduler>,
        clock: Clock,
        metrics: Arc<CollectMetrics>,
        job: PollJob,
        tick: Duration,
    ) -> CollectorPool {
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel::<ToolkitEndpoint>();
        let rx = Arc::new(Mutex::new(rx));
        // a toolkit is in-flight from dispatch until its worker finishes
        let in_flight: Arc<Mutex<std::collections::HashSet<String>>> =
            Arc::new(Mutex::new(Default::default()));

        let mut handles = Vec::new();
        for _ in 0..width {
            let rx = Arc::clone(&rx);
            let metrics = Arc::clone(&metrics);
            let in_flight = Arc::clone(&in_flight);
            let job = Arc::clone(&job);
            handles.push(std::thread::spawn(move || loop {
                let next = {
                    let rx = rx.lock().unwrap();
                    rx.recv_timeout(Duration::from_millis(50))
                };
                match next {
                    Ok(endpoint) => {
                        metrics.enter_poll();
                        let started = std::time::Instant::now();
                        let result = job(&endpoint);
                        let micros = started.elapsed().as_micros() as u64;
                        match result {
                            Ok(n) => metrics.record_poll(micros, n as u64, true),
                            Err(e) => {
                                log::debug!("poll {} failed: {e}", endpoint.hostname);
                                metrics.record_poll(micros, 0, false);
                            }
                        }
                        metrics.exit_poll();
                        in_flight.lock().unwrap().remove(&endpoint.hostname);
                    }
                    Err(mpsc::RecvTimeoutError::Timeout) => continue,
                    Err(mpsc::RecvTimeoutError::Disconnected) => return,
                }
            }));
        }

        // scheduler thread
        {
            let stop = Arc::clone(&stop);
            let metrics = Arc::clone(&metrics);
            handles.push(std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let now = clock.now();
                    for hostname in scheduler.due(&endpoints, &state, now) {
                        let mut in_flight = in_flight.lock().unwrap();
                        if in_flight.contains(&hostname) {
                            continue; // one worker per toolkit at a time
                        }
                        let Some(endpoint) = endpoints.iter().find(|e| e.hostname == hostname)
                        else {
                            continue;
                        };
                        if scheduler.mark_dispatched(&state, &hostname, now).is_ok() {
                            in_flight.insert(hostname.clone());
                            metrics.pending.fetch_add(1, Ordering::SeqCst);
                            if tx.send(endpoint.clone()).is_err() {
                                return;
                            }
                        }
                    }
                    std::thread::sleep(tick);
                }
                // dropping tx lets workers drain and exit
            }));
        }

        CollectorPool { handles, stop }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for CollectorPool {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}

/// Consume the pushed-data queue: re-publish every record onto the
/// transformed exchange and detect toolkits that have begun pushing.
/// Detection resolves the pushed source IP through the topology map; a
/// push from an unregistered host changes nothing.
pub fn run_push_transformer(
    broker: &Broker,
    vhost: &str,
    state: &CollectorState,
    topo: &SiteTopology,
    polled_hostnames: &[String],
    stop: &AtomicBool,
) -> Result<(), CollectError> {
    let consumer = broker.consume(PUSH_COLLECTOR_QUEUE, "push-transformer")?;
    loop {
        match consumer.recv(Duration::from_millis(20)) {
            Some(delivery) => {
                let msg = &delivery.message;
                broker.publish(
                    vhost,
                    PUSH_TRANSFORMED_EXCHANGE,
                    msg.topic.clone(),
                    msg.payload.as_ref().clone(),
                    &msg.publisher,
                    Credential::Internal,
                )?;
                if let Ok(RawRecord::Push(push)) = RawRecord::from_bytes(&msg.payload) {
                    if let Some(host) = topo.host_for_ip(&push.source) {
                        if polled_hostnames.iter().any(|h| h == host)
                            && !state.get(host).push_detected
                        {
                            log::info!("push detected from {host}; polling stops");
                            state.mark_push_detected(host)?;
                        }
                    }
                }
                consumer.ack(&delivery);
            }
            None => {
                if stop.load(Ordering::Relaxed) {
                    return Ok(());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::ExchangeKind;
    use crate::records::TestType;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn pool_respects_width_and_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let state = CollectorState::open(dir.path()).unwrap();
        let scheduler = Arc::new(Scheduler::new(300.0, 60.0, 7));
        // virtual clock: one simulated hour in ~0.5 real seconds
        let clock = Clock::virtual_from(0.0, 7200.0);
        let metrics = Arc::new(CollectMetrics::default());
        let width = 3;

        let concurrent = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let polls: Arc<Mutex<Vec<(String, f64)>>> = Arc::new(Mutex::new(Vec::new()));
        let job: PollJob = {
            let concurrent = Arc::clone(&concurrent);
            let peak = Arc::clone(&peak);
            let polls = Arc::clone(&polls);
            let clock = clock.clone();
            Arc::new(move |e: &ToolkitEndpoint| {
                let c = concurrent.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(c, Ordering::SeqCst);
                polls.lock().unwrap().push((e.hostname.clone(), clock.now()));
                std::thread::sleep(Duration::from_millis(2));
                concurrent.fetch_sub(1, Ordering::SeqCst);
                Ok(0)
            })
        };

        let endpoints: Vec<ToolkitEndpoint> = (0..10)
            .map(|i| ToolkitEndpoint {
                hostname: format!("ps{i}.example.edu"),
                base_url: String::new(),
                meshes: vec![],
                test_types: vec![TestType::Latency],
            })
            .collect();

        let pool = CollectorPool::start(
            width,
            endpoints,
            state,
            scheduler,
            clock.clone(),
            metrics,
            job,
            Duration::from_millis(2),
        );
        while clock.now() < 3600.0 {
            std::thread::sleep(Duration::from_millis(10));
        }
        pool.shutdown();

        assert!(peak.load(Ordering::SeqCst) <= width);
        let polls = polls.lock().unwrap();
        // every toolkit got polled repeatedly over the simulated hour
        for i in 0..10 {
            let host = format!("ps{i}.example.edu");
            let count = polls.iter().filter(|(h, _)| h == &host).count();
            assert!(count >= 2, "{host} polled {count} times");
        }
    }

    #[test]
    fn push_transformer_detects_and_forwards() {
        let clock = Clock::manual(0.0);
        let broker = Broker::new(clock);
        broker.declare_exchange("osg-nma", "osg.ps-push.raw", ExchangeKind::Topic).unwrap();
        broker
            .declare_exchange("osg-nma", PUSH_TRANSFORMED_EXCHANGE, ExchangeKind::Fanout)
            .unwrap();
        broker.declare_queue(PUSH_COLLECTOR_QUEUE, None).unwrap();
        broker.declare_queue("transformed-out", None).unwrap();
        broker.bind("osg-nma", "osg.ps-push.raw", "#", PUSH_COLLECTOR_QUEUE).unwrap();
        broker.bind("osg-nma", PUSH_TRANSFORMED_EXCHANGE, "#", "transformed-out").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let state = CollectorState::open(dir.path()).unwrap();
        let mut topo = SiteTopology::default();
        topo.add_host("ps0.example.edu", "192.0.2.10", "SiteA", "osg");

        let push = RawRecord::Push(crate::records::PushRecord {
            test_type: TestType::Latency,
            timestamp: 1.0,
            source: "192.0.2.10".into(),
            destination: "192.0.2.20".into(),
            values: Default::default(),
        });
        broker
            .publish(
                "osg-nma",
                "osg.ps-push.raw",
                TopicKey::new("perfsonar.raw.latency").unwrap(),
                push.to_bytes(),
                "ps0.example.edu",
                Credential::Internal,
            )
            .unwrap();
        // unknown source: ignored by the detector
        let unknown = RawRecord::Push(crate::records::PushRecord {
            test_type: TestType::Latency,
            timestamp: 2.0,
            source: "198.51.100.77".into(),
            destination: "192.0.2.20".into(),
            values: Default::default(),
        });
        broker
            .publish(
                "osg-nma",
                "osg.ps-push.raw",
                TopicKey::new("perfsonar.raw.latency").unwrap(),
                unknown.to_bytes(),
                "mystery",
                Credential::Internal,
            )
            .unwrap();

        let stop = AtomicBool::new(false);
        let polled = vec!["ps0.example.edu".to_string()];
        std::thread::scope(|s| {
            let broker2 = broker.clone();
            let state2 = state.clone();
            let topo = &topo;
            let polled = &polled;
            let stop = &stop;
            let handle = s.spawn(move || {
                run_push_transformer(&broker2, "osg-nma", &state2, topo, polled, stop)
            });
            while broker.queue_depth(PUSH_COLLECTOR_QUEUE).unwrap() > 0 {
                std::thread::sleep(Duration::from_millis(5));
            }
            std::thread::sleep(Duration::from_millis(30));
            stop.store(true, Ordering::Relaxed);
            handle.join().unwrap().unwrap();
        });

        assert!(state.get("ps0.example.edu").push_detected);
        assert!(!state.get("mystery").push_detected);
        assert_eq!(broker.queue_depth("transformed-out").unwrap(), 2);
    }
}
