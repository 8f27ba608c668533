//! Mock perfSONAR toolkit: the esmond-like pull API and the push client.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::bus::{Broker, BusError, Credential, TopicKey};
use crate::ingest::SiteTopology;
use crate::records::{PullRecord, RawRecord, TestType};

use super::{push_variant, ToolkitMode};

/// One mock toolkit. In pull or both mode it serves its measurement
/// archive over HTTP; records are handed to it by the mesh driver via
/// [`MockToolkit::offer`].
pub struct MockToolkit {
    pub hostname: String,
    pub mode: ToolkitMode,
    pub base_url: String,
    records: Arc<Mutex<Vec<PullRecord>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockToolkit {
    /// Start the archive HTTP server on an ephemeral local port.
    /// Push-only toolkits get a server too; it simply never fills.
    pub fn start(hostname: &str, mode: ToolkitMode) -> Result<MockToolkit, std::io::Error> {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let base_url = format!("http://{}", server.server_addr());
        let records: Arc<Mutex<Vec<PullRecord>>> = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let handle = {
            let records = Arc::clone(&records);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let request = match server.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(r)) => r,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let response = serve(&records, request.url());
                    let _ = match response {
                        Ok(body) => request.respond(
                            tiny_http::Response::from_string(body).with_header(
                                tiny_http::Header::from_bytes(
                                    &b"Content-Type"[..],
                                    &b"application/json"[..],
                                )
                                .unwrap(),
                            ),
                        ),
                        Err(code) => request
                            .respond(tiny_http::Response::from_string("bad request").with_status_code(code)),
                    };
                }
            })
        };

        Ok(MockToolkit {
            hostname: hostname.to_string(),
            mode,
            base_url,
            records,
            stop,
            handle: Some(handle),
        })
    }

    /// Make a measurement visible on the pull API.
    pub fn offer(&self, record: PullRecord) {
        self.records.lock().unwrap().push(record);
    }

    pub fn record_count(&self) -> usize {
        self.records.lock().unwrap().len()
    }
}

impl Drop for MockToolkit {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve(records: &Mutex<Vec<PullRecord>>, url: &str) -> Result<String, u16> {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    if path != "/measurements" {
        return Err(404);
    }
    let mut test_type = None;
    let mut since = 0.0f64;
    for part in query.split('&') {
        match part.split_once('=') {
            Some(("type", v)) => test_type = TestType::from_query(v),
            Some(("since", v)) => since = v.parse().map_err(|_| 400u16)?,
            _ => {}
        }
    }
    let test_type = test_type.ok_or(400u16)?;
    let records = records.lock().unwrap();
    let matching: Vec<&PullRecord> = records
        .iter()
        .filter(|r| r.test_type == test_type && r.timestamp > since)
        .collect();
    Ok(serde_json::to_string(&matching).unwrap())
}

/// Push one measurement to the protected push exchange, presenting the
/// toolkit's token. The record travels in push form: IP endpoints, ISO
/// duration strings.
pub fn push_record(
    broker: &Broker,
    vhost: &str,
    exchange: &str,
    record: &PullRecord,
    topo: &SiteTopology,
    publisher: &str,
    token: &str,
) -> Result<usize, BusError> {
    let push = push_variant(record, topo);
    let key = TopicKey::new(format!("perfsonar.raw.{}", record.test_type.topic_word()))
        .expect("generated key is valid");
    broker.publish(
        vhost,
        exchange,
        key,
        RawRecord::Push(push).to_bytes(),
        publisher,
        Credential::Token(token),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::MeshConfig;

    #[test]
    fn pull_api_filters_by_type_and_since() {
        let mesh = MeshConfig::demo(2, 2);
        let toolkit = MockToolkit::start("ps0.site0.example.edu", ToolkitMode::Pull).unwrap();
        let (emissions, _) = crate::synth::generate_window(&mesh, 0.0, 1200.0);
        let mut latency_after_600 = 0;
        for e in emissions {
            if let crate::synth::Emission::Perfsonar { record, .. } = e {
                if record.test_type == TestType::Latency && record.timestamp > 600.0 {
                    latency_after_600 += 1;
                }
                toolkit.offer(record);
            }
        }
        assert!(latency_after_600 > 0);

        let fetched = crate::collect::poller::fetch_measurements(
            &toolkit.base_url,
            TestType::Latency,
            600.0,
        )
        .unwrap();
        assert_eq!(fetched.len(), latency_after_600);
        assert!(fetched.iter().all(|r| r.timestamp > 600.0));

        let err = ureq::get(&format!("{}/measurements", toolkit.base_url)).call();
        assert!(err.is_err(), "missing type param must be a 400");
    }
}
