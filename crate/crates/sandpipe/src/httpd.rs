//! HTTP surfaces: the push endpoint, the token/configuration endpoint,
//! the store's read-only query API, and the collector metrics page.
//!
//! Each server runs on its own thread over `tiny_http` and stops when
//! its handle is dropped.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Method, Response, Server};

use crate::auth::{self, ToolkitRegistry};
use crate::bus::{Broker, Credential, TopicKey};
use crate::clock::Clock;
use crate::collect::CollectMetrics;
use crate::store::{QueryFilter, Store};
use crate::synth::MeshConfig;

pub struct HttpHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl Drop for HttpHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

type Handler = Box<dyn Fn(&mut tiny_http::Request) -> (u16, String) + Send + Sync>;

fn serve(listen: &str, handler: Handler) -> std::io::Result<HttpHandle> {
    let server = Server::http(listen).map_err(|e| std::io::Error::other(e.to_string()))?;
    let addr = server
        .server_addr()
        .to_ip()
        .expect("tcp listener has an ip address");
    let stop = Arc::new(AtomicBool::new(false));
    let join = {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                let mut request = match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(r)) => r,
                    Ok(None) => continue,
                    Err(_) => break,
                };
                let (code, body) = handler(&mut request);
                let response = Response::from_string(body)
                    .with_status_code(code)
                    .with_header(
                        Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap(),
                    );
                let _ = request.respond(response);
            }
        })
    };
    Ok(HttpHandle { addr, stop, join: Some(join) })
}

fn query_param(url: &str, name: &str) -> Option<String> {
    let (_, query) = url.split_once('?')?;
    query.split('&').find_map(|part| {
        let (k, v) = part.split_once('=')?;
        (k == name).then(|| v.replace("%2F", "/").replace("%20", " ").replace('+', " "))
    })
}

fn err_body(msg: &str) -> String {
    serde_json::json!({"error": msg}).to_string()
}

/// `POST /publish/{vhost}/{exchange}?key=<topic>` with a bearer token.
/// The body is the raw record; the response reports how many queues the
/// message reached.
pub fn start_push_endpoint(listen: &str, broker: Broker) -> std::io::Result<HttpHandle> {
    serve(
        listen,
        Box::new(move |request| {
            let url = request.url().to_string();
            let path = url.split('?').next().unwrap_or("");
            let parts: Vec<&str> = path.trim_start_matches('/').split('/').collect();
            if *request.method() != Method::Post || parts.len() != 3 || parts[0] != "publish" {
                return (404, err_body("expected POST /publish/{vhost}/{exchange}?key=..."));
            }
            let (vhost, exchange) = (parts[1].to_string(), parts[2].to_string());
            let Some(key) = query_param(&url, "key") else {
                return (400, err_body("missing key query parameter"));
            };
            let key = match TopicKey::new(&key) {
                Ok(k) => k,
                Err(e) => return (400, err_body(&e.to_string())),
            };
            let token = request.headers().iter().find_map(|h| {
                h.field
                    .as_str()
                    .as_str()
                    .eq_ignore_ascii_case("authorization")
                    .then(|| h.value.as_str().strip_prefix("Bearer ").map(String::from))
                    .flatten()
            });
            let mut body = Vec::new();
            if request.as_reader().read_to_end(&mut body).is_err() {
                return (400, err_body("unreadable body"));
            }
            let publisher = request
                .remote_addr()
                .map(|a| a.ip().to_string())
                .unwrap_or_else(|| "unknown".into());
            let credential = match &token {
                Some(t) => Credential::Token(t),
                None => Credential::Internal,
            };
            match broker.publish(&vhost, &exchange, key, body, &publisher, credential) {
                Ok(routed) => (200, serde_json::json!({"routed": routed}).to_string()),
                Err(crate::bus::BusError::Denied(reason)) => (403, err_body(&reason.to_string())),
                Err(crate::bus::BusError::CredentialRequired { .. }) => {
                    (401, err_body("token required"))
                }
                Err(e) => (404, err_body(&e.to_string())),
            }
        }),
    )
}

/// `GET /config/{hostname}`: the configuration-generator stand-in.
/// Returns the toolkit's mesh entry plus a fresh token; issuance checks
/// that the TCP peer address matches the registered one.
#[allow(clippy::too_many_arguments)]
pub fn start_config_endpoint(
    listen: &str,
    registry: ToolkitRegistry,
    signing_key: ed25519_dalek::SigningKey,
    server_name: String,
    ttl_secs: u64,
    clock: Clock,
    mesh: Option<Arc<MeshConfig>>,
) -> std::io::Result<HttpHandle> {
    serve(
        listen,
        Box::new(move |request| {
            let path = request.url().split('?').next().unwrap_or("").to_string();
            let Some(hostname) = path.strip_prefix("/config/").map(String::from) else {
                return (404, err_body("expected GET /config/{hostname}"));
            };
            let Some(peer) = request.remote_addr().map(|a| a.ip()) else {
                return (400, err_body("no peer address"));
            };
            match auth::issue_token(
                &hostname,
                peer,
                &registry,
                &server_name,
                clock.now(),
                ttl_secs,
                &signing_key,
            ) {
                Ok(token) => {
                    let mesh_entry = mesh
                        .as_ref()
                        .and_then(|m| m.toolkit(&hostname))
                        .map(|t| serde_json::to_value(t).unwrap());
                    let body = serde_json::json!({
                        "hostname": hostname,
                        "token": token,
                        "mesh": mesh_entry,
                    });
                    (200, body.to_string())
                }
                Err(auth::AuthError::UnknownSubject(_)) => (404, err_body("unknown toolkit")),
                Err(auth::AuthError::IpMismatch { .. }) => {
                    (403, err_body("requester address does not match registration"))
                }
                Err(e) => (500, err_body(&e.to_string())),
            }
        }),
    )
}

/// Read-only store API: `GET /query?...` and `GET /stats`.
pub fn start_store_endpoint(listen: &str, store: Store) -> std::io::Result<HttpHandle> {
    serve(
        listen,
        Box::new(move |request| {
            let url = request.url().to_string();
            let path = url.split('?').next().unwrap_or("");
            match path {
                "/stats" => (200, serde_json::to_string(&store.stats()).unwrap()),
                "/query" => {
                    let parse = |name: &str| query_param(&url, name).and_then(|v| v.parse().ok());
                    let filter = QueryFilter {
                        from: parse("from"),
                        to: parse("to"),
                        test_type: query_param(&url, "type"),
                        source: query_param(&url, "source"),
                        dest: query_param(&url, "dest"),
                    };
                    let docs: Vec<serde_json::Value> = store
                        .query(&filter)
                        .into_iter()
                        .map(|d| {
                            serde_json::json!({
                                "id": d.id,
                                "version": d.version,
                                "fields": d.document.fields,
                            })
                        })
                        .collect();
                    (200, serde_json::Value::Array(docs).to_string())
                }
                _ => (404, err_body("expected /query or /stats")),
            }
        }),
    )
}

/// `GET /metrics`: plain counters from the collector.
pub fn start_metrics_endpoint(
    listen: &str,
    metrics: Arc<CollectMetrics>,
) -> std::io::Result<HttpHandle> {
    serve(
        listen,
        Box::new(move |request| match request.url() {
            "/metrics" => (200, metrics.render()),
            _ => (404, err_body("expected /metrics")),
        }),
    )
}
