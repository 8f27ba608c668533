//! In-process message broker: exchanges, queues, bindings, topic routing,
//! acknowledged delivery, and scope-checked publishing.
//!
//! The broker is the substrate the rest of the pipeline is wired onto:
//! collectors publish raw records, the archiver and ingesters consume them,
//! and replay re-publishes archived records through a dedicated exchange.
//! Delivery is at-least-once: unacked messages return to the queue when a
//! consumer goes away, carrying a redelivery flag, and the ingest layer
//! dedups by record ID.

pub mod topic;

pub use topic::{match_topic, Pattern, TopicKey};

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{self, DenyReason};
use crate::clock::Clock;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("invalid topic key: {0:?}")]
    InvalidTopicKey(String),
    #[error("invalid binding pattern: {0:?}")]
    InvalidPattern(String),
    #[error("unknown exchange {vhost}/{name}")]
    UnknownExchange { vhost: String, name: String },
    #[error("unknown queue {0}")]
    UnknownQueue(String),
    #[error("binding target {0} is neither a queue nor an exchange")]
    UnknownTarget(String),
    #[error("exchange {vhost}/{name} already declared with kind {existing:?}")]
    ExchangeKindMismatch {
        vhost: String,
        name: String,
        existing: ExchangeKind,
    },
    #[error("binding {from_exchange} -> {to_exchange} would create a routing cycle")]
    BindingCycle {
        from_exchange: String,
        to_exchange: String,
    },
    #[error("publish denied: {0}")]
    Denied(DenyReason),
    #[error("exchange {vhost}/{name} requires a credential")]
    CredentialRequired { vhost: String, name: String },
    #[error("spill write failed: {0}")]
    Spill(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExchangeKind {
    Topic,
    Fanout,
}

/// A routed payload. Routing copies share the payload bytes.
#[derive(Debug, Clone)]
pub struct Message {
    pub topic: TopicKey,
    pub payload: Arc<Vec<u8>>,
    pub publisher: String,
    pub published_at: f64,
}

/// Credential presented on publish. Internal producers (collector,
/// ingesters, replay) are trusted; remote toolkits must present a token.
pub enum Credential<'a> {
    Internal,
    Token(&'a str),
}

/// Emitted once per upward threshold crossing of a queue's depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthAlert {
    pub queue: String,
    pub depth: usize,
    pub threshold: usize,
    pub at: f64,
}

/// Conservation counters for one queue: inserts == acked + buffered + in-flight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounters {
    pub inserted: u64,
    pub acked: u64,
    pub buffered: usize,
    pub in_flight: usize,
}

struct Slot {
    seq: u64,
    msg: Message,
    redelivered: bool,
}

struct QueueInner {
    buffer: VecDeque<Slot>,
    // delivery id -> (consumer id, slot)
    in_flight: HashMap<u64, (u64, Slot)>,
    next_seq: u64,
    next_delivery: u64,
    above_threshold: bool,
    inserted: u64,
    acked: u64,
    spill: Option<File>,
}

struct QueueState {
    name: String,
    threshold: Option<usize>,
    inner: Mutex<QueueInner>,
    cv: Condvar,
}

struct BindingRec {
    vhost: String,
    source: String,
    pattern: Pattern,
    target: Target,
}

#[derive(Clone, PartialEq, Eq)]
enum Target {
    Queue(String),
    Exchange(String),
}

/// Verification material for credential-protected exchanges.
pub struct TokenGate {
    pub verifying_key: VerifyingKey,
    pub server_name: String,
}

struct Topology {
    exchanges: HashMap<(String, String), ExchangeKind>,
    protected: HashSet<(String, String)>,
    bindings: Vec<BindingRec>,
}

struct BrokerInner {
    topo: RwLock<Topology>,
    queues: RwLock<HashMap<String, Arc<QueueState>>>,
    gate: RwLock<Option<TokenGate>>,
    clock: Clock,
    alerts: Mutex<Vec<DepthAlert>>,
    spill_dir: RwLock<Option<PathBuf>>,
    next_consumer: Mutex<u64>,
}

#[derive(Clone)]
pub struct Broker {
    inner: Arc<BrokerInner>,
}

impl Broker {
    pub fn new(clock: Clock) -> Broker {
        Broker {
            inner: Arc::new(BrokerInner {
                topo: RwLock::new(Topology {
                    exchanges: HashMap::new(),
                    protected: HashSet::new(),
                    bindings: Vec::new(),
                }),
                queues: RwLock::new(HashMap::new()),
                gate: RwLock::new(None),
                clock,
                alerts: Mutex::new(Vec::new()),
                spill_dir: RwLock::new(None),
                next_consumer: Mutex::new(0),
            }),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.inner.clock
    }

    /// Install the verification material used for protected exchanges.
    pub fn set_token_gate(&self, gate: TokenGate) {
        *self.inner.gate.write().unwrap() = Some(gate);
    }

    /// Queues declared after this call spill every insert to
    /// `<dir>/<queue>.spill.jsonl`.
    pub fn set_spill_dir(&self, dir: impl Into<PathBuf>) {
        *self.inner.spill_dir.write().unwrap() = Some(dir.into());
    }

    pub fn declare_exchange(
        &self,
        vhost: &str,
        name: &str,
        kind: ExchangeKind,
    ) -> Result<(), BusError> {
        let mut topo = self.inner.topo.write().unwrap();
        match topo.exchanges.get(&(vhost.to_string(), name.to_string())) {
            Some(existing) if *existing != kind => Err(BusError::ExchangeKindMismatch {
                vhost: vhost.into(),
                name: name.into(),
                existing: *existing,
            }),
            Some(_) => Ok(()), // idempotent
            None => {
                topo.exchanges.insert((vhost.into(), name.into()), kind);
                Ok(())
            }
        }
    }

    /// Mark an exchange as requiring a token on publish.
    pub fn protect_exchange(&self, vhost: &str, name: &str) -> Result<(), BusError> {
        let mut topo = self.inner.topo.write().unwrap();
        if !topo.exchanges.contains_key(&(vhost.to_string(), name.to_string())) {
            return Err(BusError::UnknownExchange {
                vhost: vhost.into(),
                name: name.into(),
            });
        }
        topo.protected.insert((vhost.into(), name.into()));
        Ok(())
    }

    pub fn declare_queue(&self, name: &str, threshold: Option<usize>) -> Result<(), BusError> {
        let mut queues = self.inner.queues.write().unwrap();
        if queues.contains_key(name) {
            return Ok(());
        }
        let spill = match &*self.inner.spill_dir.read().unwrap() {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join(format!("{name}.spill.jsonl")))?,
                )
            }
            None => None,
        };
        queues.insert(
            name.to_string(),
            Arc::new(QueueState {
                name: name.to_string(),
                threshold,
                inner: Mutex::new(QueueInner {
                    buffer: VecDeque::new(),
                    in_flight: HashMap::new(),
                    next_seq: 0,
                    next_delivery: 0,
                    above_threshold: false,
                    inserted: 0,
                    acked: 0,
                    spill,
                }),
                cv: Condvar::new(),
            }),
        );
        Ok(())
    }

    pub fn bind(
        &self,
        vhost: &str,
        source: &str,
        pattern: &str,
        target: &str,
    ) -> Result<(), BusError> {
        let pattern = Pattern::new(pattern)?;
        let queues = self.inner.queues.read().unwrap();
        let mut topo = self.inner.topo.write().unwrap();
        if !topo.exchanges.contains_key(&(vhost.to_string(), source.to_string())) {
            return Err(BusError::UnknownExchange {
                vhost: vhost.into(),
                name: source.into(),
            });
        }
        let resolved = if queues.contains_key(target) {
            Target::Queue(target.to_string())
        } else if topo.exchanges.contains_key(&(vhost.to_string(), target.to_string())) {
            // exchange-to-exchange chains are allowed but must stay acyclic
            if Self::reaches(&topo, vhost, target, source) || source == target {
                return Err(BusError::BindingCycle {
                    from_exchange: source.into(),
                    to_exchange: target.into(),
                });
            }
            Target::Exchange(target.to_string())
        } else {
            return Err(BusError::UnknownTarget(target.to_string()));
        };
        let duplicate = topo.bindings.iter().any(|b| {
            b.vhost == vhost
                && b.source == source
                && b.pattern.as_str() == pattern.as_str()
                && b.target == resolved
        });
        if !duplicate {
            topo.bindings.push(BindingRec {
                vhost: vhost.into(),
                source: source.into(),
                pattern,
                target: resolved,
            });
        }
        Ok(())
    }

    /// Is `to` reachable from `from` over exchange-to-exchange bindings?
    fn reaches(topo: &Topology, vhost: &str, from: &str, to: &str) -> bool {
        let mut stack = vec![from.to_string()];
        let mut seen = HashSet::new();
        while let Some(node) = stack.pop() {
            if node == to {
                return true;
            }
            if !seen.insert(node.clone()) {
                continue;
            }
            for b in &topo.bindings {
                if b.vhost == vhost && b.source == node {
                    if let Target::Exchange(next) = &b.target {
                        stack.push(next.clone());
                    }
                }
            }
        }
        false
    }

    /// Publish a payload. Returns the number of queue insertions performed.
    pub fn publish(
        &self,
        vhost: &str,
        exchange: &str,
        key: TopicKey,
        payload: Vec<u8>,
        publisher: &str,
        credential: Credential<'_>,
    ) -> Result<usize, BusError> {
        let mut publisher = publisher.to_string();
        {
            let topo = self.inner.topo.read().unwrap();
            if !topo.exchanges.contains_key(&(vhost.to_string(), exchange.to_string())) {
                return Err(BusError::UnknownExchange {
                    vhost: vhost.into(),
                    name: exchange.into(),
                });
            }
            if topo.protected.contains(&(vhost.to_string(), exchange.to_string())) {
                let gate = self.inner.gate.read().unwrap();
                let gate = gate.as_ref().ok_or(BusError::CredentialRequired {
                    vhost: vhost.into(),
                    name: exchange.into(),
                })?;
                match credential {
                    Credential::Internal => {
                        return Err(BusError::CredentialRequired {
                            vhost: vhost.into(),
                            name: exchange.into(),
                        })
                    }
                    Credential::Token(token) => {
                        let subject = auth::verify_and_authorize(
                            token,
                            &gate.server_name,
                            self.inner.clock.now(),
                            vhost,
                            exchange,
                            &key,
                            &gate.verifying_key,
                        )
                        .map_err(BusError::Denied)?;
                        publisher = subject;
                    }
                }
            }
        }

        let msg = Message {
            topic: key,
            payload: Arc::new(payload),
            publisher,
            published_at: self.inner.clock.now(),
        };
        self.route(vhost, exchange, &msg)
    }

    fn route(&self, vhost: &str, exchange: &str, msg: &Message) -> Result<usize, BusError> {
        // Resolve target queues first, then insert, so the topology lock is
        // not held while queue locks are taken.
        let mut queues_hit: Vec<String> = Vec::new();
        {
            let topo = self.inner.topo.read().unwrap();
            let mut stack = vec![exchange.to_string()];
            let mut visited = HashSet::new();
            while let Some(ex) = stack.pop() {
                if !visited.insert(ex.clone()) {
                    continue;
                }
                let kind = topo.exchanges[&(vhost.to_string(), ex.clone())];
                for b in &topo.bindings {
                    if b.vhost != vhost || b.source != ex {
                        continue;
                    }
                    let hit = match kind {
                        ExchangeKind::Fanout => true,
                        ExchangeKind::Topic => b.pattern.matches(&msg.topic),
                    };
                    if hit {
                        match &b.target {
                            Target::Queue(q) => queues_hit.push(q.clone()),
                            Target::Exchange(e) => stack.push(e.clone()),
                        }
                    }
                }
            }
        }

        let queues = self.inner.queues.read().unwrap();
        let mut inserted = 0;
        for qname in queues_hit {
            let q = queues
                .get(&qname)
                .ok_or_else(|| BusError::UnknownQueue(qname.clone()))?;
            self.enqueue(q, msg.clone())?;
            inserted += 1;
        }
        Ok(inserted)
    }

    fn enqueue(&self, q: &Arc<QueueState>, msg: Message) -> Result<(), BusError> {
        let mut inner = q.inner.lock().unwrap();
        if let Some(spill) = inner.spill.as_mut() {
            let line = serde_json::json!({
                "topic": msg.topic.as_str(),
                "publisher": msg.publisher,
                "published_at": msg.published_at,
                "payload_b64": base64_encode(&msg.payload),
            });
            writeln!(spill, "{line}")?;
        }
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.buffer.push_back(Slot {
            seq,
            msg,
            redelivered: false,
        });
        inner.inserted += 1;
        let depth = inner.buffer.len();
        if let Some(thr) = q.threshold {
            if depth > thr && !inner.above_threshold {
                inner.above_threshold = true;
                self.inner.alerts.lock().unwrap().push(DepthAlert {
                    queue: q.name.clone(),
                    depth,
                    threshold: thr,
                    at: self.inner.clock.now(),
                });
            }
        }
        drop(inner);
        q.cv.notify_one();
        Ok(())
    }

    /// Insert directly into a queue, bypassing exchange routing. Used for
    /// dead-letter queues.
    pub fn enqueue_direct(
        &self,
        queue: &str,
        topic: TopicKey,
        payload: Vec<u8>,
        publisher: &str,
    ) -> Result<(), BusError> {
        let queues = self.inner.queues.read().unwrap();
        let q = queues
            .get(queue)
            .ok_or_else(|| BusError::UnknownQueue(queue.to_string()))?;
        let msg = Message {
            topic,
            payload: Arc::new(payload),
            publisher: publisher.to_string(),
            published_at: self.inner.clock.now(),
        };
        self.enqueue(q, msg)
    }

    pub fn consume(&self, queue: &str, consumer_name: &str) -> Result<Consumer, BusError> {
        let queues = self.inner.queues.read().unwrap();
        let q = queues
            .get(queue)
            .ok_or_else(|| BusError::UnknownQueue(queue.to_string()))?
            .clone();
        let mut next = self.inner.next_consumer.lock().unwrap();
        let id = *next;
        *next += 1;
        Ok(Consumer {
            queue: q,
            id,
            name: consumer_name.to_string(),
            cancelled: false,
        })
    }

    pub fn queue_depth(&self, queue: &str) -> Result<usize, BusError> {
        let queues = self.inner.queues.read().unwrap();
        let q = queues
            .get(queue)
            .ok_or_else(|| BusError::UnknownQueue(queue.to_string()))?
            .clone();
        drop(queues);
        let depth = q.inner.lock().unwrap().buffer.len();
        Ok(depth)
    }

    pub fn queue_counters(&self, queue: &str) -> Result<QueueCounters, BusError> {
        let queues = self.inner.queues.read().unwrap();
        let q = queues
            .get(queue)
            .ok_or_else(|| BusError::UnknownQueue(queue.to_string()))?;
        let inner = q.inner.lock().unwrap();
        Ok(QueueCounters {
            inserted: inner.inserted,
            acked: inner.acked,
            buffered: inner.buffer.len(),
            in_flight: inner.in_flight.len(),
        })
    }

    /// Drain alert events recorded since the last call.
    pub fn take_alerts(&self) -> Vec<DepthAlert> {
        std::mem::take(&mut self.inner.alerts.lock().unwrap())
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.inner.queues.read().unwrap().keys().cloned().collect()
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// One delivered message awaiting ack.
pub struct Delivery {
    pub message: Message,
    pub redelivered: bool,
    delivery_id: u64,
}

pub struct Consumer {
    queue: Arc<QueueState>,
    id: u64,
    #[allow(dead_code)]
    name: String,
    cancelled: bool,
}

impl Consumer {
    /// Blocking receive with timeout. `None` on timeout.
    pub fn recv(&self, timeout: Duration) -> Option<Delivery> {
        let mut inner = self.queue.inner.lock().unwrap();
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(slot) = inner.buffer.pop_front() {
                let delivery_id = inner.next_delivery;
                inner.next_delivery += 1;
                let redelivered = slot.redelivered;
                let message = slot.msg.clone();
                inner.in_flight.insert(delivery_id, (self.id, slot));
                self.maybe_clear_alert(&mut inner);
                return Some(Delivery {
                    message,
                    redelivered,
                    delivery_id,
                });
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            let (guard, res) = self
                .queue
                .cv
                .wait_timeout(inner, deadline - now)
                .unwrap();
            inner = guard;
            if res.timed_out() && inner.buffer.is_empty() {
                return None;
            }
        }
    }

    /// Non-blocking receive.
    pub fn try_recv(&self) -> Option<Delivery> {
        self.recv(Duration::from_millis(0))
    }

    pub fn ack(&self, delivery: &Delivery) {
        let mut inner = self.queue.inner.lock().unwrap();
        if inner.in_flight.remove(&delivery.delivery_id).is_some() {
            inner.acked += 1;
        }
    }

    /// Return this delivery to the queue immediately (explicit nack).
    pub fn requeue(&self, delivery: &Delivery) {
        let mut inner = self.queue.inner.lock().unwrap();
        if let Some((_, mut slot)) = inner.in_flight.remove(&delivery.delivery_id) {
            slot.redelivered = true;
            let pos = inner
                .buffer
                .iter()
                .position(|s| s.seq > slot.seq)
                .unwrap_or(inner.buffer.len());
            inner.buffer.insert(pos, slot);
        }
        drop(inner);
        self.queue.cv.notify_one();
    }

    /// Cancel the consumer, returning all its unacked deliveries to the
    /// queue in original publish order.
    pub fn cancel(&mut self) {
        if self.cancelled {
            return;
        }
        self.cancelled = true;
        let mut inner = self.queue.inner.lock().unwrap();
        let mine: Vec<u64> = inner
            .in_flight
            .iter()
            .filter(|(_, (cid, _))| *cid == self.id)
            .map(|(did, _)| *did)
            .collect();
        let mut slots: Vec<Slot> = mine
            .into_iter()
            .filter_map(|did| inner.in_flight.remove(&did).map(|(_, s)| s))
            .collect();
        slots.sort_by_key(|s| s.seq);
        // restore at the head region, preserving relative order
        for slot in slots.into_iter().rev() {
            let mut slot = slot;
            slot.redelivered = true;
            inner.buffer.push_front(slot);
        }
        drop(inner);
        self.queue.cv.notify_all();
    }

    fn maybe_clear_alert(&self, inner: &mut QueueInner) {
        if let Some(thr) = self.queue.threshold {
            if inner.above_threshold && inner.buffer.len() <= thr {
                inner.above_threshold = false;
            }
        }
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        self.cancel();
    }
}
