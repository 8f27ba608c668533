//! Network receivers for sources that report on their own schedule.
//!
//! HTCondor transfer logs arrive as newline-delimited text over TCP with
//! a hostname handshake and windowed cumulative acks, so a shipper can
//! resend from its last acked line after a drop. XRootD summaries arrive
//! as one JSON datagram per transfer over UDP, fire-and-forget.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::bus::{Broker, Credential, TopicKey};
use crate::ingest::htcondor::WrappedLine;

use super::{CollectError, CollectMetrics};

pub const HTCONDOR_TOPIC: &str = "htcondor.raw.xfer";
pub const XROOTD_TOPIC: &str = "xrootd.raw.tcp";
/// Lines per cumulative `ACK <count>` frame.
pub const HTCONDOR_ACK_WINDOW: usize = 16;

/// TCP receiver for HTCondor transfer log lines.
///
/// Protocol: the shipper opens a connection and sends `HELLO <hostname>`.
/// If the hostname is on the allow list the receiver replies
/// `OK <window>`, otherwise `ERR unauthorized` and closes. The shipper
/// then streams one log line per text line; the receiver replies
/// `ACK <n>` with the cumulative accepted count every `<window>` lines
/// and once more at EOF.
pub struct HtcondorReceiver {
    listener: TcpListener,
    pub local_addr: SocketAddr,
}

impl HtcondorReceiver {
    pub fn bind(addr: &str) -> std::io::Result<HtcondorReceiver> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        Ok(HtcondorReceiver { listener, local_addr })
    }

    /// Accept and serve connections until `stop` is set. Each accepted
    /// line is wrapped with the reporting host and published.
    pub fn run(
        &self,
        broker: &Broker,
        vhost: &str,
        exchange: &str,
        allowed_hosts: &[String],
        metrics: &CollectMetrics,
        stop: &AtomicBool,
    ) -> Result<(), CollectError> {
        while !stop.load(Ordering::Relaxed) {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    if let Err(e) =
                        serve_shipper(stream, broker, vhost, exchange, allowed_hosts, metrics)
                    {
                        log::debug!("htcondor connection ended: {e}");
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

fn serve_shipper(
    stream: TcpStream,
    broker: &Broker,
    vhost: &str,
    exchange: &str,
    allowed_hosts: &[String],
    metrics: &CollectMetrics,
) -> Result<(), CollectError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);

    let mut hello = String::new();
    reader.read_line(&mut hello)?;
    let hostname = match hello.trim().strip_prefix("HELLO ") {
        Some(h) if allowed_hosts.iter().any(|a| a == h) => h.to_string(),
        _ => {
            metrics.htcondor_rejected_total.fetch_add(1, Ordering::Relaxed);
            writer.write_all(b"ERR unauthorized\n")?;
            return Ok(());
        }
    };
    writer.write_all(format!("OK {HTCONDOR_ACK_WINDOW}\n").as_bytes())?;

    let topic = TopicKey::new(HTCONDOR_TOPIC).expect("static key");
    let mut accepted: usize = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrapped = WrappedLine {
            line,
            reporting_host: hostname.clone(),
            received_at: broker.clock().now(),
        };
        broker.publish(
            vhost,
            exchange,
            topic.clone(),
            serde_json::to_vec(&wrapped).expect("wrapped line serializes"),
            &hostname,
            Credential::Internal,
        )?;
        metrics.htcondor_published_total.fetch_add(1, Ordering::Relaxed);
        accepted += 1;
        if accepted % HTCONDOR_ACK_WINDOW == 0 {
            writer.write_all(format!("ACK {accepted}\n").as_bytes())?;
        }
    }
    if accepted % HTCONDOR_ACK_WINDOW != 0 {
        writer.write_all(format!("ACK {accepted}\n").as_bytes())?;
    }
    Ok(())
}

/// Shipper side of the HTCondor protocol: send lines starting at
/// `from_line`, return the last cumulative ack received.
pub fn ship_htcondor_lines(
    addr: SocketAddr,
    hostname: &str,
    lines: &[String],
    from_line: usize,
) -> std::io::Result<usize> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);

    writer.write_all(format!("HELLO {hostname}\n").as_bytes())?;
    let mut reply = String::new();
    reader.read_line(&mut reply)?;
    if !reply.starts_with("OK ") {
        return Err(std::io::Error::new(
            std::io::ErrorKind::PermissionDenied,
            reply.trim().to_string(),
        ));
    }
    let window: usize = reply.trim()[3..].parse().unwrap_or(HTCONDOR_ACK_WINDOW);

    let mut sent = 0;
    let mut last_ack = 0;
    for line in &lines[from_line.min(lines.len())..] {
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        sent += 1;
        if sent % window == 0 {
            last_ack = read_ack(&mut reader)?;
        }
    }
    // half-close so the receiver sees EOF and sends the final ack
    writer.shutdown(std::net::Shutdown::Write)?;
    if sent % window != 0 {
        last_ack = read_ack(&mut reader)?;
    }
    Ok(last_ack)
}

fn read_ack(reader: &mut impl BufRead) -> std::io::Result<usize> {
    let mut frame = String::new();
    reader.read_line(&mut frame)?;
    frame
        .trim()
        .strip_prefix("ACK ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad ack: {frame:?}"))
        })
}

/// UDP receiver for XRootD transfer summaries: one JSON object per
/// datagram. Malformed datagrams are counted and dropped.
pub struct XrootdReceiver {
    socket: UdpSocket,
    pub local_addr: SocketAddr,
}

impl XrootdReceiver {
    pub fn bind(addr: &str) -> std::io::Result<XrootdReceiver> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let local_addr = socket.local_addr()?;
        Ok(XrootdReceiver { socket, local_addr })
    }

    pub fn run(
        &self,
        broker: &Broker,
        vhost: &str,
        exchange: &str,
        metrics: &CollectMetrics,
        stop: &AtomicBool,
    ) -> Result<(), CollectError> {
        let topic = TopicKey::new(XROOTD_TOPIC).expect("static key");
        let mut buf = [0u8; 65536];
        while !stop.load(Ordering::Relaxed) {
            let len = match self.socket.recv(&mut buf) {
                Ok(len) => len,
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            match serde_json::from_slice::<serde_json::Value>(&buf[..len]) {
                Ok(value) if value.is_object() => {
                    broker.publish(
                        vhost,
                        exchange,
                        topic.clone(),
                        buf[..len].to_vec(),
                        "xrootd-receiver",
                        Credential::Internal,
                    )?;
                    metrics.xrootd_published_total.fetch_add(1, Ordering::Relaxed);
                }
                _ => {
                    metrics.xrootd_malformed_total.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        Ok(())
    }
}

/// Spawn both receivers on background threads.
pub fn spawn_receivers(
    broker: Broker,
    vhost: String,
    exchange: String,
    htcondor: HtcondorReceiver,
    xrootd: XrootdReceiver,
    allowed_hosts: Vec<String>,
    metrics: Arc<CollectMetrics>,
    stop: Arc<AtomicBool>,
) -> Vec<std::thread::JoinHandle<Result<(), CollectError>>> {
    let mut handles = Vec::new();
    {
        let broker = broker.clone();
        let vhost = vhost.clone();
        let exchange = exchange.clone();
        let metrics = Arc::clone(&metrics);
        let stop = Arc::clone(&stop);
        handles.push(std::thread::spawn(move || {
            htcondor.run(&broker, &vhost, &exchange, &allowed_hosts, &metrics, &stop)
        }));
    }
    handles.push(std::thread::spawn(move || {
        xrootd.run(&broker, &vhost, &exchange, &metrics, &stop)
    }));
    handles
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::ExchangeKind;
    use crate::clock::Clock;

    fn test_broker() -> Broker {
        let broker = Broker::new(Clock::manual(100.0));
        broker.declare_exchange("osg-nma", "osg.ps.raw", ExchangeKind::Fanout).unwrap();
        broker.declare_queue("sink", None).unwrap();
        broker.bind("osg-nma", "osg.ps.raw", "#", "sink").unwrap();
        broker
    }

    #[test]
    fn htcondor_handshake_lines_and_acks() {
        let broker = test_broker();
        let metrics = CollectMetrics::default();
        let receiver = HtcondorReceiver::bind("127.0.0.1:0").unwrap();
        let addr = receiver.local_addr;
        let stop = AtomicBool::new(false);

        let lines: Vec<String> = (0..40)
            .map(|i| format!("2024-03-01T00:00:{i:02}Z upload Dest=192.0.2.5 Bytes={i}"))
            .collect();

        std::thread::scope(|s| {
            let handle = s.spawn(|| {
                receiver.run(
                    &broker,
                    "osg-nma",
                    "osg.ps.raw",
                    &["submit.example.edu".to_string()],
                    &metrics,
                    &stop,
                )
            });
            let ack = ship_htcondor_lines(addr, "submit.example.edu", &lines, 0).unwrap();
            assert_eq!(ack, 40);
            // resume from the ack as a shipper would after a drop
            let ack = ship_htcondor_lines(addr, "submit.example.edu", &lines, ack).unwrap();
            assert_eq!(ack, 0);
            stop.store(true, Ordering::Relaxed);
            handle.join().unwrap().unwrap();
        });

        assert_eq!(broker.queue_depth("sink").unwrap(), 40);
        let consumer = broker.consume("sink", "t").unwrap();
        let delivery = consumer.recv(Duration::from_secs(1)).unwrap();
        assert_eq!(delivery.message.topic.as_str(), HTCONDOR_TOPIC);
        let wrapped: WrappedLine = serde_json::from_slice(&delivery.message.payload).unwrap();
        assert_eq!(wrapped.reporting_host, "submit.example.edu");
        assert_eq!(wrapped.received_at, 100.0);
        assert!(wrapped.line.starts_with("2024-03-01T00:00:00Z upload"));
    }

    #[test]
    fn htcondor_rejects_unknown_host() {
        let broker = test_broker();
        let metrics = CollectMetrics::default();
        let receiver = HtcondorReceiver::bind("127.0.0.1:0").unwrap();
        let addr = receiver.local_addr;
        let stop = AtomicBool::new(false);

        std::thread::scope(|s| {
            let handle = s.spawn(|| {
                receiver.run(&broker, "osg-nma", "osg.ps.raw", &[], &metrics, &stop)
            });
            let err = ship_htcondor_lines(addr, "rogue.example.org", &["x".into()], 0).unwrap_err();
            assert_eq!(err.kind(), std::io::ErrorKind::PermissionDenied);
            stop.store(true, Ordering::Relaxed);
            handle.join().unwrap().unwrap();
        });

        assert_eq!(metrics.htcondor_rejected_total.load(Ordering::Relaxed), 1);
        assert_eq!(broker.queue_depth("sink").unwrap(), 0);
    }

    #[test]
    fn xrootd_datagrams_and_malformed_counter() {
        let broker = test_broker();
        let metrics = CollectMetrics::default();
        let receiver = XrootdReceiver::bind("127.0.0.1:0").unwrap();
        let addr = receiver.local_addr;
        let stop = AtomicBool::new(false);

        std::thread::scope(|s| {
            let handle = s.spawn(|| {
                receiver.run(&broker, "osg-nma", "osg.ps.raw", &metrics, &stop)
            });
            let sock = UdpSocket::bind("127.0.0.1:0").unwrap();
            sock.send_to(br#"{"src":"1.2.3.4","dst":"5.6.7.8","timestamp":1.0}"#, addr)
                .unwrap();
            sock.send_to(b"not json", addr).unwrap();
            sock.send_to(br#"{"src":"1.2.3.4","dst":"5.6.7.8","timestamp":2.0}"#, addr)
                .unwrap();
            while metrics.xrootd_published_total.load(Ordering::Relaxed) < 2
                || metrics.xrootd_malformed_total.load(Ordering::Relaxed) < 1
            {
                std::thread::sleep(Duration::from_millis(5));
            }
            stop.store(true, Ordering::Relaxed);
            handle.join().unwrap().unwrap();
        });

        assert_eq!(broker.queue_depth("sink").unwrap(), 2);
    }
}
