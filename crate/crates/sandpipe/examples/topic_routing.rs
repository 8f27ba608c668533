//! Topic routing on the in-process broker: wildcard bindings, fanout,
//! and exchange-to-exchange chains.
//!
//!     cargo run --example topic_routing

use sandpipe::bus::{Broker, Credential, ExchangeKind, TopicKey};
use sandpipe::Clock;

fn main() {
    let broker = Broker::new(Clock::manual(0.0));
    let vhost = "osg-nma";

    broker.declare_exchange(vhost, "measurements", ExchangeKind::Topic).unwrap();
    broker.declare_exchange(vhost, "mirror", ExchangeKind::Fanout).unwrap();
    // the mirror fans out everything the topic exchange accepts
    broker.bind(vhost, "measurements", "#", "mirror").unwrap();

    broker.declare_queue("latency-only", None).unwrap();
    broker.declare_queue("all-perfsonar", None).unwrap();
    broker.declare_queue("everything", None).unwrap();
    broker.bind(vhost, "measurements", "perfsonar.raw.latency", "latency-only").unwrap();
    broker.bind(vhost, "measurements", "perfsonar.raw.*", "all-perfsonar").unwrap();
    broker.bind(vhost, "mirror", "#", "everything").unwrap();

    for key in [
        "perfsonar.raw.latency",
        "perfsonar.raw.throughput",
        "htcondor.raw.xfer",
    ] {
        let routed = broker
            .publish(
                vhost,
                "measurements",
                TopicKey::new(key).unwrap(),
                format!("payload for {key}").into_bytes(),
                "example",
                Credential::Internal,
            )
            .unwrap();
        println!("{key:<28} reached {routed} queue(s)");
    }

    for queue in ["latency-only", "all-perfsonar", "everything"] {
        println!("{queue:<16} depth {}", broker.queue_depth(queue).unwrap());
    }

    // `*` matches exactly one word, so a two-word tail never matches it
    let routed = broker
        .publish(
            vhost,
            "measurements",
            TopicKey::new("perfsonar.raw.latency.extra").unwrap(),
            b"too deep".to_vec(),
            "example",
            Credential::Internal,
        )
        .unwrap();
    println!("perfsonar.raw.latency.extra  reached {routed} queue(s) (fanout mirror only)");

    // cycles between exchanges are rejected at bind time
    let err = broker.bind(vhost, "mirror", "#", "measurements").unwrap_err();
    println!("binding mirror back into measurements: {err}");
}
