//! Scope-checked publishing: what one push token does and does not allow.
//!
//!     cargo run --example token_scopes

use sandpipe::auth::{self, TokenClaims};
use sandpipe::bus::{Broker, Credential, ExchangeKind, TokenGate, TopicKey};
use sandpipe::Clock;

fn main() {
    let dir = std::env::temp_dir().join("sandpipe-token-example");
    std::fs::create_dir_all(&dir).unwrap();
    let (private, public) = (dir.join("signing.key"), dir.join("signing.pub"));
    auth::generate_keypair(&private, &public).unwrap();
    let signing = auth::load_signing_key(&private).unwrap();
    let verifying = auth::load_verifying_key(&public).unwrap();

    let clock = Clock::manual(1_600_000_000.0);
    let broker = Broker::new(clock.clone());
    let vhost = "osg-nma";
    broker.declare_exchange(vhost, "osg.ps-push.raw", ExchangeKind::Topic).unwrap();
    broker.protect_exchange(vhost, "osg.ps-push.raw").unwrap();
    broker.declare_exchange(vhost, "osg.ps.raw", ExchangeKind::Fanout).unwrap();
    broker.declare_queue("sink", None).unwrap();
    broker.bind(vhost, "osg.ps-push.raw", "#", "sink").unwrap();
    broker.set_token_gate(TokenGate { verifying_key: verifying, server_name: "rabbit_server".into() });

    let claims = TokenClaims {
        scope: "rabbit_server.write:osg-nma/osg.ps-push.raw/perfsonar.raw.*".into(),
        exp: 1_600_010_000,
        aud: "rabbit_server".into(),
        sub: "ps.example.edu".into(),
        client_id: "ps.example.edu".into(),
    };
    let token = auth::sign_claims(&claims, &signing);
    println!("scope: {}\n", claims.scope);

    let publish = |key: &str, token: &str| {
        let outcome = broker.publish(
            vhost,
            "osg.ps-push.raw",
            TopicKey::new(key).unwrap(),
            b"{}".to_vec(),
            "ps.example.edu",
            Credential::Token(token),
        );
        match outcome {
            Ok(n) => println!("  {key:<34} allowed ({n} queue(s))"),
            Err(e) => println!("  {key:<34} denied: {e}"),
        }
    };

    println!("with a valid token:");
    publish("perfsonar.raw.latency", &token);
    publish("perfsonar.raw.throughput", &token);
    publish("perfsonar.raw.latency.extra", &token); // two-word tail vs `*`
    publish("htcondor.raw.xfer", &token);

    println!("\nwith a tampered token:");
    let tampered = format!("{}x", &token[..token.len() - 1]);
    publish("perfsonar.raw.latency", &tampered);

    println!("\nafter expiry:");
    clock.set(1_600_020_000.0);
    publish("perfsonar.raw.latency", &token);
}
