//! The duplicate-overlap scenario: one toolkit delivers the same
//! measurements over both channels (pushed as IPs + ISO durations,
//! polled as hostnames + floats) and the store ends up with exactly one
//! document per measurement.
//!
//!     cargo run --example push_poll_dedup

use sandpipe::bus::Broker;
use sandpipe::ingest::{ingest_payload, record_id, normalize};
use sandpipe::records::RawRecord;
use sandpipe::store::Store;
use sandpipe::synth::{self, Emission, MeshConfig};
use sandpipe::Clock;

fn main() {
    let mesh = MeshConfig::demo(11, 3);
    let topo = mesh.topology();
    let dir = std::env::temp_dir().join("sandpipe-dedup-example");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let store = Store::open(dir.join("store.jsonl")).unwrap();
    let _broker = Broker::new(Clock::manual(0.0));

    let (emissions, _) = synth::generate_window(&mesh, 0.0, 3600.0);
    let mut measurements = 0;
    for emission in &emissions {
        let Emission::Perfsonar { record, .. } = emission else { continue };
        measurements += 1;

        // pull copy and push copy of the same logical measurement
        let pull = RawRecord::Pull(record.clone());
        let push = RawRecord::Push(synth::push_variant(record, &topo));
        assert_eq!(
            record_id(&normalize(&pull, &topo).unwrap()),
            record_id(&normalize(&push, &topo).unwrap()),
        );

        let topic = sandpipe::ingest::raw_topic(record.test_type);
        for raw in [pull, push] {
            let doc = ingest_payload(&topic, &raw.to_bytes(), &topo, 0.0).unwrap();
            store.upsert(&doc).unwrap();
        }
    }

    println!("measurements generated : {measurements}");
    println!("copies ingested        : {}", measurements * 2);
    println!("documents in store     : {}", store.len());
    assert_eq!(store.len(), measurements);
}
