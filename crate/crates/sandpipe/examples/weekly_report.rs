//! The weekly HTCondor transfer summary: two simulated weeks of log
//! lines, one submit host going silent in the second week.
//!
//!     cargo run --example weekly_report

use sandpipe::ingest::htcondor::enrich_htcondor;
use sandpipe::report::{build_report, render_human};
use sandpipe::store::Store;
use sandpipe::synth::{self, Emission, MeshConfig};

fn main() {
    let mesh = MeshConfig::demo(31, 3);
    let topo = mesh.topology();
    let dir = std::env::temp_dir().join("sandpipe-report-example");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let store = Store::open(dir.join("store.jsonl")).unwrap();

    let week = 7.0 * 86400.0;
    let silent_host = &mesh.submit_hosts[2];
    let (emissions, _) = synth::generate_window(&mesh, 0.0, 2.0 * week);
    let mut ingested = 0;
    let mut dropped = 0;
    for emission in &emissions {
        let Emission::Htcondor { submit_host, line } = emission else { continue };
        let doc = enrich_htcondor(line, submit_host, &topo, 0.0).unwrap();
        // the silent host stops reporting halfway through
        if submit_host == silent_host && doc.timestamp().unwrap_or(0.0) >= week {
            dropped += 1;
            continue;
        }
        store.upsert(&doc).unwrap();
        ingested += 1;
    }
    println!("ingested {ingested} transfer lines, silenced {dropped} from {silent_host}\n");

    let report = build_report(&store, 2.0 * week, week);
    print!("{}", render_human(&report));
}
