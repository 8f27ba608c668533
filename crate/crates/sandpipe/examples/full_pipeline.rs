//! The whole pipeline in one process: demo mesh, collectors, bus,
//! ingesters, store, archive, all on a sped-up virtual clock.
//!
//!     cargo run --example full_pipeline

use sandpipe::config::PipelineConfig;
use sandpipe::pipeline::Pipeline;
use sandpipe::report::{build_report, render_human};

fn main() {
    let dir = std::env::temp_dir().join("sandpipe-full-example");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    std::env::set_current_dir(&dir).unwrap();

    let config = PipelineConfig::from_json(
        r#"{
            "clock": "virtual:600",
            "synth": {"enabled": true, "demo_toolkits": 4},
            "collector": {"seed": 7}
        }"#,
        std::iter::empty(),
    )
    .unwrap();

    let pipeline = Pipeline::start(&config).unwrap();
    println!("running ten simulated minutes (1s wall-clock ~ 10min)...");
    std::thread::sleep(std::time::Duration::from_secs(6));

    let store = pipeline.store.clone();
    let clock = pipeline.clock.clone();
    let ledger = pipeline.ledger();
    pipeline.shutdown().unwrap();

    let report = build_report(&store, clock.now(), 86400.0);
    print!("{}", render_human(&report));

    println!("\ngenerator ledger:");
    for (test_type, count) in &ledger.counts {
        let stored = report.per_type.get(test_type.as_str()).map(|t| t.documents).unwrap_or(0);
        println!("  {:<16} generated {count:>5}  stored {stored:>5}", test_type.as_str());
    }
}
