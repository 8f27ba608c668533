//! Collector scheduling over a simulated hour: jittered five-minute
//! polls, a bounded worker pool, and permanent poll stop once a toolkit
//! starts pushing.
//!
//!     cargo run --example collector_scheduling

use sandpipe::collect::poller::{CollectorPool, PollJob};
use sandpipe::collect::{CollectMetrics, CollectorState, Scheduler, ToolkitEndpoint};
use sandpipe::records::TestType;
use sandpipe::Clock;
use std::sync::{Arc, Mutex};
use std::time::Duration;

fn main() {
    let dir = std::env::temp_dir().join("sandpipe-scheduler-example");
    let _ = std::fs::remove_dir_all(&dir);
    let state = CollectorState::open(&dir).unwrap();
    let scheduler = Arc::new(Scheduler::new(300.0, 60.0, 42));
    // one simulated hour in about half a real second
    let clock = Clock::virtual_from(0.0, 7200.0);
    let metrics = Arc::new(CollectMetrics::default());

    let endpoints: Vec<ToolkitEndpoint> = (0..10)
        .map(|i| ToolkitEndpoint {
            hostname: format!("ps{i}.example.edu"),
            base_url: String::new(),
            meshes: vec!["demo".into()],
            test_types: vec![TestType::Latency],
        })
        .collect();

    // instrumented poll action instead of real HTTP
    let polls: Arc<Mutex<Vec<(String, f64)>>> = Arc::new(Mutex::new(Vec::new()));
    let job: PollJob = {
        let polls = Arc::clone(&polls);
        let clock = clock.clone();
        Arc::new(move |e: &ToolkitEndpoint| {
            polls.lock().unwrap().push((e.hostname.clone(), clock.now()));
            Ok(0)
        })
    };

    // toolkit 7 starts pushing early in the hour
    let pushed_at = 600.0;
    let pool = CollectorPool::start(
        4,
        endpoints,
        state.clone(),
        scheduler,
        clock.clone(),
        Arc::clone(&metrics),
        job,
        Duration::from_millis(2),
    );
    let mut marked = false;
    while clock.now() < 3600.0 {
        if !marked && clock.now() >= pushed_at {
            state.mark_push_detected("ps7.example.edu").unwrap();
            marked = true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    pool.shutdown();

    let polls = polls.lock().unwrap();
    for i in 0..10 {
        let host = format!("ps{i}.example.edu");
        let times: Vec<f64> = polls.iter().filter(|(h, _)| h == &host).map(|(_, t)| *t).collect();
        let gaps: Vec<String> = times.windows(2).map(|w| format!("{:.0}", w[1] - w[0])).collect();
        println!("{host}: {} polls, gaps [{}]", times.len(), gaps.join(", "));
    }
    let after_push = polls
        .iter()
        .filter(|(h, t)| h == "ps7.example.edu" && *t > pushed_at + 1.0)
        .count();
    println!("\npolls of ps7 after push detection: {after_push}");
    println!("{}", metrics.render());
}
