//! Operational command line: run the pipeline, issue tokens, replay
//! archives, print reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sandpipe::archive;
use sandpipe::auth;
use sandpipe::config::PipelineConfig;
use sandpipe::pipeline::{self, Pipeline};
use sandpipe::report;
use sandpipe::store::Store;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "sandpipe", about = "network-measurement pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config file (JSON).
    #[arg(long, global = true, default_value = "sandpipe.json")]
    config: PathBuf,
    /// Clock override: `system`, `virtual:<speedup>`, `manual:<epoch>`.
    #[arg(long)]
    clock: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pipeline lifecycle.
    Pipeline {
        #[command(subcommand)]
        action: PipelineAction,
    },
    /// Token administration.
    Token {
        #[command(subcommand)]
        action: TokenAction,
    },
    /// Re-publish archived raw records through the ingestion path.
    Replay {
        #[command(flatten)]
        common: ConfigArgs,
        /// First segment date (inclusive), YYYY-MM-DD.
        #[arg(long)]
        from: chrono::NaiveDate,
        /// Last segment date (inclusive), YYYY-MM-DD.
        #[arg(long)]
        to: chrono::NaiveDate,
        /// Records per second limit.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Per-type volumes and the HTCondor weekly summary.
    Report {
        #[command(flatten)]
        common: ConfigArgs,
        /// Reporting window, e.g. 7d, 12h, 3600s.
        #[arg(long, default_value = "7d")]
        window: String,
        /// Window end as an epoch timestamp; defaults to the newest
        /// document in the store.
        #[arg(long)]
        now: Option<f64>,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum PipelineAction {
    /// Start every component and run until the duration elapses.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Stop after this many wall-clock seconds; default runs forever.
        #[arg(long)]
        duration: Option<f64>,
    },
}

#[derive(Subcommand)]
enum TokenAction {
    /// Issue a push token for a registered toolkit.
    Issue {
        #[command(flatten)]
        common: ConfigArgs,
        /// Registered toolkit hostname.
        #[arg(long)]
        subject: String,
        /// Address to present as the requester; defaults to the
        /// registered address (operator-trusted issuance).
        #[arg(long)]
        requester_ip: Option<std::net::IpAddr>,
    },
}

fn load_config(common: &ConfigArgs) -> Result<PipelineConfig, u8> {
    let mut config = PipelineConfig::load(&common.config).map_err(|e| {
        eprintln!("config error: {e}");
        EXIT_CONFIG
    })?;
    if let Some(clock) = &common.clock {
        config.clock = clock.clone();
        config.validate().map_err(|e| {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        })?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), u8> {
    match cli.command {
        Command::Pipeline { action: PipelineAction::Run { common, duration } } => {
            let config = load_config(&common)?;
            let pipeline = Pipeline::start(&config).map_err(|e| {
                eprintln!("startup failed: {e}");
                EXIT_RUNTIME
            })?;
            eprintln!(
                "pipeline up: push {}, store {}, config {}, metrics {}",
                pipeline.push_addr, pipeline.store_addr, pipeline.config_addr, pipeline.metrics_addr
            );
            match duration {
                Some(secs) => std::thread::sleep(std::time::Duration::from_secs_f64(secs)),
                None => loop {
                    std::thread::sleep(std::time::Duration::from_secs(3600));
                },
            }
            let store = pipeline.store.clone();
            pipeline.shutdown().map_err(|e| {
                eprintln!("shutdown failed: {e}");
                EXIT_RUNTIME
            })?;
            eprintln!("pipeline stopped; {} documents stored", store.len());
            Ok(())
        }
        Command::Token { action: TokenAction::Issue { common, subject, requester_ip } } => {
            let config = load_config(&common)?;
            let registry = auth::ToolkitRegistry::load(&config.auth.registry).map_err(|e| {
                eprintln!("registry: {e}");
                EXIT_CONFIG
            })?;
            let signing_key = auth::load_signing_key(&config.auth.private_key).map_err(|e| {
                eprintln!("signing key: {e}");
                EXIT_CONFIG
            })?;
            let requester = requester_ip
                .or_else(|| registry.entries.get(&subject).map(|e| e.registered_ip))
                .ok_or_else(|| {
                    eprintln!("unknown subject {subject}");
                    EXIT_RUNTIME
                })?;
            let now = config.make_clock().now();
            let token = auth::issue_token(
                &subject,
                requester,
                &registry,
                &config.auth.server_name,
                now,
                config.auth.token_ttl_secs,
                &signing_key,
            )
            .map_err(|e| {
                eprintln!("issuance denied: {e}");
                EXIT_RUNTIME
            })?;
            println!("{token}");
            Ok(())
        }
        Command::Replay { common, from, to, rate } => {
            let config = load_config(&common)?;
            let runtime = |e: &dyn std::fmt::Display| {
                eprintln!("replay failed: {e}");
                EXIT_RUNTIME
            };
            let segments: Vec<_> = archive::list_segments(&config.archive.spool_dir)
                .map_err(|e| runtime(&e))?
                .into_iter()
                .filter(|s| s.date >= from && s.date <= to)
                .collect();
            if segments.is_empty() {
                eprintln!("no closed segments between {from} and {to}");
                return Err(EXIT_RUNTIME);
            }
            // a replay-only broker: same topology, no live sources
            let broker = sandpipe::bus::Broker::new(config.make_clock());
            pipeline::declare_topology(&broker, &config.vhost, None).map_err(|e| runtime(&e))?;
            let store = Store::open(&config.store.path).map_err(|e| runtime(&e))?;
            let topo = std::sync::Arc::new(
                sandpipe::ingest::SiteTopology::load(&config.topology).map_err(|e| runtime(&e))?,
            );
            let stop = std::sync::atomic::AtomicBool::new(false);
            std::thread::scope(|s| {
                let mut handles = Vec::new();
                for (queue, _) in pipeline::INGEST_QUEUES {
                    let ingester = sandpipe::ingest::Ingester {
                        broker: broker.clone(),
                        queue: queue.to_string(),
                        store: store.clone(),
                        topo: std::sync::Arc::clone(&topo),
                    };
                    let stop = &stop;
                    handles.push(s.spawn(move || ingester.run(stop)));
                }
                let result = archive::replay(&segments, &broker, &config.vhost, rate);
                stop.store(true, std::sync::atomic::Ordering::Relaxed);
                for h in handles {
                    let _ = h.join();
                }
                let report = result.map_err(|e| runtime(&e))?;
                println!(
                    "replayed {} records from {} segment(s) in {:.2}s ({:.0} rec/s), {} corrupt skipped; store now holds {} documents",
                    report.records,
                    segments.len(),
                    report.duration_secs,
                    report.records_per_sec,
                    report.corrupt_skipped,
                    store.len(),
                );
                Ok(())
            })
        }
        Command::Report { common, window, now, json } => {
            let config = load_config(&common)?;
            let window_secs = report::parse_window(&window).map_err(|e| {
                eprintln!("config error: {e}");
                EXIT_CONFIG
            })?;
            let store = Store::open(&config.store.path).map_err(|e| {
                eprintln!("store unreachable: {e}");
                EXIT_RUNTIME
            })?;
            let now = now.unwrap_or_else(|| {
                store
                    .query(&Default::default())
                    .last()
                    .and_then(|d| d.document.timestamp())
                    .map(|t| t + 1e-3)
                    .unwrap_or_else(|| config.make_clock().now())
            });
            let report = report::build_report(&store, now, window_secs);
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                print!("{}", report::render_human(&report));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
