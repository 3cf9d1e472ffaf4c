use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::Value;

use citykit::broker::http::{router as broker_router, spawn_callback, HttpBroker};
use citykit::clock::{SharedClock, SystemClock};
use citykit::data_models::{validate_batch, SchemaRegistry};
use citykit::estimator::{Estimator, EstimatorConfig};
use citykit::feedgen::{self, CityFixture};
use citykit::gtfs::{
    ngsi_to_gtfs, publish_feed_entity, read_feed_zip, GtfsFeed, GtfsFetcher, GtfsRtLoader, GTFS_TYPES,
};
use citykit::harness::{
    run_scenario_estimation, run_scenario_routing, EstimationScenarioConfig, RoutingScenarioConfig,
};
use citykit::net::HttpServer;
use citykit::routing::{GraphParams, RealtimeSource, RemoteRouter, Router};
use citykit::transformers::{ngsi_to_ngsild, MappingRuleSet};
use citykit::{Broker, ContextBroker, NgsiEntity, Query};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "citykit", version, about = "Smart-city atomic services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the context broker over HTTP.
    Broker {
        #[arg(long, default_value = "127.0.0.1:1026")]
        listen: String,
        /// Append-only journal replayed at startup.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Validate entities (JSON array or JSON lines) against a schema directory.
    Validate {
        input: PathBuf,
        /// Schema directory; the bundled corpus when absent.
        #[arg(long)]
        schemas: Option<PathBuf>,
        /// Print every report, not just the summary.
        #[arg(long)]
        reports: bool,
    },
    /// Map a legacy JSON document to NGSI entities.
    Json2ngsi {
        #[arg(long)]
        rules: PathBuf,
        input: PathBuf,
    },
    /// Convert NGSI entities to NGSI-LD.
    Ngsi2ld {
        input: PathBuf,
        #[arg(long, default_value = "https://uri.etsi.org/ngsi-ld/v1/ngsi-ld-core-context.jsonld")]
        context: String,
    },
    /// Build a GTFS zip from NGSI entities (a file or a broker URL).
    GtfsBuild {
        #[arg(long, conflicts_with = "broker")]
        input: Option<PathBuf>,
        #[arg(long)]
        broker: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also publish a GtfsTransitFeedFile pointer with this id.
        #[arg(long, requires = "broker")]
        publish: Option<String>,
    },
    /// Serve GTFS-RT derived from ArrivalEstimation entities.
    GtfsrtServe {
        #[arg(long)]
        broker: String,
        #[arg(long)]
        feed: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8081")]
        listen: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        callback: String,
    },
    /// Watch feed pointers in the broker and ask a router to reload.
    GtfsFetch {
        #[arg(long)]
        broker: String,
        #[arg(long)]
        router: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        callback: String,
    },
    /// Serve the journey planner.
    Router {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        /// GTFS zip loaded at startup.
        #[arg(long)]
        feed: Option<PathBuf>,
        /// GTFS-RT endpoint polled before each plan.
        #[arg(long)]
        realtime: Option<String>,
    },
    /// Run an estimator instance.
    Estimator {
        #[arg(long)]
        config: PathBuf,
        /// Historical JSON lines (path or URL).
        #[arg(long)]
        historical: Option<String>,
        #[arg(long, default_value = "127.0.0.1:0")]
        callback: String,
    },
    /// Generate the synthetic city.
    Feedgen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, conflicts_with = "out", required_unless_present = "out")]
        emit: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a validation scenario and write its JSON report.
    Scenario {
        #[arg(value_parser = ["routing", "estimation"])]
        name: String,
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_json(path: &Path) -> AnyResult<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// A JSON array of entities, a single entity, or JSON lines.
fn read_entities(path: &Path) -> AnyResult<Vec<NgsiEntity>> {
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Array(items)) => Ok(items
            .into_iter()
            .map(serde_json::from_value)
            .collect::<Result<_, _>>()?),
        Ok(v @ Value::Object(_)) => Ok(vec![serde_json::from_value(v)?]),
        _ => {
            let mut out = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                out.push(serde_json::from_str(line)?);
            }
            Ok(out)
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> AnyResult<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_fixture(path: Option<&Path>, seed: Option<u64>) -> AnyResult<CityFixture> {
    let mut f = match path {
        Some(p) => CityFixture::load(p)?,
        None => CityFixture::default(),
    };
    if let Some(s) = seed {
        f.seed = s;
    }
    Ok(f)
}

fn wait_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn run(cli: Cli) -> AnyResult<ExitCode> {
    match cli.command {
        Command::Broker { listen, journal } => {
            let clock: SharedClock = Arc::new(SystemClock);
            let broker = Arc::new(match journal {
                Some(p) => Broker::open_with_journal(&p, clock)?,
                None => Broker::with_clock(clock),
            });
            let _dispatch = broker.start_dispatcher(Duration::from_millis(200));
            let server = HttpServer::spawn(broker_router(Arc::clone(&broker)), &listen)?;
            eprintln!("broker listening on {}", server.base_url());
            server.wait();
        }
        Command::Validate { input, schemas, reports } => {
            let reg = match schemas {
                Some(dir) => {
                    let reg = SchemaRegistry::new();
                    reg.load_dir(&dir)?;
                    reg
                }
                None => SchemaRegistry::bundled(),
            };
            let entities = read_entities(&input)?;
            let mut out = std::io::stdout().lock();
            let summary = validate_batch(entities, &reg.snapshot(), |r| {
                if reports || !r.is_valid() {
                    let _ = writeln!(out, "{}", serde_json::to_string(r).unwrap_or_default());
                }
            });
            drop(out);
            print_json(&summary)?;
            if summary.invalid > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Json2ngsi { rules, input } => {
            let rules = MappingRuleSet::from_json(&std::fs::read_to_string(rules)?)?.compile()?;
            let out = rules.apply(&read_json(&input)?);
            for e in &out.errors {
                eprintln!("record {}: {:?} {}", e.index, e.kind, e.message);
            }
            print_json(&out.entities)?;
        }
        Command::Ngsi2ld { input, context } => {
            let ld = read_entities(&input)?
                .iter()
                .map(|e| ngsi_to_ngsild(e, &context))
                .collect::<Result<Vec<_>, _>>()?;
            print_json(&ld)?;
        }
        Command::GtfsBuild {
            input,
            broker,
            out,
            publish,
        } => {
            let entities = match (&input, &broker) {
                (Some(p), _) => read_entities(p)?,
                (None, Some(url)) => {
                    let b = HttpBroker::new(url.clone());
                    let mut all = Vec::new();
                    for t in GTFS_TYPES {
                        all.extend(b.query_entities(&Query::of_type(t))?);
                    }
                    all
                }
                (None, None) => return Err("either --input or --broker is required".into()),
            };
            let (feed, zip) = ngsi_to_gtfs(&entities)?;
            std::fs::write(&out, &zip)?;
            eprintln!(
                "wrote {} ({} bytes, {} trips, {} stop times)",
                out.display(),
                zip.len(),
                feed.trips.len(),
                feed.stop_times.len()
            );
            if let (Some(id), Some(url)) = (publish, broker) {
                let now = chrono::Utc::now().timestamp();
                let e = publish_feed_entity(&out.display().to_string(), &id, &HttpBroker::new(url), now)?;
                print_json(&e)?;
            }
        }
        Command::GtfsrtServe {
            broker,
            feed,
            listen,
            callback,
        } => {
            let feed: GtfsFeed = read_feed_zip(&std::fs::read(feed)?)?;
            let loader = GtfsRtLoader::new(&feed, Arc::new(SystemClock));
            let (_cb, target) = spawn_callback(loader.clone(), &callback)?;
            let id = loader.attach(&HttpBroker::new(broker), Some(target))?;
            let server = HttpServer::spawn(loader.router(), &listen)?;
            eprintln!("GTFS-RT at {}/gtfs-rt (subscription {id})", server.base_url());
            server.wait();
        }
        Command::GtfsFetch {
            broker,
            router,
            callback,
        } => {
            let fetcher = Arc::new(GtfsFetcher::new(Arc::new(RemoteRouter::new(router))));
            let (_cb, target) = spawn_callback(Arc::new(fetcher.queue().clone()), &callback)?;
            let b = HttpBroker::new(broker);
            for ev in fetcher.attach(&b, Some(target))? {
                println!("{}", serde_json::to_string(&ev)?);
            }
            loop {
                for ev in fetcher.process_next(Duration::from_secs(3600)) {
                    println!("{}", serde_json::to_string(&ev)?);
                }
            }
        }
        Command::Router {
            listen,
            feed,
            realtime,
        } => {
            let router = Arc::new(Router::new(GraphParams::default()));
            if let Some(p) = feed {
                let v = router.reload_url("default", &p.display().to_string())?;
                eprintln!("loaded {} as graph version {v}", p.display());
            }
            if let Some(url) = realtime {
                router.set_realtime_source(RealtimeSource::Url(url));
            }
            let server = HttpServer::spawn(router.http_router(), &listen)?;
            eprintln!("router listening on {}", server.base_url());
            server.wait();
        }
        Command::Estimator {
            config,
            historical,
            callback,
        } => {
            let cfg = EstimatorConfig::load(&config)?;
            let est = Estimator::new(cfg.training, cfg.resolve_profile()?, Arc::new(SystemClock))?;
            if let Some(src) = historical {
                let r = est.ingest_historical(&src)?;
                eprintln!("historical: {} appended, {} malformed", r.appended, r.malformed);
            }
            let mut _cb = None;
            if let Some(url) = &cfg.broker_url {
                est.set_broker(Arc::new(HttpBroker::new(url.clone())), cfg.writeback);
                est.ingest_snapshot()?;
                let (server, target) = spawn_callback(est.clone(), &callback)?;
                est.subscribe(Some(target))?;
                _cb = Some(server);
            }
            est.start_schedule(chrono::Utc::now().timestamp());
            let _sched = est.spawn_scheduler(Duration::from_secs(1));
            match &cfg.listen {
                Some(addr) => {
                    let server = HttpServer::spawn(est.http_router(), addr)?;
                    eprintln!("estimator API on {}", server.base_url());
                    server.wait();
                }
                None => wait_forever(),
            }
        }
        Command::Feedgen {
            seed,
            fixture,
            emit,
            out,
        } => {
            let fx = load_fixture(fixture.as_deref(), seed)?;
            if let Some(dir) = out {
                for f in feedgen::write_outputs(&fx, &dir)? {
                    println!("{}", dir.join(f).display());
                }
            } else if let Some(url) = emit {
                let b = HttpBroker::new(url);
                let start = fx.start_epoch();
                let network = feedgen::generate_static_network(&fx);
                for e in &network {
                    b.upsert_entity(e.clone())?;
                }
                let feed = feedgen::toy_feed(&fx);
                let mut emissions = feedgen::sensor_emissions(&fx, start, start + 86_400);
                emissions.extend(feedgen::arrival_emissions(&fx, &feed, fx.service_day_midnight()));
                emissions.sort_by(|a, b| (a.t, &a.entity.id).cmp(&(b.t, &b.entity.id)));
                for em in &emissions {
                    em.apply(&b)?;
                }
                eprintln!("emitted {} network entities and {} updates", network.len(), emissions.len());
            }
        }
        Command::Scenario {
            name,
            fixture,
            report,
            seed,
        } => {
            let fx = load_fixture(fixture.as_deref(), seed)?;
            let r = if name == "routing" {
                run_scenario_routing(&RoutingScenarioConfig {
                    fixture: fx,
                    ..Default::default()
                })
            } else {
                run_scenario_estimation(&EstimationScenarioConfig {
                    fixture: fx,
                    ..Default::default()
                })
            };
            std::fs::write(&report, r.to_json() + "\n")?;
            for s in &r.stages {
                eprintln!("{:<20} {:<8} {}", s.name, format!("{:?}", s.status).to_lowercase(), s.detail);
            }
            return Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
