//! Scenario orchestrator: wires broker, GTFS bridge, router, estimator and
//! feedgen in process on one simulated clock and records a per-stage report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::broker::{Broker, ContextBroker, Query};
use crate::clock::{Clock, SharedClock, SimClock};
use crate::data_models::{validate_batch, SchemaRegistry};
use crate::estimator::{Estimator, Profile, SeriesKey, TrainingConfig};
use crate::feedgen::{self, CityFixture};
use crate::gtfs::{
    ngsi_to_gtfs, publish_feed_entity, read_feed_zip, FeedReloader, GtfsFeed, GtfsFetcher,
    GtfsRtLoader, ReloadOutcome, GTFS_TYPES,
};
use crate::ngsi::{format_iso8601, Attribute, NgsiEntity};
use crate::routing::{GraphParams, PlanRequest, RealtimeSource, Router, RoutingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageReport {
    pub name: String,
    pub service: String,
    pub status: StageStatus,
    pub detail: String,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub data: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub stages: Vec<StageReport>,
}

impl ScenarioReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const ROUTING_STAGES: [(&str, &str); 11] = [
    ("generate-network", "feedgen"),
    ("publish-entities", "broker"),
    ("build-gtfs", "gtfs-bridge"),
    ("publish-feed", "gtfs-bridge"),
    ("fetch-reload", "gtfs-bridge"),
    ("plan-static", "routing"),
    ("gtfsrt-estimation", "gtfs-bridge"),
    ("replan-realtime", "routing"),
    ("replan-delay", "routing"),
    ("feed-update", "routing"),
    ("fail-safe-reload", "routing"),
];

pub const ESTIMATION_STAGES: [(&str, &str); 11] = [
    ("generate-streams", "feedgen"),
    ("ingest-historical", "estimator"),
    ("ingest-snapshot", "estimator"),
    ("subscribe", "broker"),
    ("simulate-day", "estimator"),
    ("ingest-subscription", "estimator"),
    ("gate-check", "estimator"),
    ("schedule-counts", "estimator"),
    ("forecast-vs-naive", "estimator"),
    ("noise-free-rmse", "estimator"),
    ("writeback", "broker"),
];

struct Outcome {
    detail: String,
    data: Value,
}

fn ok(detail: impl Into<String>) -> Result<Outcome, String> {
    Ok(Outcome {
        detail: detail.into(),
        data: Value::Null,
    })
}

fn ok_with(detail: impl Into<String>, data: Value) -> Result<Outcome, String> {
    Ok(Outcome {
        detail: detail.into(),
        data,
    })
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs stages in a fixed order; after the first failure the rest are
/// recorded as skipped.
struct Recorder {
    plan: &'static [(&'static str, &'static str)],
    stages: Vec<StageReport>,
    failed: bool,
}

impl Recorder {
    fn new(plan: &'static [(&'static str, &'static str)]) -> Self {
        Self {
            plan,
            stages: Vec::new(),
            failed: false,
        }
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<Outcome, String>) {
        let service = self
            .plan
            .iter()
            .find(|(n, _)| *n == name)
            .map_or("harness", |(_, s)| *s)
            .to_string();
        if self.failed {
            self.stages.push(StageReport {
                name: name.into(),
                service,
                status: StageStatus::Skipped,
                detail: "skipped after an earlier failure".into(),
                latency_ms: 0.0,
                data: Value::Null,
            });
            return;
        }
        let start = Instant::now();
        let result = f();
        let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
        let (status, detail, data) = match result {
            Ok(o) => (StageStatus::Pass, o.detail, o.data),
            Err(e) => {
                self.failed = true;
                (StageStatus::Fail, e, Value::Null)
            }
        };
        log::info!("stage {name}: {status:?} {detail}");
        self.stages.push(StageReport {
            name: name.into(),
            service,
            status,
            detail,
            latency_ms,
            data,
        });
    }

    fn finish(self, scenario: &str, seed: u64) -> ScenarioReport {
        debug_assert_eq!(
            self.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
            self.plan.iter().map(|(n, _)| *n).collect::<Vec<_>>()
        );
        ScenarioReport {
            scenario: scenario.into(),
            seed,
            passed: self.stages.iter().all(|s| s.status == StageStatus::Pass),
            stages: self.stages,
        }
    }
}

/// Scratch directory removed on drop.
struct WorkDir(PathBuf);

impl WorkDir {
    fn new(prefix: &str) -> std::io::Result<Self> {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.subsec_nanos());
        let dir = std::env::temp_dir().join(format!("{prefix}-{}-{n}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Self(dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for WorkDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

// ---------------------------------------------------------------- routing

/// Reload target used by the fetcher: installs the archive in the router and
/// points the realtime loader's trip resolver at the same feed.
struct PipelineReloader {
    router: Arc<Router>,
    loader: Arc<GtfsRtLoader>,
}

impl FeedReloader for PipelineReloader {
    fn reload(&self, feed_id: &str, url: &str) -> Result<u64, String> {
        let bytes = crate::gtfs::load_feed_bytes(url).map_err(|e| e.to_string())?;
        let feed = read_feed_zip(&bytes).map_err(|e| e.to_string())?;
        let v = self.router.load_feed(feed_id, feed.clone()).map_err(|e| e.to_string())?;
        self.loader.set_feed(&feed);
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RoutingScenarioConfig {
    pub fixture: CityFixture,
    /// Seconds after service-day midnight used as the planning departure.
    pub depart_offset: i64,
    /// Seconds after midnight at which realtime estimations are committed.
    pub realtime_offset: i64,
    pub origin: String,
    pub destination: String,
    pub feed_id: String,
}

impl Default for RoutingScenarioConfig {
    fn default() -> Self {
        Self {
            fixture: CityFixture::default(),
            depart_offset: 8 * 3600,
            realtime_offset: 8 * 3600 + 4 * 60,
            origin: "S1".into(),
            destination: "S4".into(),
            feed_id: "city-feed".into(),
        }
    }
}

/// Direct-trip arrival oracle for the toy network: per trip, shift every call
/// from the first delayed one onward, keep trips that leave `from` after
/// `depart` and reach `to` later on, and take the minimum arrival.
fn direct_trip_oracle(
    feed: &GtfsFeed,
    midnight: i64,
    from: &str,
    to: &str,
    depart: i64,
    shift: &dyn Fn(&str, u32) -> i64,
) -> Option<i64> {
    let mut best: Option<i64> = None;
    for (trip, calls) in feed.stop_times_by_trip() {
        let board = calls.iter().find(|c| c.stop_id == from);
        let alight = calls.iter().find(|c| c.stop_id == to);
        if let (Some(b), Some(a)) = (board, alight) {
            if b.stop_sequence >= a.stop_sequence {
                continue;
            }
            let dep = midnight + i64::from(b.departure) + shift(trip, b.stop_sequence);
            let arr = midnight + i64::from(a.arrival) + shift(trip, a.stop_sequence);
            if dep >= depart {
                best = Some(best.map_or(arr, |x: i64| x.min(arr)));
            }
        }
    }
    best
}

fn first_arrival(router: &Router, req: &PlanRequest) -> Result<Option<(i64, Vec<String>)>, String> {
    match router.plan(req) {
        Ok(r) => Ok(r.itineraries.first().map(|i| {
            (
                i.arrival,
                i.trip_ids().into_iter().map(String::from).collect(),
            )
        })),
        Err(RoutingError::Unreachable) | Err(RoutingError::OriginIsolated) => Ok(None),
        Err(e) => Err(e.to_string()),
    }
}

fn gtfs_entities(broker: &dyn ContextBroker) -> Result<Vec<NgsiEntity>, String> {
    let mut out = Vec::new();
    for t in GTFS_TYPES {
        out.extend(broker.query_entities(&Query::of_type(t)).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn hhmm(t: i64) -> String {
    format_iso8601(t)
}

pub fn run_scenario_routing(cfg: &RoutingScenarioConfig) -> ScenarioReport {
    let fx = &cfg.fixture;
    let mut rec = Recorder::new(&ROUTING_STAGES);
    let work = match WorkDir::new("citykit-routing") {
        Ok(w) => w,
        Err(e) => {
            rec.run("generate-network", || Err(format!("cannot create work dir: {e}")));
            for (n, _) in &ROUTING_STAGES[1..] {
                rec.run(n, || ok(""));
            }
            return rec.finish("routing", fx.seed);
        }
    };
    let midnight = fx.service_day_midnight();
    let clock = Arc::new(SimClock::new(midnight + 7 * 3600));
    let shared: SharedClock = clock.clone();
    let broker = Arc::new(Broker::with_clock(Arc::clone(&shared)));
    let router = Arc::new(Router::new(GraphParams::default()));
    let loader = GtfsRtLoader::new(&GtfsFeed::default(), Arc::clone(&shared));
    let fetcher = GtfsFetcher::new(Arc::new(PipelineReloader {
        router: Arc::clone(&router),
        loader: Arc::clone(&loader),
    }));
    router.set_realtime_source(RealtimeSource::Loader(Arc::clone(&loader)));
    let depart = midnight + cfg.depart_offset;
    let headline = PlanRequest::between_stops(&cfg.origin, &cfg.destination, depart);

    let mut network: Vec<NgsiEntity> = Vec::new();
    let mut feed = GtfsFeed::default();
    let mut baseline: i64 = 0;
    let mut baseline_trips: Vec<String> = Vec::new();
    let mut after_update: Option<(i64, Vec<String>)> = None;

    rec.run("generate-network", || {
        network = feedgen::generate_static_network(fx);
        check(network == feedgen::generate_static_network(fx), || {
            "generation is not deterministic".into()
        })?;
        let reg = SchemaRegistry::bundled();
        let summary = validate_batch(network.iter().cloned(), &reg.snapshot(), |_| {});
        check(summary.violation_count() == 0, || {
            format!("network has violations: {:?}", summary.per_kind_counts)
        })?;
        let mut counts = BTreeMap::new();
        for e in &network {
            *counts.entry(e.entity_type.clone()).or_insert(0usize) += 1;
        }
        ok_with(format!("{} entities, all valid", network.len()), json!(counts))
    });

    rec.run("publish-entities", || {
        for e in &network {
            broker.upsert_entity(e.clone()).map_err(|e| e.to_string())?;
        }
        let back = gtfs_entities(broker.as_ref())?;
        check(back.len() == network.len(), || {
            format!("broker holds {} of {} entities", back.len(), network.len())
        })?;
        ok(format!("{} entities committed", back.len()))
    });

    rec.run("build-gtfs", || {
        let ents = gtfs_entities(broker.as_ref())?;
        let (f, zip) = ngsi_to_gtfs(&ents).map_err(|e| e.to_string())?;
        let mut shuffled = ents.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(fx.seed));
        let (_, zip2) = ngsi_to_gtfs(&shuffled).map_err(|e| e.to_string())?;
        check(zip == zip2, || "archive depends on entity order".into())?;
        let parsed = read_feed_zip(&zip).map_err(|e| e.to_string())?;
        check(parsed == f, || "parse(serialize(feed)) differs from feed".into())?;
        std::fs::write(work.path("feed-v1.zip"), &zip).map_err(|e| e.to_string())?;
        feed = f;
        ok(format!("{} byte archive, order independent, round trip exact", zip.len()))
    });

    rec.run("publish-feed", || {
        let e = publish_feed_entity(
            &path_str(&work.path("feed-v1.zip")),
            &cfg.feed_id,
            broker.as_ref(),
            clock.now(),
        )
        .map_err(|e| e.to_string())?;
        ok(format!(
            "{} -> {}",
            e.id,
            e.attr("url").and_then(Attribute::as_str).unwrap_or_default()
        ))
    });

    rec.run("fetch-reload", || {
        let events = fetcher.attach(broker.as_ref(), None).map_err(|e| e.to_string())?;
        broker.deliver_notifications();
        let again = fetcher.process_pending();
        check(
            events.len() == 1 && matches!(events[0].outcome, ReloadOutcome::Reloaded { version: 1 }),
            || format!("unexpected reload events {events:?}"),
        )?;
        check(again.is_empty(), || "unchanged feed reloaded twice".into())?;
        check(router.version() == 1, || format!("router at version {}", router.version()))?;
        ok("graph version 1 active")
    });

    rec.run("plan-static", || {
        let stops: Vec<String> = feed.stops.iter().map(|s| s.stop_id.clone()).collect();
        let mut compared = 0;
        for a in &stops {
            for b in &stops {
                if a == b {
                    continue;
                }
                let req = PlanRequest::between_stops(a, b, depart);
                let got = first_arrival(&router, &req)?.map(|x| x.0);
                let oracle = router.exhaustive_earliest(&req);
                check(got == oracle, || format!("{a}->{b}: planner {got:?}, enumerator {oracle:?}"))?;
                compared += 1;
            }
        }
        let (arr, trips) = first_arrival(&router, &headline)?
            .ok_or_else(|| format!("{}->{} unreachable", cfg.origin, cfg.destination))?;
        let direct = direct_trip_oracle(&feed, midnight, &cfg.origin, &cfg.destination, depart, &|_, _| 0);
        check(Some(arr) == direct, || format!("headline arrival {arr}, direct oracle {direct:?}"))?;
        baseline = arr;
        baseline_trips = trips.clone();
        ok_with(
            format!("{compared} stop pairs match the enumerator; headline arrives {}", hhmm(arr)),
            json!({"arrival": arr, "trips": trips}),
        )
    });

    let realtime_now = midnight + cfg.realtime_offset;
    let mut override_delta: i64 = 0;

    rec.run("gtfsrt-estimation", || {
        loader.attach(broker.as_ref(), None).map_err(|e| e.to_string())?;
        clock.set(realtime_now);
        let trip = baseline_trips.first().cloned().ok_or("headline has no ride")?;
        let t = feed.trips.iter().find(|x| x.trip_id == trip).ok_or("unknown trip")?;
        let calls = feed.stop_times_by_trip();
        let calls = &calls[trip.as_str()];
        let probe = calls.get(1).or(calls.first()).ok_or("trip without calls")?;
        let remaining = 120;
        let ae = NgsiEntity::new(feedgen::arrival_entity_id(&t.route_id, &probe.stop_id), "ArrivalEstimation")
            .with("refLine", Attribute::reference(t.route_id.clone()))
            .with("refStop", Attribute::reference(probe.stop_id.clone()))
            .with("remainingTime", Attribute::integer(remaining))
            .with("dateObserved", Attribute::date_time(format_iso8601(realtime_now)));
        broker.upsert_entity(ae).map_err(|e| e.to_string())?;
        broker.deliver_notifications();
        let rt = loader.current().ok_or("no GTFS-RT feed produced")?;
        let upd = rt
            .trip_updates
            .iter()
            .find(|u| u.trip_id == trip)
            .and_then(|u| u.stop_time_updates.iter().find(|s| s.stop_sequence == Some(probe.stop_sequence)))
            .ok_or_else(|| format!("no update for {trip}#{}", probe.stop_sequence))?;
        let expected = realtime_now + remaining;
        check(upd.arrival_override == Some(expected), || {
            format!("arrivalOverride {:?}, expected {expected}", upd.arrival_override)
        })?;
        override_delta = expected - (midnight + i64::from(probe.arrival));
        ok_with(
            format!("{trip}#{} arrivalOverride = now + {remaining}", probe.stop_sequence),
            serde_json::to_value(&*rt).unwrap_or_default(),
        )
    });

    rec.run("replan-realtime", || {
        let trip = baseline_trips.first().cloned().unwrap_or_default();
        let probe_seq = feed.stop_times_by_trip()[trip.as_str()]
            .get(1)
            .map_or(1, |c| c.stop_sequence);
        let shift = |t: &str, seq: u32| if t == trip && seq >= probe_seq { override_delta } else { 0 };
        let predicted = direct_trip_oracle(&feed, midnight, &cfg.origin, &cfg.destination, depart, &shift)
            .ok_or("oracle finds no trip")?;
        let (arr, trips) = first_arrival(&router, &headline)?.ok_or("unreachable after realtime")?;
        let oracle = router.exhaustive_earliest(&headline);
        check(arr == predicted, || {
            format!("re-planned arrival {arr}, oracle {predicted} (delta {override_delta})")
        })?;
        check(Some(arr) == oracle, || format!("enumerator disagrees: {oracle:?}"))?;
        ok_with(
            format!("arrival shifted by {} s (oracle delta {override_delta} s)", arr - baseline),
            json!({"before": {"arrival": baseline, "trips": baseline_trips}, "after": {"arrival": arr, "trips": trips}}),
        )
    });

    rec.run("replan-delay", || {
        let delays = feedgen::trip_delays(fx, &feed);
        let emissions = feedgen::arrival_emissions(fx, &feed, midnight);
        let mut latest: BTreeMap<String, NgsiEntity> = BTreeMap::new();
        for e in emissions.into_iter().filter(|e| e.t <= realtime_now) {
            latest.insert(e.entity.id.clone(), e.entity);
        }
        check(!latest.is_empty(), || "no estimations due yet".into())?;
        for e in latest.values() {
            broker.upsert_entity(e.clone()).map_err(|e| e.to_string())?;
        }
        broker.deliver_notifications();
        // A trip's observed delay starts at the first stop where it is the
        // next scheduled arrival of its line within the lookahead.
        let route_of: BTreeMap<&str, &str> =
            feed.trips.iter().map(|t| (t.trip_id.as_str(), t.route_id.as_str())).collect();
        let next_at = |route: &str, stop: &str| -> Option<(i64, String)> {
            feed.stop_times
                .iter()
                .filter(|s| s.stop_id == stop && route_of[s.trip_id.as_str()] == route)
                .map(|s| (midnight + i64::from(s.arrival), s.trip_id.clone()))
                .filter(|(t, _)| *t >= realtime_now)
                .min()
        };
        let mut first_observed: BTreeMap<String, u32> = BTreeMap::new();
        for s in &feed.stop_times {
            let route = route_of[s.trip_id.as_str()];
            let sched = midnight + i64::from(s.arrival);
            let covered = next_at(route, &s.stop_id).is_some_and(|(_, t)| t == s.trip_id)
                && sched - fx.arrivals.lookahead_seconds <= realtime_now;
            if covered {
                let e = first_observed.entry(s.trip_id.clone()).or_insert(s.stop_sequence);
                *e = (*e).min(s.stop_sequence);
            }
        }
        let shift = |t: &str, seq: u32| match first_observed.get(t) {
            Some(first) if seq >= *first => delays[t],
            _ => 0,
        };
        let predicted = direct_trip_oracle(&feed, midnight, &cfg.origin, &cfg.destination, depart, &shift)
            .ok_or("oracle finds no trip")?;
        let (arr, trips) = first_arrival(&router, &headline)?.ok_or("unreachable after delays")?;
        let oracle = router.exhaustive_earliest(&headline);
        check(arr == predicted, || format!("re-planned arrival {arr}, ground-truth oracle {predicted}"))?;
        check(Some(arr) == oracle, || format!("enumerator disagrees: {oracle:?}"))?;
        let delayed: BTreeMap<&String, &i64> = delays.iter().filter(|(_, d)| **d != 0).collect();
        ok_with(
            format!("delays {delayed:?}: arrival {} (shift {} s vs static)", hhmm(arr), arr - baseline),
            json!({"before": {"arrival": baseline, "trips": baseline_trips}, "after": {"arrival": arr, "trips": trips}}),
        )
    });

    rec.run("feed-update", || {
        router.set_realtime_source(RealtimeSource::None);
        router.clear_realtime();
        let removed = baseline_trips.first().cloned().ok_or("no baseline trip")?;
        broker.delete_entity(&removed).map_err(|e| e.to_string())?;
        for s in feed.stop_times.iter().filter(|s| s.trip_id == removed) {
            broker
                .delete_entity(&format!("{}:{}", s.trip_id, s.stop_sequence))
                .map_err(|e| e.to_string())?;
        }
        let (v2, zip) = ngsi_to_gtfs(&gtfs_entities(broker.as_ref())?).map_err(|e| e.to_string())?;
        let p = work.path("feed-v2.zip");
        std::fs::write(&p, zip).map_err(|e| e.to_string())?;
        publish_feed_entity(&path_str(&p), &cfg.feed_id, broker.as_ref(), clock.now())
            .map_err(|e| e.to_string())?;
        broker.deliver_notifications();
        let events = fetcher.process_pending();
        check(
            events.len() == 1 && matches!(events[0].outcome, ReloadOutcome::Reloaded { version: 2 }),
            || format!("unexpected reload events {events:?}"),
        )?;
        let resp = router.plan(&headline.clone().count(3)).map_err(|e| e.to_string())?;
        check(
            resp.version == 2 && resp.itineraries.iter().all(|i| !i.trip_ids().contains(&removed.as_str())),
            || format!("removed trip {removed} still offered"),
        )?;
        let (arr, trips) = first_arrival(&router, &headline)?.ok_or("unreachable after update")?;
        let direct = direct_trip_oracle(&v2, midnight, &cfg.origin, &cfg.destination, depart, &|_, _| 0);
        check(Some(arr) == direct && Some(arr) == router.exhaustive_earliest(&headline), || {
            format!("arrival {arr}, oracle {direct:?}")
        })?;
        after_update = Some((arr, trips.clone()));
        ok_with(
            format!("{removed} removed; version 2 arrives {}", hhmm(arr)),
            json!({"removed": removed, "itineraries": resp.itineraries.len(), "after": {"arrival": arr, "trips": trips}}),
        )
    });

    rec.run("fail-safe-reload", || {
        let p = work.path("feed-v3.zip");
        std::fs::write(&p, b"PK\x03\x04 truncated archive").map_err(|e| e.to_string())?;
        publish_feed_entity(&path_str(&p), &cfg.feed_id, broker.as_ref(), clock.now())
            .map_err(|e| e.to_string())?;
        broker.deliver_notifications();
        let events = fetcher.process_pending();
        let failed = events.iter().find_map(|e| match &e.outcome {
            ReloadOutcome::Failed { error } => Some(error.clone()),
            _ => None,
        });
        let error = failed.ok_or_else(|| format!("corrupted archive not rejected: {events:?}"))?;
        check(router.version() == 2, || format!("router moved to version {}", router.version()))?;
        let now = first_arrival(&router, &headline)?;
        check(now == after_update, || format!("stale graph answer changed: {now:?}"))?;
        ok(format!("fetch failed ({error}); served stale graph version 2"))
    });

    rec.finish("routing", fx.seed)
}

// ------------------------------------------------------------- estimation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EstimationScenarioConfig {
    pub fixture: CityFixture,
    pub training: TrainingConfig,
    /// Backfill size for regular series.
    pub history_samples: usize,
    /// Backfill size for the series that must stay below the gate.
    pub gate_samples: usize,
    pub simulated_seconds: i64,
    /// Held-out RMSE bound for the noise-free series.
    pub rmse_threshold: f64,
}

impl Default for EstimationScenarioConfig {
    fn default() -> Self {
        Self {
            fixture: CityFixture::default(),
            training: TrainingConfig::default(),
            history_samples: 2000,
            gate_samples: 999,
            simulated_seconds: 86_400,
            rmse_threshold: 1.0,
        }
    }
}

pub const NOISE_FREE_ENTITY: &str = "parking-clean";

struct EstimationSeries {
    profile: &'static str,
    entity: String,
    backfill: usize,
    /// Receives live samples from the stream.
    live: bool,
}

fn persistence_rmse(values: &[f64], test_rows: usize) -> f64 {
    let n = values.len();
    let tail = &values[n - test_rows - 1..];
    let sse: f64 = tail.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    (sse / test_rows as f64).sqrt()
}

pub fn run_scenario_estimation(cfg: &EstimationScenarioConfig) -> ScenarioReport {
    let fx = &cfg.fixture;
    let mut rec = Recorder::new(&ESTIMATION_STAGES);
    let work = match WorkDir::new("citykit-estimation") {
        Ok(w) => w,
        Err(e) => {
            rec.run("generate-streams", || Err(format!("cannot create work dir: {e}")));
            for (n, _) in &ESTIMATION_STAGES[1..] {
                rec.run(n, || ok(""));
            }
            return rec.finish("estimation", fx.seed);
        }
    };
    let start = fx.start_epoch();
    let end = start + cfg.simulated_seconds;
    let clock = Arc::new(SimClock::new(start));
    let shared: SharedClock = clock.clone();
    let broker = Arc::new(Broker::with_clock(Arc::clone(&shared)));
    let mut clean = fx.clone();
    clean.parking.noise_std = 0.0;

    let mut series: Vec<EstimationSeries> = Vec::new();
    for profile in ["parking", "traffic"] {
        let ids = feedgen::series_entity_ids(fx, profile);
        for (i, id) in ids.iter().enumerate() {
            let gate = profile == "parking" && i + 1 == ids.len() && ids.len() > 1;
            series.push(EstimationSeries {
                profile,
                entity: id.clone(),
                backfill: if gate { cfg.gate_samples } else { cfg.history_samples },
                live: true,
            });
        }
    }
    series.push(EstimationSeries {
        profile: "parking",
        entity: NOISE_FREE_ENTITY.into(),
        backfill: cfg.history_samples,
        live: false,
    });
    let fixture_for = |s: &EstimationSeries| if s.live { fx } else { &clean };

    let mut estimators: BTreeMap<&'static str, Arc<Estimator>> = BTreeMap::new();
    let mut live_emissions: Vec<feedgen::Emission> = Vec::new();
    let key_of = |s: &EstimationSeries| {
        let (_, attr) = feedgen::profile_entity_type(s.profile).expect("known profile");
        SeriesKey::new(s.entity.clone(), attr)
    };

    rec.run("generate-streams", || {
        for p in ["parking", "traffic"] {
            let profile = Profile::builtin(p).ok_or("unknown profile")?;
            let est = Estimator::new(cfg.training, profile, Arc::clone(&shared)).map_err(|e| e.to_string())?;
            est.set_broker(broker.clone(), true);
            estimators.insert(p, est);
        }
        for p in ["parking", "traffic"] {
            let mut lines = String::new();
            for s in series.iter().filter(|s| s.profile == p) {
                for r in feedgen::historical_records(fixture_for(s), p, &s.entity, s.backfill, start + 1) {
                    lines.push_str(&r.to_string());
                    lines.push('\n');
                }
            }
            std::fs::write(work.path(&format!("{p}-historical.jsonl")), lines).map_err(|e| e.to_string())?;
        }
        live_emissions = feedgen::sensor_emissions(fx, start + 1, end + 1)
            .into_iter()
            .filter(|e| e.entity.entity_type != "NoiseLevelObserved")
            .collect();
        for s in &series {
            let e = feedgen::sensor_entity(fixture_for(s), s.profile, &s.entity, start).ok_or("unknown profile")?;
            broker.upsert_entity(e).map_err(|e| e.to_string())?;
        }
        ok(format!(
            "{} series, {} live emissions over {} s",
            series.len(),
            live_emissions.len(),
            cfg.simulated_seconds
        ))
    });

    rec.run("ingest-historical", || {
        let mut detail = Vec::new();
        for (p, est) in &estimators {
            let r = est
                .ingest_historical(&path_str(&work.path(&format!("{p}-historical.jsonl"))))
                .map_err(|e| e.to_string())?;
            let expected: usize = series.iter().filter(|s| s.profile == *p).map(|s| s.backfill).sum();
            check(r.appended == expected && r.malformed == 0, || {
                format!("{p}: appended {}, expected {expected}", r.appended)
            })?;
            detail.push(format!("{p} {}", r.appended));
        }
        for s in &series {
            let n = estimators[s.profile].store().len_of(&key_of(s));
            check(n == s.backfill, || format!("{}: {n} samples stored", s.entity))?;
        }
        ok(format!("backfill appended: {}", detail.join(", ")))
    });

    rec.run("ingest-snapshot", || {
        for (p, est) in &estimators {
            let r = est.ingest_snapshot().map_err(|e| e.to_string())?;
            let expected = series.iter().filter(|s| s.profile == *p).count();
            check(r.appended == expected, || format!("{p}: snapshot gave {}", r.appended))?;
        }
        for s in &series {
            let n = estimators[s.profile].store().len_of(&key_of(s));
            check(n == s.backfill, || {
                format!("{}: last value did not coincide with the backfill tail ({n})", s.entity)
            })?;
        }
        ok("last values agree with the backfill tail")
    });

    rec.run("subscribe", || {
        let mut ids = Vec::new();
        for est in estimators.values() {
            ids.push(est.subscribe(None).map_err(|e| e.to_string())?);
        }
        for est in estimators.values() {
            est.start_schedule(start);
        }
        ok(format!("subscriptions {}", ids.join(", ")))
    });

    rec.run("simulate-day", || {
        let parking = Arc::clone(&estimators["parking"]);
        let traffic = Arc::clone(&estimators["traffic"]);
        let cursor = std::cell::Cell::new(0usize);
        let feed_until = |t: i64| {
            let mut i = cursor.get();
            while i < live_emissions.len() && live_emissions[i].t <= t {
                let _ = live_emissions[i].apply(broker.as_ref());
                i += 1;
            }
            cursor.set(i);
            broker.deliver_notifications();
        };
        parking.run_for(cfg.simulated_seconds, |t| {
            clock.set(t);
            feed_until(t);
            if t < end {
                traffic.tick();
            }
        });
        // Deliver notifications caused by the final writebacks.
        broker.deliver_notifications();
        check(clock.now() == end, || "clock did not reach the end".into())?;
        ok(format!("simulated {} s to {}", cfg.simulated_seconds, format_iso8601(end)))
    });

    rec.run("ingest-subscription", || {
        let dt = |p: &str| fx.series_specs().iter().find(|(n, _)| *n == p).map_or(900, |(_, s)| s.sampling_interval_seconds);
        for s in &series {
            let live = if s.live { cfg.simulated_seconds / dt(s.profile) } else { 0 } as usize;
            let n = estimators[s.profile].store().len_of(&key_of(s));
            check(n == s.backfill + live, || {
                format!("{}: {n} samples, expected {}", s.entity, s.backfill + live)
            })?;
        }
        ok("every live sample arrived through the subscription")
    });

    rec.run("gate-check", || {
        let mut out = Vec::new();
        for s in &series {
            let est = &estimators[s.profile];
            let k = key_of(s);
            let has = est.model(&k).is_some();
            let want = s.backfill >= cfg.training.min_samples;
            check(has == want, || {
                format!("{}: {} samples at training, model present = {has}", s.entity, s.backfill)
            })?;
            if !want {
                let st = est.series_stats(&k);
                check(st.skipped >= 1, || format!("{}: skip not recorded", s.entity))?;
                out.push(format!("{} skipped: below minSamples ({})", s.entity, s.backfill));
            }
        }
        ok(if out.is_empty() { "all series trained".to_string() } else { out.join("; ") })
    });

    rec.run("schedule-counts", || {
        let per_day = |period: i64| (cfg.simulated_seconds + period - 1) / period;
        let trains = per_day(cfg.training.retrain_period_seconds) as u64;
        let infers = per_day(cfg.training.inference_period_seconds) as u64;
        let mut counts = serde_json::Map::new();
        for s in &series {
            let est = &estimators[s.profile];
            let k = key_of(s);
            let st = est.series_stats(&k);
            let modeled = est.model(&k).is_some();
            let want_inf = if modeled { infers } else { 0 };
            check(st.train_invocations == trains && st.inferences == want_inf, || {
                format!(
                    "{}: {} trainings / {} inferences, expected {trains} / {want_inf}",
                    s.entity, st.train_invocations, st.inferences
                )
            })?;
            counts.insert(s.entity.clone(), json!({"trainings": st.train_invocations, "inferences": st.inferences}));
        }
        ok_with(format!("{trains} retrain and {infers} inferences per modeled series"), Value::Object(counts))
    });

    rec.run("forecast-vs-naive", || {
        let mut rows = serde_json::Map::new();
        for s in series.iter().filter(|s| s.live) {
            let est = &estimators[s.profile];
            let k = key_of(s);
            let Some(m) = est.model(&k) else { continue };
            let at_training: Vec<f64> = est
                .store()
                .range(&k, None, Some(m.trained_at))
                .unwrap_or_default()
                .iter()
                .map(|x| x.value)
                .collect();
            let window = &at_training[at_training.len().saturating_sub(cfg.training.window_size)..];
            let naive = persistence_rmse(window, m.test_rows);
            check(m.test_error < naive, || {
                format!("{}: model RMSE {:.4} not below persistence {naive:.4}", s.entity, m.test_error)
            })?;
            rows.insert(s.entity.clone(), json!({"model": m.test_error, "naive": naive}));
        }
        check(!rows.is_empty(), || "no trained series".into())?;
        ok_with("every model beats persistence on its held-out tail", Value::Object(rows))
    });

    rec.run("noise-free-rmse", || {
        let s = series.iter().find(|s| !s.live).ok_or("no noise-free series")?;
        let m = estimators[s.profile].model(&key_of(s)).ok_or("noise-free series has no model")?;
        check(m.test_error < cfg.rmse_threshold, || {
            format!("held-out RMSE {:.4} >= {}", m.test_error, cfg.rmse_threshold)
        })?;
        ok(format!("held-out RMSE {:.4} < {}", m.test_error, cfg.rmse_threshold))
    });

    rec.run("writeback", || {
        for s in &series {
            let est = &estimators[s.profile];
            let k = key_of(s);
            let e = broker
                .get_entity(&s.entity)
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("{} missing", s.entity))?;
            let attr = format!("{}Forecast", k.attribute);
            match (est.model(&k).is_some(), e.attr(&attr)) {
                (true, Some(a)) => {
                    for meta in ["horizonStart", "horizonEnd", "issuedAt"] {
                        check(a.metadata.contains_key(meta), || format!("{}: {attr} lacks {meta}", s.entity))?;
                    }
                    check(est.series_stats(&k).writeback_failures == 0, || {
                        format!("{}: writeback failures", s.entity)
                    })?;
                }
                (true, None) => return Err(format!("{}: {attr} not written back", s.entity)),
                (false, Some(_)) => return Err(format!("{}: forecast without a model", s.entity)),
                (false, None) => {}
            }
        }
        ok("forecast attributes present on every modeled entity")
    });

    rec.finish("estimation", fx.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skipped_stages_after_failure() {
        let mut rec = Recorder::new(&ROUTING_STAGES);
        rec.run("generate-network", || ok("fine"));
        rec.run("publish-entities", || Err("boom".into()));
        for (n, _) in &ROUTING_STAGES[2..] {
            rec.run(n, || ok("never"));
        }
        let r = rec.finish("routing", 1);
        assert!(!r.passed);
        assert_eq!(r.stages[1].status, StageStatus::Fail);
        assert!(r.stages[2..].iter().all(|s| s.status == StageStatus::Skipped));
    }

    #[test]
    fn persistence_baseline() {
        assert_eq!(persistence_rmse(&[0.0, 1.0, 3.0], 2), (2.5f64).sqrt());
    }
}
