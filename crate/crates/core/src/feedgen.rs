//! Deterministic synthetic city: transit network entities, sensor streams,
//! ArrivalEstimation streams, defect-seeded corpora and ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::broker::{BrokerError, ContextBroker};
use crate::data_models::RuleKind;
use crate::gtfs::{
    feed_to_ngsi, parse_gtfs_date, Agency, GtfsFeed, GtfsRtFeed, Route, Service,
    Stop, StopTime, StopTimeUpdate, Trip, TripUpdate,
};
use crate::ngsi::{format_iso8601, parse_iso8601, Attribute, NgsiEntity};

#[derive(Debug, Error)]
pub enum FeedgenError {
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct SeriesSpec {
    pub entities: usize,
    pub baseline: f64,
    pub daily_amplitude: f64,
    pub noise_std: f64,
    pub sampling_interval_seconds: i64,
    /// Upper clamp (parking capacity, noise ceiling).
    pub capacity: Option<f64>,
}

impl Default for SeriesSpec {
    fn default() -> Self {
        Self {
            entities: 2,
            baseline: 60.0,
            daily_amplitude: 30.0,
            noise_std: 1.5,
            sampling_interval_seconds: 900,
            capacity: Some(120.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TripDelay {
    pub trip: String,
    pub seconds: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ArrivalSpec {
    pub emission_interval_seconds: i64,
    /// How long before the scheduled arrival estimations start.
    pub lookahead_seconds: i64,
    /// Standard deviation of the seeded random delay per trip, seconds.
    pub delay_std: f64,
    pub delays: Vec<TripDelay>,
}

impl Default for ArrivalSpec {
    fn default() -> Self {
        Self {
            emission_interval_seconds: 60,
            lookahead_seconds: 1200,
            delay_std: 0.0,
            delays: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct DefectPlan {
    pub missing_required: usize,
    pub wrong_type: usize,
    pub out_of_range: usize,
    pub not_in_enum: usize,
    pub pattern_mismatch: usize,
    pub unknown_entity_type: usize,
}

impl DefectPlan {
    pub fn count(&self, kind: RuleKind) -> usize {
        match kind {
            RuleKind::MissingRequired => self.missing_required,
            RuleKind::WrongType => self.wrong_type,
            RuleKind::OutOfRange => self.out_of_range,
            RuleKind::NotInEnum => self.not_in_enum,
            RuleKind::PatternMismatch => self.pattern_mismatch,
            RuleKind::UnknownEntityType => self.unknown_entity_type,
        }
    }

    pub fn total(&self) -> usize {
        RuleKind::ALL.iter().map(|k| self.count(*k)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct CityFixture {
    pub seed: u64,
    pub service_start: String,
    pub service_end: String,
    /// Start of simulated time (ISO 8601).
    pub start_time: String,
    pub parking: SeriesSpec,
    pub traffic: SeriesSpec,
    pub noise: SeriesSpec,
    pub arrivals: ArrivalSpec,
    pub corpus_size: usize,
    pub defects: DefectPlan,
}

impl Default for CityFixture {
    fn default() -> Self {
        Self {
            seed: 42,
            service_start: "20260101".into(),
            service_end: "20261231".into(),
            start_time: "2026-06-01T00:00:00Z".into(),
            parking: SeriesSpec::default(),
            traffic: SeriesSpec {
                baseline: 100.0,
                daily_amplitude: 400.0,
                noise_std: 20.0,
                capacity: None,
                ..SeriesSpec::default()
            },
            noise: SeriesSpec {
                baseline: 55.0,
                daily_amplitude: 10.0,
                noise_std: 0.5,
                capacity: Some(140.0),
                ..SeriesSpec::default()
            },
            arrivals: ArrivalSpec::default(),
            corpus_size: 200,
            defects: DefectPlan::default(),
        }
    }
}

impl CityFixture {
    pub fn from_toml(text: &str) -> Result<Self, FeedgenError> {
        let f: Self = toml::from_str(text).map_err(|e| FeedgenError::InvalidFixture(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, FeedgenError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), FeedgenError> {
        let bad = |m: String| Err(FeedgenError::InvalidFixture(m));
        let (s, e) = (self.service_start_date(), self.service_end_date());
        match (s, e) {
            (Some(s), Some(e)) if s <= e => {}
            _ => return bad("serviceStart/serviceEnd must be YYYYMMDD with start <= end".into()),
        }
        if parse_iso8601(&self.start_time).is_none() {
            return bad("startTime must be ISO 8601".into());
        }
        for (name, spec) in self.series_specs() {
            if spec.sampling_interval_seconds <= 0 || !(spec.noise_std >= 0.0) {
                return bad(format!("{name}: interval must be positive and noiseStd >= 0"));
            }
        }
        if self.arrivals.emission_interval_seconds <= 0 || self.arrivals.lookahead_seconds < 0 {
            return bad("arrivals: emission interval must be positive".into());
        }
        if self.defects.total() > self.corpus_size {
            return bad("defect plan exceeds corpus size".into());
        }
        Ok(())
    }

    fn service_start_date(&self) -> Option<NaiveDate> {
        parse_gtfs_date(&self.service_start)
    }

    fn service_end_date(&self) -> Option<NaiveDate> {
        parse_gtfs_date(&self.service_end)
    }

    pub fn start_epoch(&self) -> i64 {
        parse_iso8601(&self.start_time).map_or(0, |t| t.floor() as i64)
    }

    /// Midnight of the service day containing the start time.
    pub fn service_day_midnight(&self) -> i64 {
        let t = self.start_epoch();
        t - t.rem_euclid(86_400)
    }

    pub fn series_specs(&self) -> [(&'static str, &SeriesSpec); 3] {
        [
            ("parking", &self.parking),
            ("traffic", &self.traffic),
            ("noise", &self.noise),
        ]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Independent generator per (seed, stream, step), so a value never depends
/// on the generation window.
fn stream_rng(seed: u64, stream: &str, step: i64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(fnv1a(stream) ^ step as u64)))
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    }
}

// ---------------------------------------------------------------- network

pub const TOY_AGENCY: &str = "agency1";
pub const TOY_SERVICE: &str = "DAILY";

fn hms(h: u32, m: u32) -> u32 {
    h * 3600 + m * 60
}

/// The canonical 5-stop, 2-route network: R1 runs S1-S2-S3-S4, R2 runs
/// S1-S5-S3-S4, two trips each.
pub fn toy_feed(fixture: &CityFixture) -> GtfsFeed {
    let stops = [
        ("S1", "Marche", 46.1800, 6.1400),
        ("S2", "Rondeau", 46.1900, 6.1400),
        ("S3", "Pont-Rouge", 46.2000, 6.1400),
        ("S4", "Gare", 46.2100, 6.1400),
        ("S5", "Armes", 46.1950, 6.1500),
    ];
    let trips: [(&str, &str, [(&str, u32); 4]); 4] = [
        ("T1", "R1", [("S1", hms(8, 5)), ("S2", hms(8, 10)), ("S3", hms(8, 15)), ("S4", hms(8, 20))]),
        ("T2", "R1", [("S1", hms(8, 35)), ("S2", hms(8, 40)), ("S3", hms(8, 45)), ("S4", hms(8, 50))]),
        ("T3", "R2", [("S1", hms(8, 10)), ("S5", hms(8, 15)), ("S3", hms(8, 21)), ("S4", hms(8, 28))]),
        ("T4", "R2", [("S1", hms(8, 40)), ("S5", hms(8, 45)), ("S3", hms(8, 51)), ("S4", hms(8, 58))]),
    ];
    let mut feed = GtfsFeed {
        agencies: vec![Agency {
            agency_id: TOY_AGENCY.into(),
            name: "Carouge Transit".into(),
            url: "https://transit.example.org".into(),
            timezone: "Europe/Zurich".into(),
        }],
        stops: stops
            .iter()
            .map(|(id, name, lat, lon)| Stop {
                stop_id: (*id).into(),
                name: (*name).into(),
                lat: *lat,
                lon: *lon,
            })
            .collect(),
        routes: [("R1", "12"), ("R2", "18")]
            .iter()
            .map(|(id, short)| Route {
                route_id: (*id).into(),
                agency_id: TOY_AGENCY.into(),
                short_name: (*short).into(),
                route_type: 0,
            })
            .collect(),
        trips: trips
            .iter()
            .map(|(t, r, _)| Trip {
                trip_id: (*t).into(),
                route_id: (*r).into(),
                service_id: TOY_SERVICE.into(),
            })
            .collect(),
        stop_times: trips
            .iter()
            .flat_map(|(t, _, calls)| {
                calls.iter().enumerate().map(move |(i, (s, time))| StopTime {
                    trip_id: (*t).into(),
                    stop_sequence: i as u32 + 1,
                    stop_id: (*s).into(),
                    arrival: *time,
                    departure: *time,
                })
            })
            .collect(),
        services: vec![Service {
            service_id: TOY_SERVICE.into(),
            weekdays: [true; 7],
            start_date: fixture.service_start_date().expect("validated fixture"),
            end_date: fixture.service_end_date().expect("validated fixture"),
        }],
    };
    feed.normalize();
    feed
}

/// Static network as NGSI `Gtfs*` entities.
pub fn generate_static_network(fixture: &CityFixture) -> Vec<NgsiEntity> {
    feed_to_ngsi(&toy_feed(fixture))
}

/// Limits for [`random_network`].
#[derive(Debug, Clone, Copy)]
pub struct RandomNetworkSpec {
    pub max_stops: usize,
    pub max_routes: usize,
    pub max_trips_per_route: usize,
    /// Half-width of the stop bounding box, degrees of latitude.
    pub extent_deg: f64,
}

impl Default for RandomNetworkSpec {
    fn default() -> Self {
        Self {
            max_stops: 10,
            max_routes: 5,
            max_trips_per_route: 3,
            extent_deg: 0.01,
        }
    }
}

/// A random valid feed on one daily service, trips between 07:00 and 09:30.
pub fn random_network(seed: u64, spec: RandomNetworkSpec, fixture: &CityFixture) -> GtfsFeed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_stops = rng.random_range(2..=spec.max_stops.max(2));
    let stops: Vec<Stop> = (0..n_stops)
        .map(|i| Stop {
            stop_id: format!("S{i}"),
            name: format!("Stop {i}"),
            lat: 46.2 + rng.random_range(-spec.extent_deg..=spec.extent_deg),
            lon: 6.14 + rng.random_range(-spec.extent_deg..=spec.extent_deg),
        })
        .collect();
    let n_routes = rng.random_range(1..=spec.max_routes.max(1));
    let mut routes = Vec::new();
    let mut trips = Vec::new();
    let mut stop_times = Vec::new();
    for r in 0..n_routes {
        let route_id = format!("R{r}");
        routes.push(Route {
            route_id: route_id.clone(),
            agency_id: TOY_AGENCY.into(),
            short_name: format!("{r}"),
            route_type: 3,
        });
        let len = rng.random_range(2..=n_stops.min(5));
        let mut ids: Vec<usize> = (0..n_stops).collect();
        ids.shuffle(&mut rng);
        let pattern = &ids[..len];
        let hops: Vec<u32> = (1..len).map(|_| rng.random_range(60..=600)).collect();
        let n_trips = rng.random_range(1..=spec.max_trips_per_route.max(1));
        for k in 0..n_trips {
            let trip_id = format!("R{r}T{k}");
            trips.push(Trip {
                trip_id: trip_id.clone(),
                route_id: route_id.clone(),
                service_id: TOY_SERVICE.into(),
            });
            let mut t = rng.random_range(hms(7, 0)..=hms(9, 0));
            for (i, s) in pattern.iter().enumerate() {
                if i > 0 {
                    t += hops[i - 1] + rng.random_range(0..=60);
                }
                let dwell = rng.random_range(0..=30);
                stop_times.push(StopTime {
                    trip_id: trip_id.clone(),
                    stop_sequence: i as u32 + 1,
                    stop_id: stops[*s].stop_id.clone(),
                    arrival: t,
                    departure: t + dwell,
                });
                t += dwell;
            }
        }
    }
    let mut feed = GtfsFeed {
        agencies: vec![Agency {
            agency_id: TOY_AGENCY.into(),
            name: "Random Transit".into(),
            url: "https://random.example.org".into(),
            timezone: "Europe/Zurich".into(),
        }],
        stops,
        routes,
        trips,
        stop_times,
        services: vec![Service {
            service_id: TOY_SERVICE.into(),
            weekdays: [true; 7],
            start_date: fixture.service_start_date().expect("validated fixture"),
            end_date: fixture.service_end_date().expect("validated fixture"),
        }],
    };
    feed.normalize();
    feed
}

/// Random realtime updates for about half the trips of `feed`, mixing
/// `delaySeconds` and `arrivalOverride` (relative to `midnight`).
pub fn random_realtime(seed: u64, feed: &GtfsFeed, midnight: i64) -> GtfsRtFeed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_DE1A);
    let by_trip = feed.stop_times_by_trip();
    let mut trip_updates = Vec::new();
    for (trip, calls) in by_trip {
        if !rng.random_bool(0.5) {
            continue;
        }
        let c = calls[rng.random_range(0..calls.len())];
        let delta: i64 = rng.random_range(-300..=900);
        let up = if rng.random_bool(0.5) {
            StopTimeUpdate {
                stop_sequence: Some(c.stop_sequence),
                stop_id: None,
                arrival_override: None,
                delay_seconds: Some(delta),
            }
        } else {
            StopTimeUpdate {
                stop_sequence: Some(c.stop_sequence),
                stop_id: Some(c.stop_id.clone()),
                arrival_override: Some(midnight + i64::from(c.arrival) + delta),
                delay_seconds: None,
            }
        };
        trip_updates.push(TripUpdate {
            trip_id: trip.to_string(),
            stop_time_updates: vec![up],
        });
    }
    GtfsRtFeed {
        header_timestamp: midnight + i64::from(hms(7, 0)),
        trip_updates,
    }
}

// ---------------------------------------------------------------- streams

/// Closed-form daily profile plus seeded gaussian noise, clamped.
pub fn series_value(fixture: &CityFixture, profile: &str, entity: &str, t: i64) -> Option<f64> {
    let spec = match profile {
        "parking" => &fixture.parking,
        "traffic" => &fixture.traffic,
        "noise" => &fixture.noise,
        _ => return None,
    };
    let step = t.div_euclid(spec.sampling_interval_seconds);
    let mut rng = stream_rng(fixture.seed, &format!("{profile}/{entity}"), step);
    let noise = gaussian(&mut rng, spec.noise_std);
    let day = (t.rem_euclid(86_400)) as f64;
    let v = match profile {
        "traffic" => {
            let h = day / 3600.0;
            let peak = |c: f64| (-((h - c) / 1.5).powi(2) / 2.0).exp();
            (spec.baseline + spec.daily_amplitude * (peak(8.0) + peak(17.5)) + noise)
                .clamp(0.0, spec.capacity.unwrap_or(f64::INFINITY))
        }
        "noise" => ((spec.baseline + spec.daily_amplitude * (2.0 * PI * day / 86_400.0).sin() + noise)
            .clamp(0.0, spec.capacity.unwrap_or(f64::INFINITY))
            * 10.0)
            .round()
            / 10.0,
        _ => (spec.baseline + spec.daily_amplitude * (2.0 * PI * day / 86_400.0).sin() + noise)
            .round()
            .clamp(0.0, spec.capacity.unwrap_or(f64::INFINITY)),
    };
    Some(v)
}

pub fn profile_entity_type(profile: &str) -> Option<(&'static str, &'static str)> {
    match profile {
        "parking" => Some(("OnStreetParking", "availableSpotNumber")),
        "traffic" => Some(("TrafficFlowObserved", "intensity")),
        "noise" => Some(("NoiseLevelObserved", "LAeq")),
        _ => None,
    }
}

pub fn series_entity_ids(fixture: &CityFixture, profile: &str) -> Vec<String> {
    let n = match profile {
        "parking" => fixture.parking.entities,
        "traffic" => fixture.traffic.entities,
        "noise" => fixture.noise.entities,
        _ => 0,
    };
    let prefix = match profile {
        "parking" => "parking",
        "traffic" => "traffic",
        _ => "noise",
    };
    (1..=n).map(|i| format!("{prefix}-{i:03}")).collect()
}

/// Full entity state of a sensor at time `t`.
pub fn sensor_entity(fixture: &CityFixture, profile: &str, entity_id: &str, t: i64) -> Option<NgsiEntity> {
    let (etype, attr) = profile_entity_type(profile)?;
    let v = series_value(fixture, profile, entity_id, t)?;
    let mut e = NgsiEntity::new(entity_id, etype)
        .with(attr, Attribute::number(v))
        .with("dateObserved", Attribute::date_time(format_iso8601(t)));
    if profile == "parking" {
        e = e.with("totalSpotNumber", Attribute::number(fixture.parking.capacity.unwrap_or(120.0)));
    }
    Some(e)
}

/// One timed entity emission.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Emission {
    pub t: i64,
    pub entity: NgsiEntity,
}

impl Emission {
    /// Patches the entity's attributes, creating it when absent.
    pub fn apply(&self, broker: &dyn ContextBroker) -> Result<(), BrokerError> {
        match broker.update_attributes(&self.entity.id, self.entity.attributes.clone()) {
            Err(BrokerError::NotFound(_)) => broker.upsert_entity(self.entity.clone()).map(|_| ()),
            other => other.map(|_| ()),
        }
    }
}

/// Sensor emissions for all series entities on `[start, end)`, aligned to
/// each series' sampling grid, ordered by time then entity id.
pub fn sensor_emissions(fixture: &CityFixture, start: i64, end: i64) -> Vec<Emission> {
    let mut out = Vec::new();
    for (profile, spec) in fixture.series_specs() {
        let dt = spec.sampling_interval_seconds;
        let first = start + (dt - start.rem_euclid(dt)) % dt;
        for id in series_entity_ids(fixture, profile) {
            let mut t = first;
            while t < end {
                out.push(Emission {
                    t,
                    entity: sensor_entity(fixture, profile, &id, t).expect("known profile"),
                });
                t += dt;
            }
        }
    }
    out.sort_by(|a, b| (a.t, &a.entity.id).cmp(&(b.t, &b.entity.id)));
    out
}

/// Historical JSON-lines records `{entityId, attr, t, value}` for one series:
/// `n` samples ending just before `end`.
pub fn historical_records(fixture: &CityFixture, profile: &str, entity_id: &str, n: usize, end: i64) -> Vec<Value> {
    let Some((_, attr)) = profile_entity_type(profile) else {
        return Vec::new();
    };
    let dt = fixture.series_specs().iter().find(|(p, _)| *p == profile).map_or(900, |(_, s)| s.sampling_interval_seconds);
    let last = end - 1 - (end - 1).rem_euclid(dt);
    (0..n)
        .map(|i| {
            let t = last - ((n - 1 - i) as i64) * dt;
            json!({
                "entityId": entity_id,
                "attr": attr,
                "t": t,
                "value": series_value(fixture, profile, entity_id, t).expect("known profile"),
            })
        })
        .collect()
}

/// Delay (seconds) applied to each trip of the toy network: explicit fixture
/// delays, else a seeded gaussian draw (zero when `delayStd` is 0).
pub fn trip_delays(fixture: &CityFixture, feed: &GtfsFeed) -> BTreeMap<String, i64> {
    feed.trips
        .iter()
        .map(|t| {
            let explicit = fixture.arrivals.delays.iter().find(|d| d.trip == t.trip_id);
            let d = match explicit {
                Some(d) => d.seconds,
                None => {
                    let mut rng = stream_rng(fixture.seed, &format!("delay/{}", t.trip_id), 0);
                    gaussian(&mut rng, fixture.arrivals.delay_std).round() as i64
                }
            };
            (t.trip_id.clone(), d)
        })
        .collect()
}

pub fn arrival_entity_id(route: &str, stop: &str) -> String {
    format!("ae-{route}-{stop}")
}

/// ArrivalEstimation emissions for the service day at `midnight`. Each
/// (line, stop) entity counts down to the next trip's actual arrival
/// (timetable plus delay) and only covers times at which that trip is the
/// next scheduled one at the stop.
pub fn arrival_emissions(fixture: &CityFixture, feed: &GtfsFeed, midnight: i64) -> Vec<Emission> {
    let delays = trip_delays(fixture, feed);
    let route_of: BTreeMap<&str, &str> = feed
        .trips
        .iter()
        .map(|t| (t.trip_id.as_str(), t.route_id.as_str()))
        .collect();
    // (route, stop) -> [(scheduled arrival, trip id)]
    let mut calls: BTreeMap<(&str, &str), Vec<(i64, &str)>> = BTreeMap::new();
    for st in &feed.stop_times {
        let route = route_of[st.trip_id.as_str()];
        calls
            .entry((route, st.stop_id.as_str()))
            .or_default()
            .push((midnight + i64::from(st.arrival), st.trip_id.as_str()));
    }
    let step = fixture.arrivals.emission_interval_seconds;
    let mut out = Vec::new();
    for ((route, stop), mut list) in calls {
        list.sort();
        let mut prev_sched: Option<i64> = None;
        for (sched, trip) in list {
            let actual = sched + delays[trip];
            let lo = (sched - fixture.arrivals.lookahead_seconds).max(prev_sched.map_or(i64::MIN, |p| p + 1));
            let mut t = lo + (step - lo.rem_euclid(step)) % step;
            while t <= sched && t <= actual {
                out.push(Emission {
                    t,
                    entity: NgsiEntity::new(arrival_entity_id(route, stop), "ArrivalEstimation")
                        .with("refLine", Attribute::reference(route))
                        .with("refStop", Attribute::reference(stop))
                        .with("remainingTime", Attribute::integer(actual - t))
                        .with("dateObserved", Attribute::date_time(format_iso8601(t))),
                });
                t += step;
            }
            prev_sched = Some(sched);
        }
    }
    out.sort_by(|a, b| (a.t, &a.entity.id).cmp(&(b.t, &b.entity.id)));
    out
}

// ----------------------------------------------------------------- corpus

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeededDefect {
    pub index: usize,
    pub entity_id: String,
    pub rule_kind: RuleKind,
    pub attribute: String,
}

fn valid_entity(kind: usize, i: usize, rng: &mut ChaCha8Rng) -> NgsiEntity {
    let id = format!("e{i:04}");
    let when = format_iso8601(1_780_272_000 + rng.random_range(0..86_400));
    match kind % 7 {
        0 => NgsiEntity::new(id, "ParkingSpot")
            .with(
                "status",
                Attribute::text(["free", "occupied", "closed", "unknown"][rng.random_range(0..4)]),
            )
            .with("refParkingSite", Attribute::reference(format!("site-{}", rng.random_range(1..9))))
            .with("dateObserved", Attribute::date_time(when)),
        1 => {
            let total = rng.random_range(10..200);
            NgsiEntity::new(id, "OnStreetParking")
                .with("totalSpotNumber", Attribute::integer(total))
                .with("availableSpotNumber", Attribute::integer(rng.random_range(0..=total)))
                .with("dateObserved", Attribute::date_time(when))
        }
        2 => NgsiEntity::new(id, "TrafficFlowObserved")
            .with("intensity", Attribute::number(rng.random_range(0.0..900.0_f64).round()))
            .with("occupancy", Attribute::number((rng.random_range(0.0..1.0_f64) * 100.0).round() / 100.0))
            .with("averageVehicleSpeed", Attribute::number(rng.random_range(5.0..80.0_f64).round()))
            .with("dateObserved", Attribute::date_time(when)),
        3 => NgsiEntity::new(id, "NoiseLevelObserved")
            .with("LAeq", Attribute::number((rng.random_range(30.0..90.0_f64) * 10.0).round() / 10.0))
            .with("dateObserved", Attribute::date_time(when)),
        4 => NgsiEntity::new(id, "ArrivalEstimation")
            .with("refStop", Attribute::reference(format!("S{}", rng.random_range(1..6))))
            .with("refLine", Attribute::reference(format!("R{}", rng.random_range(1..3))))
            .with("remainingTime", Attribute::integer(rng.random_range(0..1200))),
        5 => NgsiEntity::new(id, "GtfsService")
            .with("weekdays", Attribute::text("1111100"))
            .with("startDate", Attribute::text("20260101"))
            .with("endDate", Attribute::text("20261231")),
        _ => NgsiEntity::new(id, "GtfsTransitFeedFile")
            .with("url", Attribute::text(format!("https://feeds.example.org/{i}.zip")))
            .with("dateModified", Attribute::date_time(when)),
    }
}

/// Entity type family suited to each defect kind, plus the attribute hit.
fn apply_defect(kind: RuleKind, i: usize, slot: usize, rng: &mut ChaCha8Rng) -> (NgsiEntity, String) {
    match kind {
        RuleKind::MissingRequired => {
            let mut e = valid_entity(slot, i, rng);
            let schema_required = match e.entity_type.as_str() {
                "ParkingSpot" => "status",
                "OnStreetParking" => "totalSpotNumber",
                "TrafficFlowObserved" => "intensity",
                "NoiseLevelObserved" => "LAeq",
                "ArrivalEstimation" => "remainingTime",
                "GtfsService" => "weekdays",
                _ => "url",
            };
            e.attributes.remove(schema_required);
            (e, schema_required.to_string())
        }
        RuleKind::WrongType => {
            let mut e = valid_entity([1, 2, 3, 4][slot % 4], i, rng);
            let attr = match e.entity_type.as_str() {
                "OnStreetParking" => "availableSpotNumber",
                "TrafficFlowObserved" => "intensity",
                "NoiseLevelObserved" => "LAeq",
                _ => "remainingTime",
            };
            e.attributes.insert(attr.into(), Attribute::text("n/a"));
            (e, attr.to_string())
        }
        RuleKind::OutOfRange => {
            let mut e = valid_entity([1, 2, 3, 4][slot % 4], i, rng);
            let (attr, v) = match e.entity_type.as_str() {
                "OnStreetParking" => {
                    let total = e.attr("totalSpotNumber").and_then(Attribute::as_f64).unwrap_or(10.0);
                    ("availableSpotNumber", total + 1.0 + f64::from(rng.random_range(0..5u8)))
                }
                "TrafficFlowObserved" => ("occupancy", 1.5),
                "NoiseLevelObserved" => ("LAeq", 150.0 + f64::from(rng.random_range(0..50u8))),
                _ => ("remainingTime", -30.0),
            };
            e.attributes.insert(attr.into(), Attribute::number(v));
            (e, attr.to_string())
        }
        RuleKind::NotInEnum => {
            let mut e = valid_entity(0, i, rng);
            e.attributes.insert("status".into(), Attribute::text(["broken", "reserved", "FREE"][slot % 3]));
            (e, "status".to_string())
        }
        RuleKind::PatternMismatch => {
            let mut e = valid_entity([5, 6][slot % 2], i, rng);
            let attr = if e.entity_type == "GtfsService" {
                e.attributes.insert("weekdays".into(), Attribute::text("1111102"));
                "weekdays"
            } else {
                e.attributes
                    .insert("url".into(), Attribute::text(format!("ftp://feeds.example.org/{i}.zip")));
                "url"
            };
            (e, attr.to_string())
        }
        RuleKind::UnknownEntityType => {
            let mut e = valid_entity(slot, i, rng);
            e.entity_type = ["WeatherObserved", "AirQualityObserved", "BikeHireDockingStation"][slot % 3].into();
            (e, "type".to_string())
        }
    }
}

/// `corpusSize` entities with exactly the planned number of single-violation
/// defects at seeded positions. Returns the corpus and its ground truth.
pub fn generate_corpus(fixture: &CityFixture) -> (Vec<NgsiEntity>, Vec<SeededDefect>) {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(fixture.seed ^ fnv1a("corpus")));
    let mut plan: Vec<Option<RuleKind>> = Vec::with_capacity(fixture.corpus_size);
    for kind in RuleKind::ALL {
        plan.extend(std::iter::repeat_n(Some(kind), fixture.defects.count(kind)));
    }
    plan.resize(fixture.corpus_size.max(plan.len()), None);
    plan.shuffle(&mut rng);
    let mut per_kind: BTreeMap<RuleKind, usize> = BTreeMap::new();
    let mut entities = Vec::with_capacity(plan.len());
    let mut truth = Vec::new();
    for (i, slot) in plan.into_iter().enumerate() {
        match slot {
            None => entities.push(valid_entity(i, i, &mut rng)),
            Some(kind) => {
                let n = per_kind.entry(kind).or_default();
                let (e, attribute) = apply_defect(kind, i, *n, &mut rng);
                *n += 1;
                truth.push(SeededDefect {
                    index: i,
                    entity_id: e.id.clone(),
                    rule_kind: kind,
                    attribute,
                });
                entities.push(e);
            }
        }
    }
    (entities, truth)
}

// ----------------------------------------------------------------- output

/// Ground-truth JSON lines: trip delays, seeded defects and series specs.
pub fn ground_truth(fixture: &CityFixture) -> Vec<Value> {
    let feed = toy_feed(fixture);
    let mut out: Vec<Value> = trip_delays(fixture, &feed)
        .into_iter()
        .map(|(trip, d)| json!({"kind": "tripDelay", "tripId": trip, "delaySeconds": d}))
        .collect();
    let (_, defects) = generate_corpus(fixture);
    out.extend(defects.into_iter().map(|d| {
        let mut v = serde_json::to_value(d).expect("serializable");
        v["kind"] = json!("defect");
        v
    }));
    for (profile, spec) in fixture.series_specs() {
        for id in series_entity_ids(fixture, profile) {
            out.push(json!({"kind": "series", "profile": profile, "entityId": id, "spec": spec}));
        }
    }
    out
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), FeedgenError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| FeedgenError::InvalidFixture(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn write_jsonl(path: &Path, rows: &[Value]) -> Result<(), FeedgenError> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes `network.json`, `corpus.json`, `sensors.jsonl` (one simulated day),
/// `historical.jsonl` (2,000 samples per series before the start),
/// `arrivals.json` and `ground-truth.jsonl` into `dir`.
pub fn write_outputs(fixture: &CityFixture, dir: &Path) -> Result<Vec<String>, FeedgenError> {
    std::fs::create_dir_all(dir)?;
    let start = fixture.start_epoch();
    let feed = toy_feed(fixture);
    write_json(&dir.join("network.json"), &feed_to_ngsi(&feed))?;
    write_json(&dir.join("corpus.json"), &generate_corpus(fixture).0)?;
    let sensors: Vec<Value> = sensor_emissions(fixture, start, start + 86_400)
        .into_iter()
        .map(|e| json!({"t": e.t, "entity": e.entity}))
        .collect();
    write_jsonl(&dir.join("sensors.jsonl"), &sensors)?;
    let mut hist = Vec::new();
    for (profile, _) in fixture.series_specs() {
        for id in series_entity_ids(fixture, profile) {
            hist.extend(historical_records(fixture, profile, &id, 2000, start));
        }
    }
    write_jsonl(&dir.join("historical.jsonl"), &hist)?;
    let arrivals = arrival_emissions(fixture, &feed, fixture.service_day_midnight());
    write_json(&dir.join("arrivals.json"), &arrivals)?;
    write_jsonl(&dir.join("ground-truth.jsonl"), &ground_truth(fixture))?;
    Ok(vec![
        "network.json".into(),
        "corpus.json".into(),
        "sensors.jsonl".into(),
        "historical.jsonl".into(),
        "arrivals.json".into(),
        "ground-truth.jsonl".into(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_models::{validate_batch, SchemaRegistry};

    #[test]
    fn toy_network_counts_and_validity() {
        let f = CityFixture::default();
        let ents = generate_static_network(&f);
        let count = |t: &str| ents.iter().filter(|e| e.entity_type == t).count();
        assert_eq!(
            [
                count("GtfsAgency"),
                count("GtfsStop"),
                count("GtfsRoute"),
                count("GtfsTrip"),
                count("GtfsStopTime")
            ],
            [1, 5, 2, 4, 16]
        );
        let reg = SchemaRegistry::bundled();
        let summary = validate_batch(ents.iter().cloned(), &reg.snapshot(), |_| {});
        assert_eq!(summary.invalid, 0);
        assert_eq!(generate_static_network(&f), ents);
    }

    #[test]
    fn peak_value_is_closed_form_without_noise() {
        let mut f = CityFixture::default();
        f.parking.noise_std = 0.0;
        let v = series_value(&f, "parking", "parking-001", 6 * 3600).unwrap();
        assert_eq!(v, f.parking.baseline + f.parking.daily_amplitude);
    }

    #[test]
    fn one_day_is_96_samples() {
        let f = CityFixture::default();
        let start = f.start_epoch();
        let em = sensor_emissions(&f, start, start + 86_400);
        let n = em.iter().filter(|e| e.entity.id == "parking-001").count();
        assert_eq!(n, 96);
    }

    #[test]
    fn clean_corpus_has_no_violations() {
        let f = CityFixture::default();
        let (c, truth) = generate_corpus(&f);
        assert_eq!(c.len(), 200);
        assert!(truth.is_empty());
        let s = validate_batch(c, &SchemaRegistry::bundled().snapshot(), |_| {});
        assert_eq!(s.violation_count(), 0);
    }

    #[test]
    fn delayed_trip_shifts_countdown() {
        let mut f = CityFixture::default();
        f.arrivals.delays.push(TripDelay {
            trip: "T1".into(),
            seconds: 300,
        });
        let feed = toy_feed(&f);
        let m = f.service_day_midnight();
        let em = arrival_emissions(&f, &feed, m);
        let s2 = m + i64::from(hms(8, 10));
        let e = em
            .iter()
            .find(|e| e.entity.id == "ae-R1-S2" && e.t == s2 - 120)
            .unwrap();
        assert_eq!(e.entity.attr("remainingTime").unwrap().as_f64(), Some(420.0));
    }

    #[test]
    fn random_networks_are_valid() {
        let f = CityFixture::default();
        for seed in 0..50 {
            let feed = random_network(seed, RandomNetworkSpec::default(), &f);
            feed.validate().unwrap();
            assert!(feed.stops.len() <= 10 && feed.routes.len() <= 5);
        }
    }
}
