//! ArrivalEstimation entities to GTFS-RT style trip updates.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use chrono::{DateTime, Days};
use serde::{Deserialize, Serialize};

use super::{service_midnight, GtfsFeed};
use crate::broker::{
    ContextBroker, Notification, NotificationSink, NotificationTarget, Query, SinkError,
    Subscription,
};
use crate::clock::SharedClock;
use crate::ngsi::NgsiEntity;

pub const ARRIVAL_ESTIMATION: &str = "ArrivalEstimation";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StopTimeUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequence: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_id: Option<String>,
    /// Absolute arrival time, epoch seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_override: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_seconds: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TripUpdate {
    pub trip_id: String,
    pub stop_time_updates: Vec<StopTimeUpdate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GtfsRtFeed {
    pub header_timestamp: i64,
    pub trip_updates: Vec<TripUpdate>,
}

impl GtfsRtFeed {
    pub fn empty(header_timestamp: i64) -> Self {
        Self {
            header_timestamp,
            trip_updates: Vec::new(),
        }
    }

    /// Canonical JSON: sorted keys, no whitespace, trip updates by trip id,
    /// stop updates by sequence.
    pub fn to_canonical_json(&self) -> String {
        let mut sorted = self.clone();
        sorted.trip_updates.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        for tu in &mut sorted.trip_updates {
            tu.stop_time_updates.sort_by_key(|u| (u.stop_sequence, u.stop_id.clone()));
        }
        let v = serde_json::to_value(&sorted).expect("serializable");
        serde_json::to_string(&v).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct UnresolvedEstimation {
    pub entity_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
struct TripCalls {
    trip_id: String,
    route_id: String,
    /// (stop_sequence, stop_id, arrival seconds since midnight)
    calls: Vec<(u32, String, u32)>,
    service: Option<super::Service>,
}

/// Maps (line, stop, time) to the trip that will serve the stop next.
#[derive(Debug, Clone, Default)]
pub struct TripResolver {
    trips: BTreeMap<String, TripCalls>,
}

impl TripResolver {
    pub fn new(feed: &GtfsFeed) -> Self {
        let services: BTreeMap<_, _> = feed
            .services
            .iter()
            .map(|s| (s.service_id.as_str(), s))
            .collect();
        let by_trip = feed.stop_times_by_trip();
        let trips = feed
            .trips
            .iter()
            .map(|t| {
                let calls = by_trip
                    .get(t.trip_id.as_str())
                    .map(|v| {
                        v.iter()
                            .map(|st| (st.stop_sequence, st.stop_id.clone(), st.arrival))
                            .collect()
                    })
                    .unwrap_or_default();
                (
                    t.trip_id.clone(),
                    TripCalls {
                        trip_id: t.trip_id.clone(),
                        route_id: t.route_id.clone(),
                        calls,
                        service: services.get(t.service_id.as_str()).map(|s| (*s).clone()),
                    },
                )
            })
            .collect();
        Self { trips }
    }

    /// Service-day midnights (previous and current day) on which the trip runs.
    fn midnights(trip: &TripCalls, now: i64) -> Vec<i64> {
        let Some(service) = &trip.service else {
            return Vec::new();
        };
        let Some(today) = DateTime::from_timestamp(now, 0).map(|d| d.date_naive()) else {
            return Vec::new();
        };
        [today.checked_sub_days(Days::new(1)), Some(today)]
            .into_iter()
            .flatten()
            .filter(|d| service.is_active(*d))
            .map(service_midnight)
            .collect()
    }

    /// Scheduled arrival (epoch seconds) of `trip_id` at `stop_sequence`,
    /// using the service day closest to `now` that is not in the past for the
    /// call, falling back to the latest past one.
    pub fn scheduled_arrival(&self, trip_id: &str, stop_sequence: u32, now: i64) -> Option<i64> {
        let trip = self.trips.get(trip_id)?;
        let (_, _, arr) = trip.calls.iter().find(|c| c.0 == stop_sequence)?;
        let times: Vec<i64> = Self::midnights(trip, now)
            .into_iter()
            .map(|m| m + i64::from(*arr))
            .collect();
        times
            .iter()
            .copied()
            .filter(|&t| t >= now)
            .min()
            .or_else(|| times.iter().copied().max())
    }

    /// The trip of `route_id` whose next scheduled arrival at `stop_id` is at
    /// or after `now`; ties break by trip id. Returns (trip id, stop sequence).
    pub fn next_trip(&self, route_id: &str, stop_id: &str, now: i64) -> Option<(String, u32)> {
        let mut best: Option<(i64, &str, u32)> = None;
        for trip in self.trips.values().filter(|t| t.route_id == route_id) {
            for m in Self::midnights(trip, now) {
                for (seq, sid, arr) in &trip.calls {
                    if sid != stop_id {
                        continue;
                    }
                    let t = m + i64::from(*arr);
                    if t < now {
                        continue;
                    }
                    let cand = (t, trip.trip_id.as_str(), *seq);
                    if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                        best = Some(cand);
                    }
                }
            }
        }
        best.map(|(_, id, seq)| (id.to_string(), seq))
    }

    /// Stop sequence of the first call of `trip_id` at `stop_id`.
    pub fn sequence_of(&self, trip_id: &str, stop_id: &str) -> Option<u32> {
        self.trips
            .get(trip_id)?
            .calls
            .iter()
            .find(|c| c.1 == stop_id)
            .map(|c| c.0)
    }

    pub fn knows_trip(&self, trip_id: &str) -> bool {
        self.trips.contains_key(trip_id)
    }
}

fn text_attr<'a>(e: &'a NgsiEntity, name: &str) -> Option<&'a str> {
    e.attr(name).and_then(|a| a.as_str())
}

/// Converts estimations into trip updates with absolute arrival overrides
/// (`now + remainingTime`). Entities without a resolvable trip are reported
/// instead of emitted.
pub fn arrival_estimations_to_gtfsrt(
    entities: &[NgsiEntity],
    now: i64,
    resolver: &TripResolver,
) -> (GtfsRtFeed, Vec<UnresolvedEstimation>) {
    let mut unresolved = Vec::new();
    let mut per_trip: BTreeMap<String, BTreeMap<u32, StopTimeUpdate>> = BTreeMap::new();
    let mut sorted: Vec<&NgsiEntity> = entities
        .iter()
        .filter(|e| e.entity_type == ARRIVAL_ESTIMATION)
        .collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for e in sorted {
        let mut fail = |reason: &str| {
            unresolved.push(UnresolvedEstimation {
                entity_id: e.id.clone(),
                reason: reason.to_string(),
            })
        };
        let Some(stop) = text_attr(e, "refStop") else {
            fail("missing refStop");
            continue;
        };
        let Some(remaining) = e.attr("remainingTime").and_then(|a| a.as_f64()) else {
            fail("missing remainingTime");
            continue;
        };
        if !remaining.is_finite() || remaining < 0.0 {
            fail("remainingTime must be a non-negative number");
            continue;
        }
        let resolved = match text_attr(e, "refTrip") {
            Some(trip) if resolver.knows_trip(trip) => resolver
                .sequence_of(trip, stop)
                .map(|seq| (trip.to_string(), seq)),
            Some(_) => None,
            None => text_attr(e, "refLine").and_then(|line| resolver.next_trip(line, stop, now)),
        };
        let Some((trip, seq)) = resolved else {
            fail("no scheduled trip serves this line and stop after now");
            continue;
        };
        per_trip.entry(trip).or_default().insert(
            seq,
            StopTimeUpdate {
                stop_sequence: Some(seq),
                stop_id: Some(stop.to_string()),
                arrival_override: Some(now + remaining.round() as i64),
                delay_seconds: None,
            },
        );
    }
    let trip_updates = per_trip
        .into_iter()
        .map(|(trip_id, ups)| TripUpdate {
            trip_id,
            stop_time_updates: ups.into_values().collect(),
        })
        .collect();
    (
        GtfsRtFeed {
            header_timestamp: now,
            trip_updates,
        },
        unresolved,
    )
}

#[derive(Default)]
struct LoaderState {
    feed: Option<Arc<GtfsRtFeed>>,
    unresolved: Vec<UnresolvedEstimation>,
    last_header: i64,
}

/// Keeps the latest ArrivalEstimation snapshot and republishes the derived
/// GTFS-RT feed on every change.
pub struct GtfsRtLoader {
    clock: SharedClock,
    resolver: RwLock<Arc<TripResolver>>,
    estimations: Mutex<BTreeMap<String, NgsiEntity>>,
    state: RwLock<LoaderState>,
}

impl GtfsRtLoader {
    pub fn new(feed: &GtfsFeed, clock: SharedClock) -> Arc<Self> {
        Arc::new(Self {
            clock,
            resolver: RwLock::new(Arc::new(TripResolver::new(feed))),
            estimations: Mutex::new(BTreeMap::new()),
            state: RwLock::new(LoaderState::default()),
        })
    }

    /// Subscribes to estimations and loads the current broker snapshot.
    /// `target` overrides the in-process sink (e.g. an HTTP callback that
    /// forwards to this loader). Returns the subscription id.
    pub fn attach(
        self: &Arc<Self>,
        broker: &dyn ContextBroker,
        target: Option<NotificationTarget>,
    ) -> Result<String, crate::broker::BrokerError> {
        let target = target.unwrap_or_else(|| {
            NotificationTarget::Sink(Arc::clone(self) as Arc<dyn NotificationSink>)
        });
        let id = broker.subscribe(Subscription::new(ARRIVAL_ESTIMATION, target))?;
        let current = broker.query_entities(&Query::of_type(ARRIVAL_ESTIMATION))?;
        if !current.is_empty() {
            self.ingest(current);
        }
        Ok(id)
    }

    pub fn set_feed(&self, feed: &GtfsFeed) {
        *self.resolver.write().unwrap() = Arc::new(TripResolver::new(feed));
        self.rebuild();
    }

    pub fn ingest(&self, entities: impl IntoIterator<Item = NgsiEntity>) {
        {
            let mut est = self.estimations.lock().unwrap();
            for e in entities {
                if e.entity_type == ARRIVAL_ESTIMATION {
                    est.insert(e.id.clone(), e);
                }
            }
        }
        self.rebuild();
    }

    /// Recomputes the feed from the stored estimations at the current time.
    pub fn rebuild(&self) {
        let snapshot: Vec<NgsiEntity> = self.estimations.lock().unwrap().values().cloned().collect();
        if snapshot.is_empty() {
            return;
        }
        let resolver = Arc::clone(&self.resolver.read().unwrap());
        let mut state = self.state.write().unwrap();
        let now = self.clock.now().max(state.last_header);
        let (feed, unresolved) = arrival_estimations_to_gtfsrt(&snapshot, now, &resolver);
        state.last_header = feed.header_timestamp;
        state.feed = Some(Arc::new(feed));
        state.unresolved = unresolved;
    }

    /// `None` until the first estimation has been received.
    pub fn current(&self) -> Option<Arc<GtfsRtFeed>> {
        self.state.read().unwrap().feed.clone()
    }

    pub fn unresolved(&self) -> Vec<UnresolvedEstimation> {
        self.state.read().unwrap().unresolved.clone()
    }

    /// `GET /gtfs-rt`: 503 before the first estimation, otherwise canonical
    /// JSON.
    pub fn router(self: &Arc<Self>) -> Router {
        async fn serve(State(loader): State<Arc<GtfsRtLoader>>) -> Response {
            match loader.current() {
                None => (StatusCode::SERVICE_UNAVAILABLE, "no estimations received yet")
                    .into_response(),
                Some(feed) => (
                    [(header::CONTENT_TYPE, "application/json")],
                    feed.to_canonical_json(),
                )
                    .into_response(),
            }
        }
        Router::new()
            .route("/gtfs-rt", get(serve))
            .with_state(Arc::clone(self))
    }
}

impl NotificationSink for GtfsRtLoader {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        self.ingest(notification.data.iter().cloned());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_feed;
    use super::*;
    use crate::clock::SimClock;
    use crate::ngsi::Attribute;

    fn ae(id: &str, line: &str, stop: &str, remaining: f64) -> NgsiEntity {
        NgsiEntity::new(id, ARRIVAL_ESTIMATION)
            .with("refLine", Attribute::reference(line))
            .with("refStop", Attribute::reference(stop))
            .with("remainingTime", Attribute::number(remaining))
    }

    // Monday 2026-06-01
    const MIDNIGHT: i64 = 1_780_272_000;

    #[test]
    fn resolves_next_trip_and_override() {
        let r = TripResolver::new(&tiny_feed());
        let now = MIDNIGHT + 7 * 3600;
        let (feed, bad) = arrival_estimations_to_gtfsrt(&[ae("a", "R1", "S1", 120.0)], now, &r);
        assert!(bad.is_empty());
        assert_eq!(feed.trip_updates.len(), 1);
        let u = &feed.trip_updates[0];
        assert_eq!(u.trip_id, "T1");
        assert_eq!(u.stop_time_updates[0].stop_sequence, Some(1));
        assert_eq!(u.stop_time_updates[0].arrival_override, Some(now + 120));
    }

    #[test]
    fn unresolvable_reported() {
        let r = TripResolver::new(&tiny_feed());
        let now = MIDNIGHT + 9 * 3600;
        let ents = [ae("x", "R9", "S1", 60.0), ae("y", "R1", "S1", 60.0)];
        let (feed, bad) = arrival_estimations_to_gtfsrt(&ents, now, &r);
        // T1 left S1 at 08:00 and Sunday has no service.
        assert_eq!(bad.len(), 2);
        assert!(feed.trip_updates.is_empty());
    }

    #[test]
    fn canonical_json_shape() {
        let feed = GtfsRtFeed {
            header_timestamp: 5,
            trip_updates: vec![TripUpdate {
                trip_id: "T1".into(),
                stop_time_updates: vec![StopTimeUpdate {
                    stop_sequence: Some(2),
                    stop_id: Some("S2".into()),
                    arrival_override: Some(9),
                    delay_seconds: None,
                }],
            }],
        };
        assert_eq!(
            feed.to_canonical_json(),
            r#"{"headerTimestamp":5,"tripUpdates":[{"stopTimeUpdates":[{"arrivalOverride":9,"stopId":"S2","stopSequence":2}],"tripId":"T1"}]}"#
        );
        let back: GtfsRtFeed = serde_json::from_str(&feed.to_canonical_json()).unwrap();
        assert_eq!(back, feed);
    }

    #[test]
    fn loader_tracks_broker_and_header_is_monotone() {
        let clock = SimClock::new(MIDNIGHT + 7 * 3600);
        let broker = crate::Broker::with_clock(Arc::new(clock.clone()));
        let loader = GtfsRtLoader::new(&tiny_feed(), Arc::new(clock.clone()));
        loader.attach(&broker, None).unwrap();
        assert!(loader.current().is_none());
        broker.upsert_entity(ae("a", "R1", "S1", 100.0)).unwrap();
        broker.deliver_notifications();
        let first = loader.current().unwrap();
        assert_eq!(first.trip_updates.len(), 1);
        clock.set(MIDNIGHT + 6 * 3600);
        loader.rebuild();
        assert!(loader.current().unwrap().header_timestamp >= first.header_timestamp);
    }
}
