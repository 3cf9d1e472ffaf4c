use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::RoutingError;
use crate::gtfs::{service_midnight, GtfsFeed, GtfsRtFeed, Service};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub fn haversine_meters(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GraphParams {
    pub walk_speed_mps: f64,
    /// Stops closer than this get a footpath.
    pub max_transfer_distance: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            walk_speed_mps: 1.3,
            max_transfer_distance: 400.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopNode {
    pub stop_id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub stop: usize,
    pub sequence: u32,
    pub arrival: u32,
    pub departure: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRun {
    pub trip_id: String,
    pub route_id: String,
    pub service: Service,
    pub calls: Vec<Call>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footpath {
    pub to: usize,
    pub meters: f64,
    pub seconds: i64,
}

/// Immutable routing graph: stops, trip patterns and footpaths.
#[derive(Debug, Clone)]
pub struct TransitGraph {
    pub params: GraphParams,
    pub stops: Vec<StopNode>,
    pub trips: Vec<TripRun>,
    pub footpaths: Vec<Vec<Footpath>>,
    stop_idx: HashMap<String, usize>,
    trip_idx: HashMap<String, usize>,
}

impl TransitGraph {
    pub fn empty(params: GraphParams) -> Self {
        Self {
            params,
            stops: Vec::new(),
            trips: Vec::new(),
            footpaths: Vec::new(),
            stop_idx: HashMap::new(),
            trip_idx: HashMap::new(),
        }
    }

    pub fn stop_index(&self, id: &str) -> Option<usize> {
        self.stop_idx.get(id).copied()
    }

    pub fn trip_index(&self, id: &str) -> Option<usize> {
        self.trip_idx.get(id).copied()
    }

    pub fn walk_seconds(&self, meters: f64) -> i64 {
        ((meters / self.params.walk_speed_mps) - 1e-6).ceil().max(0.0) as i64
    }

    pub fn footpath_count(&self) -> usize {
        self.footpaths.iter().map(Vec::len).sum()
    }
}

/// Builds the routing graph. The feed must be normalized and validated.
pub fn build_graph(feed: &GtfsFeed, params: GraphParams) -> Result<TransitGraph, RoutingError> {
    if !(params.walk_speed_mps > 0.0) || !(params.max_transfer_distance >= 0.0) {
        return Err(RoutingError::InvalidQuery(
            "walk speed must be positive and transfer distance non-negative".into(),
        ));
    }
    let mut g = TransitGraph::empty(params);
    for s in &feed.stops {
        g.stop_idx.insert(s.stop_id.clone(), g.stops.len());
        g.stops.push(StopNode {
            stop_id: s.stop_id.clone(),
            name: s.name.clone(),
            lat: s.lat,
            lon: s.lon,
        });
    }
    let services: BTreeMap<&str, &Service> = feed
        .services
        .iter()
        .map(|s| (s.service_id.as_str(), s))
        .collect();
    let by_trip = feed.stop_times_by_trip();
    for t in &feed.trips {
        let service = services
            .get(t.service_id.as_str())
            .ok_or_else(|| RoutingError::Feed(format!("trip {} has unknown service", t.trip_id)))?;
        let calls = by_trip
            .get(t.trip_id.as_str())
            .map(|v| {
                v.iter()
                    .map(|st| {
                        Ok(Call {
                            stop: g.stop_index(&st.stop_id).ok_or_else(|| {
                                RoutingError::Feed(format!("unknown stop {}", st.stop_id))
                            })?,
                            sequence: st.stop_sequence,
                            arrival: st.arrival,
                            departure: st.departure,
                        })
                    })
                    .collect::<Result<Vec<_>, RoutingError>>()
            })
            .transpose()?
            .unwrap_or_default();
        g.trip_idx.insert(t.trip_id.clone(), g.trips.len());
        g.trips.push(TripRun {
            trip_id: t.trip_id.clone(),
            route_id: t.route_id.clone(),
            service: (*service).clone(),
            calls,
        });
    }
    let n = g.stops.len();
    g.footpaths = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&g.stops[i], &g.stops[j]);
            let m = haversine_meters(a.lat, a.lon, b.lat, b.lon);
            if m <= params.max_transfer_distance {
                let seconds = g.walk_seconds(m);
                g.footpaths[i].push(Footpath { to: j, meters: m, seconds });
                g.footpaths[j].push(Footpath { to: i, meters: m, seconds });
            }
        }
    }
    Ok(g)
}

/// Realtime-adjusted times for trip instances, keyed by (trip, service-day
/// midnight).
#[derive(Debug, Clone, Default)]
pub struct Overlay {
    pub header_timestamp: i64,
    adjusted: HashMap<(usize, i64), (Vec<i64>, Vec<i64>)>,
}

fn date_of(t: i64) -> Option<NaiveDate> {
    DateTime::from_timestamp(t, 0).map(|d| d.date_naive())
}

/// Active service-day midnights around `t` (previous, same and next day).
fn midnights_around(service: &Service, t: i64) -> Vec<i64> {
    let Some(d) = date_of(t) else {
        return Vec::new();
    };
    [
        d.checked_sub_days(Days::new(1)),
        Some(d),
        d.checked_add_days(Days::new(1)),
    ]
    .into_iter()
    .flatten()
    .filter(|x| service.is_active(*x))
    .map(service_midnight)
    .collect()
}

impl Overlay {
    /// Maps trip updates onto scheduled trip instances and propagates each
    /// update's delay downstream until the next update, clamping so times
    /// never run backwards along the trip. Unknown trips and stops are
    /// ignored.
    pub fn build(graph: &TransitGraph, rt: &GtfsRtFeed) -> Self {
        let mut adjusted = HashMap::new();
        for tu in &rt.trip_updates {
            let Some(ti) = graph.trip_index(&tu.trip_id) else {
                continue;
            };
            let trip = &graph.trips[ti];
            // (midnight, call index, delta)
            let mut deltas: BTreeMap<i64, BTreeMap<usize, i64>> = BTreeMap::new();
            for u in &tu.stop_time_updates {
                let ci = match (u.stop_sequence, &u.stop_id) {
                    (Some(seq), _) => trip.calls.iter().position(|c| c.sequence == seq),
                    (None, Some(sid)) => graph
                        .stop_index(sid)
                        .and_then(|s| trip.calls.iter().position(|c| c.stop == s)),
                    (None, None) => None,
                };
                let Some(ci) = ci else { continue };
                let sched = i64::from(trip.calls[ci].arrival);
                let (anchor, fixed) = match (u.arrival_override, u.delay_seconds) {
                    (Some(a), _) => (a, None),
                    (None, Some(d)) => (rt.header_timestamp, Some(d)),
                    (None, None) => continue,
                };
                let Some(m) = midnights_around(&trip.service, anchor)
                    .into_iter()
                    .min_by_key(|m| ((m + sched) - anchor).abs())
                else {
                    continue;
                };
                let delta = fixed.unwrap_or(anchor - (m + sched));
                deltas.entry(m).or_default().insert(ci, delta);
            }
            for (m, ups) in deltas {
                let mut arr = Vec::with_capacity(trip.calls.len());
                let mut dep = Vec::with_capacity(trip.calls.len());
                let mut delta = 0i64;
                for (ci, c) in trip.calls.iter().enumerate() {
                    if let Some(d) = ups.get(&ci) {
                        delta = *d;
                    }
                    let prev_dep = dep.last().copied().unwrap_or(i64::MIN);
                    let a = (m + i64::from(c.arrival) + delta).max(prev_dep);
                    let d = (m + i64::from(c.departure) + delta).max(a);
                    arr.push(a);
                    dep.push(d);
                }
                adjusted.insert((ti, m), (arr, dep));
            }
        }
        Self {
            header_timestamp: rt.header_timestamp,
            adjusted,
        }
    }

    pub fn len(&self) -> usize {
        self.adjusted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjusted.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub trip: usize,
    pub midnight: i64,
    pub arr: Vec<i64>,
    pub dep: Vec<i64>,
}

/// Concrete trip instances (absolute times) relevant to one query.
#[derive(Debug, Clone, Default)]
pub struct Timetable {
    pub instances: Vec<Instance>,
}

impl Timetable {
    /// Instances on the service days around `depart_after` that are still
    /// running at or after it, realtime-adjusted when an overlay is given.
    pub fn build(graph: &TransitGraph, depart_after: i64, overlay: Option<&Overlay>) -> Self {
        let mut instances = Vec::new();
        for (ti, trip) in graph.trips.iter().enumerate() {
            if trip.calls.len() < 2 {
                continue;
            }
            for m in midnights_around(&trip.service, depart_after) {
                let (arr, dep) = match overlay.and_then(|o| o.adjusted.get(&(ti, m))) {
                    Some((a, d)) => (a.clone(), d.clone()),
                    None => (
                        trip.calls.iter().map(|c| m + i64::from(c.arrival)).collect(),
                        trip.calls.iter().map(|c| m + i64::from(c.departure)).collect(),
                    ),
                };
                if *dep.iter().max().expect("non-empty") < depart_after {
                    continue;
                }
                instances.push(Instance {
                    trip: ti,
                    midnight: m,
                    arr,
                    dep,
                });
            }
        }
        instances.sort_by(|a, b| {
            (a.dep[0], &graph.trips[a.trip].trip_id, a.midnight).cmp(&(
                b.dep[0],
                &graph.trips[b.trip].trip_id,
                b.midnight,
            ))
        });
        Self { instances }
    }
}
