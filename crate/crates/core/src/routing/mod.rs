//! Earliest-arrival transit routing over a GTFS feed, with walking
//! footpaths, transfer limits and GTFS-RT delay overlays.

pub mod exhaustive;
mod graph;
pub mod service;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{
    build_graph, haversine_meters, Call, Footpath, GraphParams, Instance, Overlay, StopNode,
    Timetable, TransitGraph, TripRun,
};
pub use service::{plan_request_from_params, PlanResponse, RealtimeSource, RemoteRouter, Router};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("no itinerary reaches the destination")]
    Unreachable,
    #[error("origin is isolated: no departures or walks from it")]
    OriginIsolated,
    #[error("unknown stop {0}")]
    UnknownStop(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("feed error: {0}")]
    Feed(String),
}

impl RoutingError {
    pub fn kind(&self) -> &'static str {
        match self {
            RoutingError::Unreachable => "unreachable",
            RoutingError::OriginIsolated => "origin-isolated",
            RoutingError::UnknownStop(_) => "unknown-stop",
            RoutingError::InvalidQuery(_) => "invalid-query",
            RoutingError::Feed(_) => "feed-error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Place {
    Stop { stop: String },
    Coord { lat: f64, lon: f64 },
}

impl Place {
    pub fn stop(id: impl Into<String>) -> Self {
        Place::Stop { stop: id.into() }
    }

    pub fn coord(lat: f64, lon: f64) -> Self {
        Place::Coord { lat, lon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlanRequest {
    pub origin: Place,
    pub destination: Place,
    /// Epoch seconds.
    pub depart_after: i64,
    pub max_transfers: u32,
    /// Limit for each walking leg.
    pub max_walk_meters: f64,
    /// Number of alternative itineraries wanted.
    pub count: usize,
}

impl PlanRequest {
    pub const DEFAULT_MAX_TRANSFERS: u32 = 3;
    pub const DEFAULT_MAX_WALK: f64 = 500.0;

    pub fn new(origin: Place, destination: Place, depart_after: i64) -> Self {
        Self {
            origin,
            destination,
            depart_after,
            max_transfers: Self::DEFAULT_MAX_TRANSFERS,
            max_walk_meters: Self::DEFAULT_MAX_WALK,
            count: 1,
        }
    }

    pub fn between_stops(from: &str, to: &str, depart_after: i64) -> Self {
        Self::new(Place::stop(from), Place::stop(to), depart_after)
    }

    pub fn max_transfers(mut self, k: u32) -> Self {
        self.max_transfers = k;
        self
    }

    pub fn max_walk(mut self, meters: f64) -> Self {
        self.max_walk_meters = meters;
        self
    }

    pub fn count(mut self, n: usize) -> Self {
        self.count = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "camelCase")]
pub enum Leg {
    #[serde(rename_all = "camelCase")]
    Walk {
        from: Place,
        to: Place,
        depart: i64,
        arrive: i64,
        meters: f64,
    },
    #[serde(rename_all = "camelCase")]
    Ride {
        trip_id: String,
        route_id: String,
        from_stop: String,
        to_stop: String,
        board_sequence: u32,
        alight_sequence: u32,
        depart: i64,
        arrive: i64,
    },
}

impl Leg {
    pub fn depart(&self) -> i64 {
        match self {
            Leg::Walk { depart, .. } | Leg::Ride { depart, .. } => *depart,
        }
    }

    pub fn arrive(&self) -> i64 {
        match self {
            Leg::Walk { arrive, .. } | Leg::Ride { arrive, .. } => *arrive,
        }
    }

    pub fn is_walk(&self) -> bool {
        matches!(self, Leg::Walk { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Itinerary {
    pub departure: i64,
    pub arrival: i64,
    pub transfers: u32,
    pub walk_meters: f64,
    pub legs: Vec<Leg>,
}

impl Itinerary {
    pub fn trip_ids(&self) -> Vec<&str> {
        self.legs
            .iter()
            .filter_map(|l| match l {
                Leg::Ride { trip_id, .. } => Some(trip_id.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn rides(&self) -> usize {
        self.trip_ids().len()
    }

    fn sort_key(&self) -> (i64, u32, u64, Vec<String>) {
        (
            self.arrival,
            self.transfers,
            (self.walk_meters * 1000.0).round() as u64,
            self.trip_ids().into_iter().map(String::from).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cat {
    Ride,
    Walk,
}

#[derive(Debug, Clone, Copy)]
enum RParent {
    Origin,
    Carry,
    Ride {
        inst: usize,
        board: usize,
        alight: usize,
        from: Cat,
    },
}

#[derive(Debug, Clone, Copy)]
enum WParent {
    Carry,
    Access { meters: f64 },
    Walk { from: usize, meters: f64 },
}

type Label<P> = Option<(i64, P)>;

struct Rounds {
    r: Vec<Vec<Label<RParent>>>,
    w: Vec<Vec<Label<WParent>>>,
}

fn better(a: Option<i64>, cand: i64) -> bool {
    a.is_none_or(|x| cand < x)
}

/// Egress candidate for the destination at round k: (arrival, category, stop,
/// extra walk meters).
type Finish = (i64, Cat, Option<usize>, f64);

struct Planner<'a> {
    graph: &'a TransitGraph,
    tt: &'a Timetable,
    req: &'a PlanRequest,
    origin_stop: Option<usize>,
    dest_stop: Option<usize>,
}

impl<'a> Planner<'a> {
    fn new(graph: &'a TransitGraph, tt: &'a Timetable, req: &'a PlanRequest) -> Result<Self, RoutingError> {
        let resolve = |p: &Place| -> Result<Option<usize>, RoutingError> {
            match p {
                Place::Stop { stop } => graph
                    .stop_index(stop)
                    .map(Some)
                    .ok_or_else(|| RoutingError::UnknownStop(stop.clone())),
                Place::Coord { lat, lon } => {
                    if !(-90.0..=90.0).contains(lat) || !(-180.0..=180.0).contains(lon) {
                        return Err(RoutingError::InvalidQuery("coordinates out of range".into()));
                    }
                    Ok(None)
                }
            }
        };
        if !(req.max_walk_meters >= 0.0) {
            return Err(RoutingError::InvalidQuery("maxWalk must be non-negative".into()));
        }
        Ok(Self {
            graph,
            tt,
            req,
            origin_stop: resolve(&req.origin)?,
            dest_stop: resolve(&req.destination)?,
        })
    }

    fn coord_of(&self, p: &Place) -> (f64, f64) {
        match p {
            Place::Coord { lat, lon } => (*lat, *lon),
            Place::Stop { stop } => {
                let s = &self.graph.stops[self.graph.stop_index(stop).expect("resolved")];
                (s.lat, s.lon)
            }
        }
    }

    fn walk_to(&self, from: (f64, f64), to: (f64, f64)) -> Option<(i64, f64)> {
        let m = haversine_meters(from.0, from.1, to.0, to.1);
        (m <= self.req.max_walk_meters).then(|| (self.graph.walk_seconds(m), m))
    }

    fn run(&self, banned: &HashSet<&str>) -> Option<Itinerary> {
        let n = self.graph.stops.len();
        let k_max = self.req.max_transfers as usize + 1;
        let t0 = self.req.depart_after;
        let mut rounds = Rounds {
            r: vec![vec![None; n]; k_max + 1],
            w: vec![vec![None; n]; k_max + 1],
        };
        if let Some(o) = self.origin_stop {
            rounds.r[0][o] = Some((t0, RParent::Origin));
        } else {
            let oc = self.coord_of(&self.req.origin);
            for (i, s) in self.graph.stops.iter().enumerate() {
                if let Some((secs, m)) = self.walk_to(oc, (s.lat, s.lon)) {
                    rounds.w[0][i] = Some((t0 + secs, WParent::Access { meters: m }));
                }
            }
        }
        self.walk_step(&mut rounds, 0);

        for k in 1..=k_max {
            rounds.r[k] = rounds.r[k - 1]
                .iter()
                .map(|l| l.map(|(t, _)| (t, RParent::Carry)))
                .collect();
            rounds.w[k] = rounds.w[k - 1]
                .iter()
                .map(|l| l.map(|(t, _)| (t, WParent::Carry)))
                .collect();
            for (ii, inst) in self.tt.instances.iter().enumerate() {
                if banned.contains(self.graph.trips[inst.trip].trip_id.as_str()) {
                    continue;
                }
                let calls = &self.graph.trips[inst.trip].calls;
                let mut boarded: Option<(usize, Cat)> = None;
                for (ci, call) in calls.iter().enumerate() {
                    let s = call.stop;
                    if let Some((b, from)) = boarded {
                        let arr = inst.arr[ci];
                        if better(rounds.r[k][s].map(|x| x.0), arr) {
                            rounds.r[k][s] = Some((
                                arr,
                                RParent::Ride {
                                    inst: ii,
                                    board: b,
                                    alight: ci,
                                    from,
                                },
                            ));
                        }
                    } else {
                        let prev_r = rounds.r[k - 1][s].map(|x| x.0);
                        let prev_w = rounds.w[k - 1][s].map(|x| x.0);
                        let best = match (prev_r, prev_w) {
                            (Some(a), Some(b)) if b < a => Some((b, Cat::Walk)),
                            (Some(a), _) => Some((a, Cat::Ride)),
                            (None, Some(b)) => Some((b, Cat::Walk)),
                            (None, None) => None,
                        };
                        if let Some((t, cat)) = best {
                            if t <= inst.dep[ci] && ci + 1 < calls.len() {
                                boarded = Some((ci, cat));
                            }
                        }
                    }
                }
            }
            self.walk_step(&mut rounds, k);
        }

        let mut best: Option<(i64, usize, Finish)> = None;
        for k in 0..=k_max {
            for f in self.finishes(&rounds, k) {
                if best.as_ref().is_none_or(|b| f.0 < b.0) {
                    best = Some((f.0, k, f));
                }
            }
        }
        best.map(|(_, k, f)| self.reconstruct(&rounds, k, f))
    }

    fn walk_step(&self, rounds: &mut Rounds, k: usize) {
        for s in 0..self.graph.stops.len() {
            let Some((t, _)) = rounds.r[k][s] else {
                continue;
            };
            for fp in &self.graph.footpaths[s] {
                if fp.meters > self.req.max_walk_meters {
                    continue;
                }
                let cand = t + fp.seconds;
                if better(rounds.w[k][fp.to].map(|x| x.0), cand) {
                    rounds.w[k][fp.to] = Some((
                        cand,
                        WParent::Walk {
                            from: s,
                            meters: fp.meters,
                        },
                    ));
                }
            }
        }
    }

    fn finishes(&self, rounds: &Rounds, k: usize) -> Vec<Finish> {
        let mut out = Vec::new();
        match self.dest_stop {
            Some(d) => {
                if let Some((t, _)) = rounds.r[k][d] {
                    out.push((t, Cat::Ride, Some(d), 0.0));
                }
                if let Some((t, _)) = rounds.w[k][d] {
                    out.push((t, Cat::Walk, Some(d), 0.0));
                }
            }
            None => {
                let dc = self.coord_of(&self.req.destination);
                for (i, s) in self.graph.stops.iter().enumerate() {
                    if let Some((t, _)) = rounds.r[k][i] {
                        if let Some((secs, m)) = self.walk_to((s.lat, s.lon), dc) {
                            out.push((t + secs, Cat::Ride, Some(i), m));
                        }
                    }
                }
                if k == 0 && self.origin_stop.is_none() {
                    let oc = self.coord_of(&self.req.origin);
                    if let Some((secs, m)) = self.walk_to(oc, dc) {
                        out.push((self.req.depart_after + secs, Cat::Walk, None, m));
                    }
                }
            }
        }
        // Stable preference: rides before walks on equal arrival.
        out.sort_by(|a, b| a.0.cmp(&b.0).then((a.1 == Cat::Walk).cmp(&(b.1 == Cat::Walk))));
        out
    }

    fn stop_place(&self, s: usize) -> Place {
        Place::stop(self.graph.stops[s].stop_id.clone())
    }

    fn reconstruct(&self, rounds: &Rounds, k: usize, finish: Finish) -> Itinerary {
        let (arrival, cat, stop, egress_m) = finish;
        let mut legs = Vec::new();
        let Some(mut s) = stop else {
            // Direct walk between coordinates.
            let t0 = self.req.depart_after;
            return Itinerary {
                departure: t0,
                arrival,
                transfers: 0,
                walk_meters: egress_m,
                legs: vec![Leg::Walk {
                    from: self.req.origin.clone(),
                    to: self.req.destination.clone(),
                    depart: t0,
                    arrive: arrival,
                    meters: egress_m,
                }],
            };
        };
        if self.dest_stop.is_none() {
            let t = rounds.r[k][s].expect("label").0;
            legs.push(Leg::Walk {
                from: self.stop_place(s),
                to: self.req.destination.clone(),
                depart: t,
                arrive: arrival,
                meters: egress_m,
            });
        }
        let (mut k, mut cat) = (k, cat);
        loop {
            match cat {
                Cat::Ride => match rounds.r[k][s].expect("label").1 {
                    RParent::Origin => break,
                    RParent::Carry => k -= 1,
                    RParent::Ride {
                        inst,
                        board,
                        alight,
                        from,
                    } => {
                        let ins = &self.tt.instances[inst];
                        let trip = &self.graph.trips[ins.trip];
                        let bs = trip.calls[board].stop;
                        legs.push(Leg::Ride {
                            trip_id: trip.trip_id.clone(),
                            route_id: trip.route_id.clone(),
                            from_stop: self.graph.stops[bs].stop_id.clone(),
                            to_stop: self.graph.stops[s].stop_id.clone(),
                            board_sequence: trip.calls[board].sequence,
                            alight_sequence: trip.calls[alight].sequence,
                            depart: ins.dep[board],
                            arrive: ins.arr[alight],
                        });
                        s = bs;
                        k -= 1;
                        cat = from;
                    }
                },
                Cat::Walk => {
                    let (t, p) = rounds.w[k][s].expect("label");
                    match p {
                        WParent::Carry => k -= 1,
                        WParent::Access { meters } => {
                            legs.push(Leg::Walk {
                                from: self.req.origin.clone(),
                                to: self.stop_place(s),
                                depart: self.req.depart_after,
                                arrive: t,
                                meters,
                            });
                            break;
                        }
                        WParent::Walk { from, meters } => {
                            let dep = rounds.r[k][from].expect("label").0;
                            legs.push(Leg::Walk {
                                from: self.stop_place(from),
                                to: self.stop_place(s),
                                depart: dep,
                                arrive: t,
                                meters,
                            });
                            s = from;
                            cat = Cat::Ride;
                        }
                    }
                }
            }
        }
        legs.reverse();
        let rides = legs.iter().filter(|l| !l.is_walk()).count() as u32;
        let walk_meters = legs
            .iter()
            .map(|l| match l {
                Leg::Walk { meters, .. } => *meters,
                _ => 0.0,
            })
            .sum();
        Itinerary {
            departure: legs.first().map_or(self.req.depart_after, Leg::depart),
            arrival,
            transfers: rides.saturating_sub(1),
            walk_meters,
            legs,
        }
    }

    fn isolation_error(&self) -> RoutingError {
        let t0 = self.req.depart_after;
        let has_exit = match self.origin_stop {
            Some(o) => {
                self.graph.footpaths[o]
                    .iter()
                    .any(|fp| fp.meters <= self.req.max_walk_meters)
                    || self.tt.instances.iter().any(|inst| {
                        let calls = &self.graph.trips[inst.trip].calls;
                        calls
                            .iter()
                            .enumerate()
                            .any(|(ci, c)| c.stop == o && ci + 1 < calls.len() && inst.dep[ci] >= t0)
                    })
            }
            None => {
                let oc = self.coord_of(&self.req.origin);
                self.graph
                    .stops
                    .iter()
                    .any(|s| self.walk_to(oc, (s.lat, s.lon)).is_some())
                    || (self.dest_stop.is_none()
                        && self.walk_to(oc, self.coord_of(&self.req.destination)).is_some())
            }
        };
        if has_exit {
            RoutingError::Unreachable
        } else {
            RoutingError::OriginIsolated
        }
    }
}

/// Plans up to `req.count` itineraries. The first is the earliest arrival
/// (fewest rides on ties); alternatives come from banning the trips of the
/// previous results. Results are ordered by (arrival, transfers, walk
/// distance, trip ids).
pub fn plan(
    graph: &TransitGraph,
    timetable: &Timetable,
    req: &PlanRequest,
) -> Result<Vec<Itinerary>, RoutingError> {
    let planner = Planner::new(graph, timetable, req)?;
    if planner.origin_stop.is_some() && planner.origin_stop == planner.dest_stop {
        return Ok(vec![Itinerary {
            departure: req.depart_after,
            arrival: req.depart_after,
            transfers: 0,
            walk_meters: 0.0,
            legs: Vec::new(),
        }]);
    }
    let mut banned: HashSet<&str> = HashSet::new();
    let mut out: Vec<Itinerary> = Vec::new();
    for _ in 0..req.count.max(1) {
        let Some(it) = planner.run(&banned) else {
            break;
        };
        let trips: Vec<usize> = it
            .trip_ids()
            .iter()
            .filter_map(|id| graph.trip_index(id))
            .collect();
        let no_rides = trips.is_empty();
        if !out.contains(&it) {
            out.push(it);
        }
        if no_rides {
            break;
        }
        for t in trips {
            banned.insert(graph.trips[t].trip_id.as_str());
        }
    }
    if out.is_empty() {
        return Err(planner.isolation_error());
    }
    out.sort_by_key(Itinerary::sort_key);
    Ok(out)
}
