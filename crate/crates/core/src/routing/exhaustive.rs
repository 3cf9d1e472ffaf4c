//! Depth-first enumeration of every journey allowed by the leg grammar.
//! Slow, but a useful cross-check for the planner on small networks.

use std::collections::HashMap;

use super::graph::{haversine_meters, Timetable, TransitGraph};
use super::{Place, PlanRequest};

struct Search<'a> {
    graph: &'a TransitGraph,
    tt: &'a Timetable,
    req: &'a PlanRequest,
    k_max: u32,
    dest_stop: Option<usize>,
    dest_coord: Option<(f64, f64)>,
    best: Option<i64>,
    seen: HashMap<(usize, u32, bool), i64>,
}

impl Search<'_> {
    fn walk(&self, from: (f64, f64), to: (f64, f64)) -> Option<i64> {
        let m = haversine_meters(from.0, from.1, to.0, to.1);
        (m <= self.req.max_walk_meters).then(|| self.graph.walk_seconds(m))
    }

    fn offer(&mut self, t: i64) {
        if self.best.is_none_or(|b| t < b) {
            self.best = Some(t);
        }
    }

    fn visit(&mut self, s: usize, t: i64, rides: u32, just_walked: bool) {
        if self.best.is_some_and(|b| t >= b) {
            return;
        }
        match self.seen.get(&(s, rides, just_walked)) {
            Some(&prev) if prev <= t => return,
            _ => {
                self.seen.insert((s, rides, just_walked), t);
            }
        }
        if self.dest_stop == Some(s) {
            self.offer(t);
            return;
        }
        let here = (self.graph.stops[s].lat, self.graph.stops[s].lon);
        if let (Some(dc), false) = (self.dest_coord, just_walked) {
            if let Some(secs) = self.walk(here, dc) {
                self.offer(t + secs);
            }
        }
        if !just_walked {
            for fp in self.graph.footpaths[s].clone() {
                if fp.meters <= self.req.max_walk_meters {
                    self.visit(fp.to, t + fp.seconds, rides, true);
                }
            }
        }
        if rides < self.k_max {
            for inst in &self.tt.instances {
                let calls = &self.graph.trips[inst.trip].calls;
                for ci in 0..calls.len().saturating_sub(1) {
                    if calls[ci].stop != s || inst.dep[ci] < t {
                        continue;
                    }
                    for cj in (ci + 1)..calls.len() {
                        self.visit(calls[cj].stop, inst.arr[cj], rides + 1, false);
                    }
                }
            }
        }
    }
}

/// Earliest arrival over all journeys of the form `[walk] (ride [walk])*`
/// with at most `max_transfers + 1` rides and every walk within
/// `max_walk_meters`. `None` when the destination is unreachable.
pub fn earliest_arrival(graph: &TransitGraph, tt: &Timetable, req: &PlanRequest) -> Option<i64> {
    let coord = |p: &Place| match p {
        Place::Coord { lat, lon } => Some((*lat, *lon)),
        Place::Stop { .. } => None,
    };
    let stop = |p: &Place| match p {
        Place::Stop { stop } => graph.stop_index(stop),
        Place::Coord { .. } => None,
    };
    let mut search = Search {
        graph,
        tt,
        req,
        k_max: req.max_transfers + 1,
        dest_stop: stop(&req.destination),
        dest_coord: coord(&req.destination),
        best: None,
        seen: HashMap::new(),
    };
    let t0 = req.depart_after;
    match (stop(&req.origin), coord(&req.origin)) {
        (Some(o), _) => search.visit(o, t0, 0, false),
        (None, Some(oc)) => {
            if let Some(dc) = search.dest_coord {
                if let Some(secs) = search.walk(oc, dc) {
                    search.offer(t0 + secs);
                }
            }
            for (i, s) in graph.stops.iter().enumerate() {
                if let Some(secs) = search.walk(oc, (s.lat, s.lon)) {
                    search.visit(i, t0 + secs, 0, true);
                }
            }
        }
        (None, None) => return None,
    }
    search.best
}
