//! GTFS bridge: NGSI urban-mobility entities to GTFS feeds, feed publication
//! and change-tracking reload, and the ArrivalEstimation to GTFS-RT loader.

mod archive;
pub mod fetcher;
pub mod realtime;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ngsi::{Attribute, NgsiEntity};

pub use archive::{read_feed_zip, write_feed_zip, FEED_FILES};
pub use fetcher::{
    load_feed_bytes, publish_feed_entity, FeedReloader, GtfsFetcher, ReloadEvent, ReloadOutcome,
};
pub use realtime::{
    arrival_estimations_to_gtfsrt, GtfsRtFeed, GtfsRtLoader, StopTimeUpdate, TripResolver,
    TripUpdate, UnresolvedEstimation,
};

#[derive(Debug, Error)]
pub enum GtfsError {
    #[error("empty feed: a GTFS feed needs at least one agency")]
    EmptyFeed,
    #[error("dangling references: {}", .0.join(", "))]
    DanglingReference(Vec<String>),
    #[error("stop times of trip {trip} are not ordered: {reason}")]
    UnsortedStopTimes { trip: String, reason: String },
    #[error("invalid coordinates for stop {0}")]
    InvalidCoordinates(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("entity {id}: {reason}")]
    InvalidEntity { id: String, reason: String },
    #[error("{file}: {message}")]
    Parse { file: String, message: String },
    #[error("zip error: {0}")]
    Zip(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("file missing: {0}")]
    FileMissing(String),
    #[error("fetch error: {0}")]
    Fetch(String),
    #[error("broker error: {0}")]
    Broker(#[from] crate::broker::BrokerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agency {
    pub agency_id: String,
    pub name: String,
    pub url: String,
    pub timezone: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub route_id: String,
    pub agency_id: String,
    pub short_name: String,
    pub route_type: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub trip_id: String,
    pub route_id: String,
    pub service_id: String,
}

/// `arrival`/`departure` are seconds since service-day midnight and may
/// exceed 24 h for after-midnight trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopTime {
    pub trip_id: String,
    pub stop_sequence: u32,
    pub stop_id: String,
    pub arrival: u32,
    pub departure: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Service {
    pub service_id: String,
    /// Monday first.
    pub weekdays: [bool; 7],
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

impl Service {
    pub fn is_active(&self, date: NaiveDate) -> bool {
        date >= self.start_date
            && date <= self.end_date
            && self.weekdays[date.weekday().num_days_from_monday() as usize]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GtfsFeed {
    pub agencies: Vec<Agency>,
    pub stops: Vec<Stop>,
    pub routes: Vec<Route>,
    pub trips: Vec<Trip>,
    pub stop_times: Vec<StopTime>,
    pub services: Vec<Service>,
}

impl GtfsFeed {
    /// Sorts every table by its primary key.
    pub fn normalize(&mut self) {
        self.agencies.sort_by(|a, b| a.agency_id.cmp(&b.agency_id));
        self.stops.sort_by(|a, b| a.stop_id.cmp(&b.stop_id));
        self.routes.sort_by(|a, b| a.route_id.cmp(&b.route_id));
        self.trips.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        self.stop_times.sort_by(|a, b| {
            a.trip_id
                .cmp(&b.trip_id)
                .then(a.stop_sequence.cmp(&b.stop_sequence))
        });
        self.services.sort_by(|a, b| a.service_id.cmp(&b.service_id));
    }

    /// Checks referential integrity, coordinates and stop-time ordering.
    /// Expects a normalized feed.
    pub fn validate(&self) -> Result<(), GtfsError> {
        if self.agencies.is_empty() {
            return Err(GtfsError::EmptyFeed);
        }
        fn ids<'a, T>(
            kind: &'static str,
            items: &'a [T],
            key: impl Fn(&T) -> &str,
        ) -> Result<BTreeSet<&'a str>, GtfsError>
        where
            T: 'a,
        {
            let mut set = BTreeSet::new();
            for it in items {
                let k = key(it);
                if !set.insert(k) {
                    return Err(GtfsError::DuplicateId {
                        kind,
                        id: k.to_string(),
                    });
                }
            }
            Ok(set)
        }
        let agencies = ids("agency", &self.agencies, |a: &Agency| a.agency_id.as_str())?;
        let stops = ids("stop", &self.stops, |s: &Stop| s.stop_id.as_str())?;
        let routes = ids("route", &self.routes, |r: &Route| r.route_id.as_str())?;
        let trips = ids("trip", &self.trips, |t: &Trip| t.trip_id.as_str())?;
        let services = ids("service", &self.services, |s: &Service| s.service_id.as_str())?;

        for s in &self.stops {
            if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
                return Err(GtfsError::InvalidCoordinates(s.stop_id.clone()));
            }
        }

        let mut dangling = BTreeSet::new();
        for r in &self.routes {
            if !agencies.contains(r.agency_id.as_str()) {
                dangling.insert(format!("route {} -> agency {}", r.route_id, r.agency_id));
            }
        }
        for t in &self.trips {
            if !routes.contains(t.route_id.as_str()) {
                dangling.insert(format!("trip {} -> route {}", t.trip_id, t.route_id));
            }
            if !services.contains(t.service_id.as_str()) {
                dangling.insert(format!("trip {} -> service {}", t.trip_id, t.service_id));
            }
        }
        for st in &self.stop_times {
            if !trips.contains(st.trip_id.as_str()) {
                dangling.insert(format!(
                    "stop time {}#{} -> trip {}",
                    st.trip_id, st.stop_sequence, st.trip_id
                ));
            }
            if !stops.contains(st.stop_id.as_str()) {
                dangling.insert(format!(
                    "stop time {}#{} -> stop {}",
                    st.trip_id, st.stop_sequence, st.stop_id
                ));
            }
        }
        if !dangling.is_empty() {
            return Err(GtfsError::DanglingReference(dangling.into_iter().collect()));
        }

        for (trip, times) in self.stop_times_by_trip() {
            let mut prev: Option<&StopTime> = None;
            for st in times {
                if st.departure < st.arrival {
                    return Err(GtfsError::UnsortedStopTimes {
                        trip: trip.to_string(),
                        reason: format!("departure before arrival at sequence {}", st.stop_sequence),
                    });
                }
                if let Some(p) = prev {
                    if st.stop_sequence <= p.stop_sequence {
                        return Err(GtfsError::UnsortedStopTimes {
                            trip: trip.to_string(),
                            reason: format!("stop sequence {} repeated", st.stop_sequence),
                        });
                    }
                    if st.arrival < p.departure {
                        return Err(GtfsError::UnsortedStopTimes {
                            trip: trip.to_string(),
                            reason: format!(
                                "arrival at sequence {} precedes previous departure",
                                st.stop_sequence
                            ),
                        });
                    }
                }
                prev = Some(st);
            }
        }
        Ok(())
    }

    /// Stop times grouped per trip, in stop-sequence order.
    pub fn stop_times_by_trip(&self) -> BTreeMap<&str, Vec<&StopTime>> {
        let mut map: BTreeMap<&str, Vec<&StopTime>> = BTreeMap::new();
        for st in &self.stop_times {
            map.entry(st.trip_id.as_str()).or_default().push(st);
        }
        for v in map.values_mut() {
            v.sort_by_key(|s| s.stop_sequence);
        }
        map
    }
}

/// Renders seconds as `HH:MM:SS`; hours may exceed 23.
pub fn format_gtfs_time(seconds: u32) -> String {
    format!(
        "{:02}:{:02}:{:02}",
        seconds / 3600,
        (seconds / 60) % 60,
        seconds % 60
    )
}

pub fn parse_gtfs_time(s: &str) -> Option<u32> {
    let mut it = s.trim().split(':');
    let h: u32 = it.next()?.parse().ok()?;
    let m: u32 = it.next()?.parse().ok()?;
    let sec: u32 = it.next()?.parse().ok()?;
    if it.next().is_some() || m > 59 || sec > 59 {
        return None;
    }
    Some(h * 3600 + m * 60 + sec)
}

pub fn format_gtfs_date(d: NaiveDate) -> String {
    d.format("%Y%m%d").to_string()
}

pub fn parse_gtfs_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y%m%d").ok()
}

/// Epoch seconds of service-day midnight (UTC).
pub fn service_midnight(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
}

pub const GTFS_TYPES: [&str; 6] = [
    "GtfsAgency",
    "GtfsStop",
    "GtfsRoute",
    "GtfsTrip",
    "GtfsStopTime",
    "GtfsService",
];

fn weekday_string(flags: &[bool; 7]) -> String {
    flags.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Encodes a feed as NGSI urban-mobility entities (the inverse of
/// [`ngsi_to_feed`]).
pub fn feed_to_ngsi(feed: &GtfsFeed) -> Vec<NgsiEntity> {
    let mut out = Vec::new();
    for a in &feed.agencies {
        out.push(
            NgsiEntity::new(&a.agency_id, "GtfsAgency")
                .with("name", Attribute::text(&a.name))
                .with("url", Attribute::text(&a.url))
                .with("timezone", Attribute::text(&a.timezone)),
        );
    }
    for s in &feed.stops {
        out.push(
            NgsiEntity::new(&s.stop_id, "GtfsStop")
                .with("name", Attribute::text(&s.name))
                .with("lat", Attribute::number(s.lat))
                .with("lon", Attribute::number(s.lon)),
        );
    }
    for r in &feed.routes {
        out.push(
            NgsiEntity::new(&r.route_id, "GtfsRoute")
                .with("refAgency", Attribute::reference(&r.agency_id))
                .with("shortName", Attribute::text(&r.short_name))
                .with("routeType", Attribute::integer(i64::from(r.route_type))),
        );
    }
    for t in &feed.trips {
        out.push(
            NgsiEntity::new(&t.trip_id, "GtfsTrip")
                .with("refRoute", Attribute::reference(&t.route_id))
                .with("refService", Attribute::reference(&t.service_id)),
        );
    }
    for st in &feed.stop_times {
        out.push(
            NgsiEntity::new(format!("{}:{}", st.trip_id, st.stop_sequence), "GtfsStopTime")
                .with("refTrip", Attribute::reference(&st.trip_id))
                .with("refStop", Attribute::reference(&st.stop_id))
                .with("stopSequence", Attribute::integer(i64::from(st.stop_sequence)))
                .with("arrivalTime", Attribute::integer(i64::from(st.arrival)))
                .with("departureTime", Attribute::integer(i64::from(st.departure))),
        );
    }
    for s in &feed.services {
        out.push(
            NgsiEntity::new(&s.service_id, "GtfsService")
                .with("weekdays", Attribute::text(weekday_string(&s.weekdays)))
                .with("startDate", Attribute::text(format_gtfs_date(s.start_date)))
                .with("endDate", Attribute::text(format_gtfs_date(s.end_date))),
        );
    }
    out
}

struct Fields<'a>(&'a NgsiEntity);

impl Fields<'_> {
    fn err(&self, reason: String) -> GtfsError {
        GtfsError::InvalidEntity {
            id: self.0.id.clone(),
            reason,
        }
    }

    fn text(&self, name: &str) -> Result<String, GtfsError> {
        self.0
            .attr(name)
            .and_then(|a| a.as_str())
            .map(str::to_string)
            .ok_or_else(|| self.err(format!("missing text attribute {name}")))
    }

    fn number(&self, name: &str) -> Result<f64, GtfsError> {
        self.0
            .attr(name)
            .and_then(|a| a.as_f64())
            .ok_or_else(|| self.err(format!("missing numeric attribute {name}")))
    }

    fn uint(&self, name: &str) -> Result<u32, GtfsError> {
        let x = self.number(name)?;
        if x < 0.0 || x.fract() != 0.0 || x > f64::from(u32::MAX) {
            return Err(self.err(format!("{name} must be a non-negative integer")));
        }
        Ok(x as u32)
    }

    fn date(&self, name: &str) -> Result<NaiveDate, GtfsError> {
        let s = self.text(name)?;
        parse_gtfs_date(&s).ok_or_else(|| self.err(format!("{name} is not YYYYMMDD")))
    }
}

/// Builds a normalized GTFS feed from NGSI entities. Non-GTFS entity types are
/// ignored.
pub fn ngsi_to_feed(entities: &[NgsiEntity]) -> Result<GtfsFeed, GtfsError> {
    let mut feed = GtfsFeed::default();
    for e in entities {
        let f = Fields(e);
        match e.entity_type.as_str() {
            "GtfsAgency" => feed.agencies.push(Agency {
                agency_id: e.id.clone(),
                name: f.text("name")?,
                url: f.text("url")?,
                timezone: f.text("timezone")?,
            }),
            "GtfsStop" => feed.stops.push(Stop {
                stop_id: e.id.clone(),
                name: f.text("name")?,
                lat: f.number("lat")?,
                lon: f.number("lon")?,
            }),
            "GtfsRoute" => {
                let route_type = f.uint("routeType")?;
                feed.routes.push(Route {
                    route_id: e.id.clone(),
                    agency_id: f.text("refAgency")?,
                    short_name: f.text("shortName")?,
                    route_type: u16::try_from(route_type)
                        .map_err(|_| f.err("routeType out of range".into()))?,
                })
            }
            "GtfsTrip" => feed.trips.push(Trip {
                trip_id: e.id.clone(),
                route_id: f.text("refRoute")?,
                service_id: f.text("refService")?,
            }),
            "GtfsStopTime" => feed.stop_times.push(StopTime {
                trip_id: f.text("refTrip")?,
                stop_sequence: f.uint("stopSequence")?,
                stop_id: f.text("refStop")?,
                arrival: f.uint("arrivalTime")?,
                departure: f.uint("departureTime")?,
            }),
            "GtfsService" => {
                let w = f.text("weekdays")?;
                if w.len() != 7 || !w.chars().all(|c| c == '0' || c == '1') {
                    return Err(f.err("weekdays must be seven 0/1 flags".into()));
                }
                let mut weekdays = [false; 7];
                for (i, c) in w.chars().enumerate() {
                    weekdays[i] = c == '1';
                }
                feed.services.push(Service {
                    service_id: e.id.clone(),
                    weekdays,
                    start_date: f.date("startDate")?,
                    end_date: f.date("endDate")?,
                })
            }
            _ => {}
        }
    }
    feed.normalize();
    feed.validate()?;
    Ok(feed)
}

/// Converts NGSI urban-mobility entities into a feed and its deterministic
/// zip archive.
pub fn ngsi_to_gtfs(entities: &[NgsiEntity]) -> Result<(GtfsFeed, Vec<u8>), GtfsError> {
    let feed = ngsi_to_feed(entities)?;
    let zip = write_feed_zip(&feed)?;
    Ok((feed, zip))
}
