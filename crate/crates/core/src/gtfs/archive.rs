use std::collections::HashMap;
use std::io::{Cursor, Read, Write};

use super::{
    format_gtfs_date, format_gtfs_time, parse_gtfs_date, parse_gtfs_time, Agency, GtfsError,
    GtfsFeed, Route, Service, Stop, StopTime, Trip,
};

/// Member files in archive order.
pub const FEED_FILES: [&str; 6] = [
    "agency.txt",
    "stops.txt",
    "routes.txt",
    "trips.txt",
    "stop_times.txt",
    "calendar.txt",
];

const WEEKDAY_COLUMNS: [&str; 7] = [
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];

fn csv_table(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, GtfsError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| GtfsError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| GtfsError::Io(e.to_string()))
}

fn feed_tables(feed: &GtfsFeed) -> Result<Vec<(&'static str, Vec<u8>)>, GtfsError> {
    let agency = csv_table(
        &["agency_id", "agency_name", "agency_url", "agency_timezone"],
        feed.agencies
            .iter()
            .map(|a| vec![a.agency_id.clone(), a.name.clone(), a.url.clone(), a.timezone.clone()])
            .collect(),
    )?;
    let stops = csv_table(
        &["stop_id", "stop_name", "stop_lat", "stop_lon"],
        feed.stops
            .iter()
            .map(|s| vec![s.stop_id.clone(), s.name.clone(), s.lat.to_string(), s.lon.to_string()])
            .collect(),
    )?;
    let routes = csv_table(
        &["route_id", "agency_id", "route_short_name", "route_type"],
        feed.routes
            .iter()
            .map(|r| {
                vec![
                    r.route_id.clone(),
                    r.agency_id.clone(),
                    r.short_name.clone(),
                    r.route_type.to_string(),
                ]
            })
            .collect(),
    )?;
    let trips = csv_table(
        &["route_id", "service_id", "trip_id"],
        feed.trips
            .iter()
            .map(|t| vec![t.route_id.clone(), t.service_id.clone(), t.trip_id.clone()])
            .collect(),
    )?;
    let stop_times = csv_table(
        &["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"],
        feed.stop_times
            .iter()
            .map(|st| {
                vec![
                    st.trip_id.clone(),
                    format_gtfs_time(st.arrival),
                    format_gtfs_time(st.departure),
                    st.stop_id.clone(),
                    st.stop_sequence.to_string(),
                ]
            })
            .collect(),
    )?;
    let mut cal_header = vec!["service_id"];
    cal_header.extend(WEEKDAY_COLUMNS);
    cal_header.extend(["start_date", "end_date"]);
    let calendar = csv_table(
        &cal_header,
        feed.services
            .iter()
            .map(|s| {
                let mut row = vec![s.service_id.clone()];
                row.extend(s.weekdays.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
                row.push(format_gtfs_date(s.start_date));
                row.push(format_gtfs_date(s.end_date));
                row
            })
            .collect(),
    )?;
    Ok(vec![
        (FEED_FILES[0], agency),
        (FEED_FILES[1], stops),
        (FEED_FILES[2], routes),
        (FEED_FILES[3], trips),
        (FEED_FILES[4], stop_times),
        (FEED_FILES[5], calendar),
    ])
}

/// Writes a byte-deterministic archive: fixed member order, fixed timestamps
/// and permissions. The feed should be normalized.
pub fn write_feed_zip(feed: &GtfsFeed) -> Result<Vec<u8>, GtfsError> {
    let zerr = |e: zip::result::ZipError| GtfsError::Zip(e.to_string());
    let mut zw = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, bytes) in feed_tables(feed)? {
        zw.start_file(name, opts).map_err(zerr)?;
        zw.write_all(&bytes).map_err(|e| GtfsError::Io(e.to_string()))?;
    }
    Ok(zw.finish().map_err(zerr)?.into_inner())
}

struct Table {
    file: &'static str,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn parse(file: &'static str, bytes: &[u8]) -> Result<Self, GtfsError> {
        let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
        let perr = |m: String| GtfsError::Parse {
            file: file.to_string(),
            message: m,
        };
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(bytes);
        let columns = r
            .headers()
            .map_err(|e| perr(e.to_string()))?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        let rows = r
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| perr(e.to_string()))?;
        Ok(Self {
            file,
            columns,
            rows,
        })
    }

    fn err(&self, line: usize, message: String) -> GtfsError {
        GtfsError::Parse {
            file: self.file.to_string(),
            message: format!("row {}: {message}", line + 2),
        }
    }

    fn get<'r>(&self, row: &'r csv::StringRecord, i: usize, col: &str) -> Result<&'r str, GtfsError> {
        self.columns
            .get(col)
            .and_then(|&c| row.get(c))
            .ok_or_else(|| self.err(i, format!("missing column {col}")))
    }

    fn parsed<T: std::str::FromStr>(
        &self,
        row: &csv::StringRecord,
        i: usize,
        col: &str,
    ) -> Result<T, GtfsError> {
        let s = self.get(row, i, col)?;
        s.parse()
            .map_err(|_| self.err(i, format!("bad value {s:?} in {col}")))
    }
}

/// Parses an archive written by [`write_feed_zip`] (or any feed using the
/// same columns). The result is normalized and validated.
pub fn read_feed_zip(bytes: &[u8]) -> Result<GtfsFeed, GtfsError> {
    let zerr = |e: zip::result::ZipError| GtfsError::Zip(e.to_string());
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).map_err(zerr)?;
    let mut tables = Vec::new();
    for name in FEED_FILES {
        let mut f = archive
            .by_name(name)
            .map_err(|_| GtfsError::FileMissing(name.to_string()))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)
            .map_err(|e| GtfsError::Io(e.to_string()))?;
        tables.push(Table::parse(name, &buf)?);
    }
    let mut feed = GtfsFeed::default();
    let t = &tables[0];
    for (i, r) in t.rows.iter().enumerate() {
        feed.agencies.push(Agency {
            agency_id: t.get(r, i, "agency_id")?.to_string(),
            name: t.get(r, i, "agency_name")?.to_string(),
            url: t.get(r, i, "agency_url")?.to_string(),
            timezone: t.get(r, i, "agency_timezone")?.to_string(),
        });
    }
    let t = &tables[1];
    for (i, r) in t.rows.iter().enumerate() {
        feed.stops.push(Stop {
            stop_id: t.get(r, i, "stop_id")?.to_string(),
            name: t.get(r, i, "stop_name")?.to_string(),
            lat: t.parsed(r, i, "stop_lat")?,
            lon: t.parsed(r, i, "stop_lon")?,
        });
    }
    let t = &tables[2];
    for (i, r) in t.rows.iter().enumerate() {
        feed.routes.push(Route {
            route_id: t.get(r, i, "route_id")?.to_string(),
            agency_id: t.get(r, i, "agency_id")?.to_string(),
            short_name: t.get(r, i, "route_short_name")?.to_string(),
            route_type: t.parsed(r, i, "route_type")?,
        });
    }
    let t = &tables[3];
    for (i, r) in t.rows.iter().enumerate() {
        feed.trips.push(Trip {
            trip_id: t.get(r, i, "trip_id")?.to_string(),
            route_id: t.get(r, i, "route_id")?.to_string(),
            service_id: t.get(r, i, "service_id")?.to_string(),
        });
    }
    let t = &tables[4];
    for (i, r) in t.rows.iter().enumerate() {
        let time = |col: &str| -> Result<u32, GtfsError> {
            let s = t.get(r, i, col)?;
            parse_gtfs_time(s).ok_or_else(|| t.err(i, format!("bad time {s:?} in {col}")))
        };
        feed.stop_times.push(StopTime {
            trip_id: t.get(r, i, "trip_id")?.to_string(),
            stop_sequence: t.parsed(r, i, "stop_sequence")?,
            stop_id: t.get(r, i, "stop_id")?.to_string(),
            arrival: time("arrival_time")?,
            departure: time("departure_time")?,
        });
    }
    let t = &tables[5];
    for (i, r) in t.rows.iter().enumerate() {
        let mut weekdays = [false; 7];
        for (k, col) in WEEKDAY_COLUMNS.iter().enumerate() {
            weekdays[k] = match t.get(r, i, col)? {
                "1" => true,
                "0" => false,
                other => return Err(t.err(i, format!("bad flag {other:?} in {col}"))),
            };
        }
        let date = |col: &str| -> Result<_, GtfsError> {
            let s = t.get(r, i, col)?;
            parse_gtfs_date(s).ok_or_else(|| t.err(i, format!("bad date {s:?} in {col}")))
        };
        feed.services.push(Service {
            service_id: t.get(r, i, "service_id")?.to_string(),
            weekdays,
            start_date: date("start_date")?,
            end_date: date("end_date")?,
        });
    }
    feed.normalize();
    feed.validate()?;
    Ok(feed)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_feed;
    use super::*;

    #[test]
    fn zip_round_trip_and_determinism() {
        let feed = tiny_feed();
        let a = write_feed_zip(&feed).unwrap();
        let b = write_feed_zip(&feed).unwrap();
        assert_eq!(a, b);
        assert_eq!(read_feed_zip(&a).unwrap(), feed);
    }

    #[test]
    fn members_in_fixed_order_with_lf() {
        let bytes = write_feed_zip(&tiny_feed()).unwrap();
        let mut z = zip::ZipArchive::new(Cursor::new(bytes)).unwrap();
        let names: Vec<_> = (0..z.len())
            .map(|i| z.by_index(i).unwrap().name().to_string())
            .collect();
        assert_eq!(names, FEED_FILES);
        let mut s = String::new();
        z.by_name("stops.txt").unwrap().read_to_string(&mut s).unwrap();
        assert!(!s.contains('\r'));
        assert!(s.contains("\"Harbour, North\""));
        let mut st = String::new();
        z.by_name("stop_times.txt").unwrap().read_to_string(&mut st).unwrap();
        assert!(st.contains("25:01:01"));
    }

    #[test]
    fn missing_member_rejected() {
        let mut zw = zip::ZipWriter::new(Cursor::new(Vec::new()));
        zw.start_file("agency.txt", zip::write::SimpleFileOptions::default())
            .unwrap();
        zw.write_all(b"agency_id\n").unwrap();
        let bytes = zw.finish().unwrap().into_inner();
        assert!(matches!(read_feed_zip(&bytes), Err(GtfsError::FileMissing(_))));
    }
}
