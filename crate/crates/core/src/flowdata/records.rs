use std::io::BufRead;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rayon::prelude::*;

use super::{FlowKind, FlowMatrix, RoadSegment};
use crate::error::{Error, Result};

/// One cellular-traffic record with its originating coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GctRecord {
    pub timestamp: NaiveDateTime,
    pub device_id: String,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordError {
    /// 1-based line number in the source.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseReport {
    pub records: Vec<GctRecord>,
    pub errors: Vec<RecordError>,
}

/// Device ids arrive pre-hashed. Empty ids, whitespace, e-mail-like text and
/// all-digit 14–17 character strings (raw IMEI / IMEISV) are rejected.
pub fn validate_device_id(id: &str) -> std::result::Result<(), String> {
    if id.is_empty() {
        return Err("empty device id".into());
    }
    if id.chars().any(|c| c.is_whitespace() || c.is_control() || c == '@') {
        return Err(format!("device id `{id}` is not a hash token"));
    }
    if (14..=17).contains(&id.len()) && id.chars().all(|c| c.is_ascii_digit()) {
        return Err("device id looks like a raw IMEI, expected a hashed identifier".into());
    }
    Ok(())
}

fn parse_timestamp(s: &str, default_date: NaiveDate) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveTime::parse_from_str(s, "%H:%M:%S")
        .ok()
        .map(|t| default_date.and_time(t))
}

fn parse_line(line: &str, default_date: NaiveDate) -> std::result::Result<GctRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let timestamp = parse_timestamp(fields[0], default_date)
        .ok_or_else(|| format!("unparseable time `{}`", fields[0]))?;
    validate_device_id(fields[1])?;
    let latitude: f64 = fields[2]
        .parse()
        .map_err(|_| format!("unparseable latitude `{}`", fields[2]))?;
    let longitude: f64 = fields[3]
        .parse()
        .map_err(|_| format!("unparseable longitude `{}`", fields[3]))?;
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(format!("latitude {latitude} out of range [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(format!("longitude {longitude} out of range [-180, 180]"));
    }
    Ok(GctRecord {
        timestamp,
        device_id: fields[1].to_string(),
        latitude,
        longitude,
    })
}

/// Parses `time,imei_hash,lat,lon` lines. Time-only stamps (`HH:MM:SS`) are
/// placed on `default_date`. A leading header line is skipped. Bad lines go
/// to the error list; read failures are fatal.
pub fn parse_gct_records_on(source: impl BufRead, default_date: NaiveDate) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 && trimmed.to_ascii_lowercase().starts_with("time") {
            continue;
        }
        match parse_line(trimmed, default_date) {
            Ok(r) => report.records.push(r),
            Err(message) => report.errors.push(RecordError { line: i + 1, message }),
        }
    }
    Ok(report)
}

pub fn parse_gct_records(source: impl BufRead) -> Result<ParseReport> {
    parse_gct_records_on(source, NaiveDate::from_ymd_opt(1970, 1, 1).unwrap())
}

/// Daily collection window `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DayWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
}

impl Default for DayWindow {
    fn default() -> Self {
        DayWindow {
            start: NaiveTime::from_hms_opt(6, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(19, 0, 0).unwrap(),
        }
    }
}

impl DayWindow {
    pub fn parse(start: &str, end: &str) -> Result<Self> {
        Ok(DayWindow {
            start: super::parse_hhmm(start)?,
            end: super::parse_hhmm(end)?,
        })
    }

    /// Number of intervals per day.
    pub fn intervals(&self, interval_minutes: u32) -> Result<usize> {
        let span = (self.end - self.start).num_minutes();
        if span <= 0 || interval_minutes == 0 || span % interval_minutes as i64 != 0 {
            return Err(Error::Config(format!(
                "interval of {interval_minutes} min must evenly divide the day window {}–{}",
                self.start, self.end
            )));
        }
        Ok((span / interval_minutes as i64) as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GctAggregation {
    pub flows: FlowMatrix,
    /// Records outside every segment box or outside the day window.
    pub discarded: usize,
    /// Pairs of segment ids whose boxes overlap (resolved by lowest id).
    pub overlaps: Vec<(u32, u32)>,
}

struct Grid {
    dates: Vec<NaiveDate>,
    per_day: usize,
    window: DayWindow,
    interval_minutes: u32,
    order: Vec<usize>,
}

impl Grid {
    /// (row, column) of a record, or None when it must be discarded.
    fn locate(&self, r: &GctRecord, segments: &[RoadSegment]) -> Option<(usize, usize)> {
        let time = r.timestamp.time();
        if time < self.window.start || time >= self.window.end {
            return None;
        }
        let day = self.dates.binary_search(&r.timestamp.date()).ok()?;
        let slot = ((time - self.window.start).num_seconds() / (self.interval_minutes as i64 * 60)) as usize;
        // lowest segment_id wins on shared edges
        let col = self
            .order
            .iter()
            .copied()
            .find(|&j| segments[j].contains(r.latitude, r.longitude))?;
        Some((day * self.per_day + slot, col))
    }
}

fn build_grid(
    records: &[GctRecord],
    segments: &[RoadSegment],
    interval_minutes: u32,
    window: DayWindow,
) -> Result<(Grid, Vec<(u32, u32)>)> {
    if segments.is_empty() {
        return Err(Error::Config("no road segments given".into()));
    }
    for (i, s) in segments.iter().enumerate() {
        if segments[..i].iter().any(|o| o.segment_id == s.segment_id) {
            return Err(Error::Config(format!("duplicate segment id {}", s.segment_id)));
        }
    }
    let per_day = window.intervals(interval_minutes)?;
    let mut overlaps = Vec::new();
    for i in 0..segments.len() {
        for j in i + 1..segments.len() {
            if segments[i].overlaps(&segments[j]) {
                let (a, b) = (segments[i].segment_id, segments[j].segment_id);
                log::warn!("segment boxes {a} and {b} overlap; shared points go to the lower id");
                overlaps.push((a.min(b), a.max(b)));
            }
        }
    }
    let (Some(first), Some(last)) = (
        records.iter().map(|r| r.timestamp.date()).min(),
        records.iter().map(|r| r.timestamp.date()).max(),
    ) else {
        return Err(Error::InvalidData("no records to aggregate".into()));
    };
    let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&j| segments[j].segment_id);
    Ok((
        Grid {
            dates,
            per_day,
            window,
            interval_minutes,
            order,
        },
        overlaps,
    ))
}

fn finish(grid: Grid, segments: &[RoadSegment], counts: Vec<u64>, discarded: usize, overlaps: Vec<(u32, u32)>) -> Result<GctAggregation> {
    let step = Duration::minutes(grid.interval_minutes as i64);
    let times: Vec<NaiveDateTime> = grid
        .dates
        .iter()
        .flat_map(|d| {
            let start = d.and_time(grid.window.start);
            (0..grid.per_day).map(move |k| start + step * k as i32)
        })
        .collect();
    let flows = FlowMatrix::new(
        times,
        segments.iter().map(|s| s.segment_id.to_string()).collect(),
        counts.into_iter().map(|c| Some(c as f64)).collect(),
        grid.interval_minutes,
        FlowKind::Gct,
    )?;
    Ok(GctAggregation {
        flows,
        discarded,
        overlaps,
    })
}

/// Counts records per (interval, segment) over every calendar day between
/// the first and last record. Intervals are half-open `[t, t + interval)`.
/// Columns follow `segments` order.
pub fn aggregate_gct_flow(
    records: &[GctRecord],
    segments: &[RoadSegment],
    interval_minutes: u32,
    window: DayWindow,
) -> Result<GctAggregation> {
    let (grid, overlaps) = build_grid(records, segments, interval_minutes, window)?;
    let cols = segments.len();
    let mut counts = vec![0u64; grid.dates.len() * grid.per_day * cols];
    let mut discarded = 0;
    for r in records {
        match grid.locate(r, segments) {
            Some((row, col)) => counts[row * cols + col] += 1,
            None => discarded += 1,
        }
    }
    finish(grid, segments, counts, discarded, overlaps)
}

/// Sharded variant of [`aggregate_gct_flow`]; integer per-cell sums make the
/// merge order-independent, so the result is identical.
pub fn aggregate_gct_flow_parallel(
    records: &[GctRecord],
    segments: &[RoadSegment],
    interval_minutes: u32,
    window: DayWindow,
    shard_size: usize,
) -> Result<GctAggregation> {
    let (grid, overlaps) = build_grid(records, segments, interval_minutes, window)?;
    let cols = segments.len();
    let cells = grid.dates.len() * grid.per_day * cols;
    let (counts, discarded) = records
        .par_chunks(shard_size.max(1))
        .map(|shard| {
            let mut c = vec![0u64; cells];
            let mut d = 0usize;
            for r in shard {
                match grid.locate(r, segments) {
                    Some((row, col)) => c[row * cols + col] += 1,
                    None => d += 1,
                }
            }
            (c, d)
        })
        .reduce(
            || (vec![0u64; cells], 0),
            |(mut a, da), (b, db)| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                (a, da + db)
            },
        );
    finish(grid, segments, counts, discarded, overlaps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: &str, lat: f64, lon: f64) -> GctRecord {
        GctRecord {
            timestamp: NaiveDateTime::parse_from_str(ts, "%Y-%m-%d %H:%M:%S").unwrap(),
            device_id: "H...aK".into(),
            latitude: lat,
            longitude: lon,
        }
    }

    #[test]
    fn parses_table_row() {
        let rep = parse_gct_records("07:30:36,H...aK,24.78711,120.98641\n".as_bytes()).unwrap();
        assert!(rep.errors.is_empty());
        let r = &rep.records[0];
        assert_eq!(r.timestamp.time(), NaiveTime::from_hms_opt(7, 30, 36).unwrap());
        assert_eq!(r.device_id, "H...aK");
        assert_eq!(r.latitude, 24.78711);
        assert_eq!(r.longitude, 120.98641);
    }

    #[test]
    fn empty_stream_is_empty() {
        let rep = parse_gct_records("".as_bytes()).unwrap();
        assert!(rep.records.is_empty() && rep.errors.is_empty());
    }

    #[test]
    fn bad_lines_are_reported_not_dropped() {
        let text = "time,imei_hash,lat,lon\n07:30:36,abc,95.0,120.0\n07:30:37,,24.0,120.0\n07:30:38,123456789012345,24.0,120.0\nnot,enough\n";
        let rep = parse_gct_records(text.as_bytes()).unwrap();
        assert!(rep.records.is_empty());
        assert_eq!(rep.errors.len(), 4);
        assert_eq!(rep.errors[0].line, 2);
        assert!(rep.errors[0].message.contains("latitude"));
    }

    #[test]
    fn unreadable_stream_is_fatal() {
        struct Broken;
        impl std::io::Read for Broken {
            fn read(&mut self, _: &mut [u8]) -> std::io::Result<usize> {
                Err(std::io::Error::new(std::io::ErrorKind::Other, "boom"))
            }
        }
        assert!(parse_gct_records(std::io::BufReader::new(Broken)).is_err());
    }

    #[test]
    fn counts_half_open_intervals() {
        let seg = RoadSegment::new(1, 24.787, 120.986);
        let recs = vec![
            rec("2022-08-28 07:30:00", 24.787, 120.986),
            rec("2022-08-28 07:31:10", 24.787, 120.986),
            rec("2022-08-28 07:34:59", 24.787, 120.986),
            rec("2022-08-28 07:35:00", 24.787, 120.986),
            rec("2022-08-28 05:59:59", 24.787, 120.986),
            rec("2022-08-28 07:31:00", 25.0, 121.0),
        ];
        let agg = aggregate_gct_flow(&recs, &[seg], 5, DayWindow::default()).unwrap();
        assert_eq!(agg.flows.n_rows(), 156);
        let row = |h: u32, m: u32| ((h - 6) * 12 + m / 5) as usize;
        assert_eq!(agg.flows.get(row(7, 30), 0), Some(3.0));
        assert_eq!(agg.flows.get(row(7, 35), 0), Some(1.0));
        assert_eq!(agg.discarded, 2);
    }

    #[test]
    fn shared_edge_goes_to_lowest_id() {
        let a = RoadSegment::new(7, 24.787, 120.986);
        let (dlat, _) = a.half_extent_deg();
        let b = RoadSegment::new(3, 24.787 + 1.5 * dlat, 120.986);
        let edge = rec("2022-08-28 06:00:00", 24.787 + 0.75 * dlat, 120.986);
        let agg = aggregate_gct_flow(&[edge.clone()], &[a.clone(), b.clone()], 5, DayWindow::default()).unwrap();
        assert_eq!(agg.flows.get(0, 1), Some(1.0));
        assert_eq!(agg.flows.get(0, 0), Some(0.0));
        assert_eq!(agg.overlaps, vec![(3, 7)]);
        let swapped = aggregate_gct_flow(&[edge], &[b, a], 5, DayWindow::default()).unwrap();
        assert_eq!(swapped.flows.get(0, 0), Some(1.0));
    }

    #[test]
    fn interval_must_divide_window() {
        let seg = RoadSegment::new(1, 24.787, 120.986);
        let recs = vec![rec("2022-08-28 07:30:00", 24.787, 120.986)];
        assert!(aggregate_gct_flow(&recs, &[seg], 7, DayWindow::default()).is_err());
    }
}
