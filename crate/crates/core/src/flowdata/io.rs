use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;

use super::{CameraMapping, FlowKind, FlowMatrix, RoadSegment};
use crate::error::{Error, Result};

/// Timestamp format of flow files.
pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M";

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn loc(path: &Path, row: usize, col: &str) -> String {
    format!("{} row {row}, column {col}", path.display())
}

/// Reads `Time,<id>,...` flow files. Empty cells become gaps. The interval
/// is taken from the first same-day spacing (5 minutes for single-row files).
pub fn load_flow_matrix(path: &Path, kind: FlowKind) -> Result<FlowMatrix> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || !headers[0].eq_ignore_ascii_case("time") {
        return Err(Error::parse(
            path.display().to_string(),
            "header must start with `Time`",
        ));
    }
    let node_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if node_ids.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no node columns"));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::parse(
                loc(path, row, "*"),
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let t = NaiveDateTime::parse_from_str(&rec[0], TIME_FORMAT)
            .map_err(|_| Error::parse(loc(path, row, "Time"), format!("bad timestamp `{}`", &rec[0])))?;
        times.push(t);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(loc(path, row, &node_ids[j]), format!("bad count `{cell}`")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::parse(
                    loc(path, row, &node_ids[j]),
                    format!("negative or non-finite count {cell}"),
                ));
            }
            values.push(Some(v));
        }
    }
    let interval = times
        .windows(2)
        .find(|w| w[0].date() == w[1].date())
        .map(|w| (w[1] - w[0]).num_minutes())
        .unwrap_or(5);
    if interval <= 0 {
        return Err(Error::InvalidData(format!(
            "{}: timestamps are not strictly increasing",
            path.display()
        )));
    }
    let gaps = values.iter().filter(|v| v.is_none()).count();
    if gaps > 0 {
        log::warn!("{}: {gaps} missing cells recorded as gaps", path.display());
    }
    FlowMatrix::new(times, node_ids, values, interval as u32, kind)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

fn fmt_count(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn write_flow_matrix(path: &Path, flows: &FlowMatrix) -> Result<()> {
    let mut out = String::new();
    out.push_str("Time");
    for id in flows.node_ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (r, t) in flows.times().iter().enumerate() {
        out.push_str(&t.format(TIME_FORMAT).to_string());
        for v in flows.row(r) {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&fmt_count(*v));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `camera_id,segment_id`.
pub fn load_camera_mapping(path: &Path) -> Result<CameraMapping> {
    let mut rdr = open(path)?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::parse(path.display().to_string(), "expected camera_id,segment_id"));
        }
        entries.push((rec[0].to_string(), rec[1].to_string()));
    }
    CameraMapping::new(entries)
}

pub fn write_camera_mapping(path: &Path, mapping: &CameraMapping) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("camera_id,segment_id\n");
    for (c, s) in mapping.entries() {
        text.push_str(&format!("{c},{s}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads `segment_id,lat,lon` with the default 20 m box.
pub fn load_segments(path: &Path) -> Result<Vec<RoadSegment>> {
    let mut rdr = open(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize, name: &str| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| Error::parse(loc(path, i + 1, name), "missing field"))?
                .parse::<f64>()
                .map_err(|_| Error::parse(loc(path, i + 1, name), "not a number"))
        };
        let id: u32 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(loc(path, i + 1, "segment_id"), "not a positive integer"))?;
        out.push(RoadSegment::new(id, field(1, "lat")?, field(2, "lon")?));
    }
    Ok(out)
}

pub fn write_segments(path: &Path, segments: &[RoadSegment]) -> Result<()> {
    let mut text = String::from("segment_id,lat,lon\n");
    for s in segments {
        text.push_str(&format!("{},{},{}\n", s.segment_id, s.center_lat, s.center_lon));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
