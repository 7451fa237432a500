//! Flow data: raw GCT records, interval-aggregated flow matrices, camera
//! mappings, descriptive statistics, correlation and training preparation.

mod io;
mod prep;
mod records;
mod stats;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};

use crate::error::{Error, Result};

pub use io::{load_camera_mapping, load_flow_matrix, load_segments, write_camera_mapping, write_flow_matrix, write_segments, TIME_FORMAT};
pub use prep::{chronological_split, make_windows, NormScope, Normalizer, SplitRanges, Window};
pub use records::{
    aggregate_gct_flow, aggregate_gct_flow_parallel, parse_gct_records, parse_gct_records_on, validate_device_id,
    DayWindow, GctAggregation, GctRecord, ParseReport, RecordError,
};
pub use stats::{daily_pearson, descriptive_stats, pearson, CorrelationTable, DescriptiveStats, NodeAverage};

/// Which signal a [`FlowMatrix`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowKind {
    Gct,
    Vehicle,
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowKind::Gct => "gct",
            FlowKind::Vehicle => "vehicle",
        })
    }
}

impl std::str::FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gct" => Ok(FlowKind::Gct),
            "vehicle" | "veh" => Ok(FlowKind::Vehicle),
            _ => Err(Error::Unknown {
                kind: "flow kind",
                name: s.into(),
            }),
        }
    }
}

/// A 20 m x 20 m (by default) collection box around a road location.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadSegment {
    pub segment_id: u32,
    pub center_lat: f64,
    pub center_lon: f64,
    pub half_width_m: f64,
}

impl RoadSegment {
    pub const DEFAULT_HALF_WIDTH_M: f64 = 10.0;

    pub fn new(segment_id: u32, center_lat: f64, center_lon: f64) -> Self {
        RoadSegment {
            segment_id,
            center_lat,
            center_lon,
            half_width_m: Self::DEFAULT_HALF_WIDTH_M,
        }
    }

    pub fn side_m(&self) -> f64 {
        2.0 * self.half_width_m
    }

    /// Half extents of the box in degrees (lat, lon).
    pub(crate) fn half_extent_deg(&self) -> (f64, f64) {
        const M_PER_DEG_LAT: f64 = 111_320.0;
        let dlat = self.half_width_m / M_PER_DEG_LAT;
        let dlon = self.half_width_m / (M_PER_DEG_LAT * self.center_lat.to_radians().cos());
        (dlat, dlon)
    }

    /// Closed-box containment; points on an edge are inside.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let (dlat, dlon) = self.half_extent_deg();
        (lat - self.center_lat).abs() <= dlat && (lon - self.center_lon).abs() <= dlon
    }

    pub fn overlaps(&self, other: &RoadSegment) -> bool {
        let (a_lat, a_lon) = self.half_extent_deg();
        let (b_lat, b_lon) = other.half_extent_deg();
        (self.center_lat - other.center_lat).abs() <= a_lat + b_lat
            && (self.center_lon - other.center_lon).abs() <= a_lon + b_lon
    }
}

/// Interval flows: `values[t * nodes + j]` is the count of node `j` in the
/// interval starting at `times[t]`. `None` marks a missing cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatrix {
    times: Vec<NaiveDateTime>,
    node_ids: Vec<String>,
    values: Vec<Option<f64>>,
    interval_minutes: u32,
    kind: FlowKind,
}

impl FlowMatrix {
    /// Validates spacing and non-negativity.
    ///
    /// Consecutive intervals must be exactly `interval_minutes` apart unless
    /// the next one starts on a later calendar date (the nightly gap).
    pub fn new(
        times: Vec<NaiveDateTime>,
        node_ids: Vec<String>,
        values: Vec<Option<f64>>,
        interval_minutes: u32,
        kind: FlowKind,
    ) -> Result<Self> {
        if interval_minutes == 0 {
            return Err(Error::InvalidData("interval_minutes must be positive".into()));
        }
        if node_ids.is_empty() {
            return Err(Error::InvalidData("flow matrix has no nodes".into()));
        }
        if values.len() != times.len() * node_ids.len() {
            return Err(Error::InvalidData(format!(
                "flow matrix has {} values for {} intervals x {} nodes",
                values.len(),
                times.len(),
                node_ids.len()
            )));
        }
        let step = chrono::Duration::minutes(interval_minutes as i64);
        for (i, w) in times.windows(2).enumerate() {
            let regular = w[1] - w[0] == step;
            let day_break = w[1].date() > w[0].date();
            if !(regular || day_break) {
                return Err(Error::InvalidData(format!(
                    "irregular interval spacing between row {} ({}) and row {} ({}); expected {} minutes",
                    i + 1,
                    w[0],
                    i + 2,
                    w[1],
                    interval_minutes
                )));
            }
        }
        let n = node_ids.len();
        for (k, v) in values.iter().enumerate() {
            if let Some(v) = v {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::InvalidData(format!(
                        "negative or non-finite count {v} at row {}, column {} ({})",
                        k / n + 1,
                        k % n + 1,
                        node_ids[k % n]
                    )));
                }
            }
        }
        Ok(FlowMatrix {
            times,
            node_ids,
            values,
            interval_minutes,
            kind,
        })
    }

    pub fn kind(&self) -> FlowKind {
        self.kind
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn times(&self) -> &[NaiveDateTime] {
        &self.times
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn get(&self, row: usize, node: usize) -> Option<f64> {
        self.values[row * self.node_ids.len() + node]
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let n = self.node_ids.len();
        &self.values[row * n..(row + 1) * n]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    /// Cells recorded as missing, as (row, node) pairs.
    pub fn gaps(&self) -> Vec<(usize, usize)> {
        let n = self.node_ids.len();
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(k, _)| (k / n, k % n))
            .collect()
    }

    pub fn column(&self, node: usize) -> Vec<Option<f64>> {
        (0..self.n_rows()).map(|r| self.get(r, node)).collect()
    }

    /// A copy restricted to the given node columns, in the given order.
    pub fn select_nodes(&self, nodes: &[usize]) -> Result<FlowMatrix> {
        let mut values = Vec::with_capacity(self.n_rows() * nodes.len());
        for r in 0..self.n_rows() {
            for &j in nodes {
                values.push(self.get(r, j));
            }
        }
        let ids = nodes.iter().map(|&j| self.node_ids[j].clone()).collect();
        FlowMatrix::new(self.times.clone(), ids, values, self.interval_minutes, self.kind)
    }

    /// Distinct calendar dates in row order.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut out: Vec<NaiveDate> = Vec::new();
        for t in &self.times {
            if out.last() != Some(&t.date()) {
                out.push(t.date());
            }
        }
        out
    }

    /// Row range of each calendar date.
    pub fn day_ranges(&self) -> Vec<(NaiveDate, std::ops::Range<usize>)> {
        let mut out: Vec<(NaiveDate, std::ops::Range<usize>)> = Vec::new();
        for (i, t) in self.times.iter().enumerate() {
            match out.last_mut() {
                Some((d, r)) if *d == t.date() => r.end = i + 1,
                _ => out.push((t.date(), i..i + 1)),
            }
        }
        out
    }
}

/// Camera → GCT segment assignment.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CameraMapping {
    entries: Vec<(String, String)>,
}

impl CameraMapping {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        for (i, (cam, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(c, _)| c == cam) {
                return Err(Error::InvalidData(format!("camera `{cam}` mapped more than once")));
            }
        }
        Ok(CameraMapping { entries })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cameras(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }

    pub fn segment_of(&self, camera: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(c, _)| c == camera)
            .map(|(_, s)| s.as_str())
    }

    /// Checks every segment exists among `gct_nodes` and that cameras are sparse (M < N).
    pub fn validate(&self, gct_nodes: &[String]) -> Result<()> {
        for (cam, seg) in &self.entries {
            if !gct_nodes.contains(seg) {
                return Err(Error::InvalidData(format!(
                    "camera `{cam}` maps to unknown segment `{seg}`"
                )));
            }
        }
        if self.entries.len() >= gct_nodes.len() {
            return Err(Error::InvalidData(format!(
                "expected fewer cameras ({}) than GCT nodes ({})",
                self.entries.len(),
                gct_nodes.len()
            )));
        }
        Ok(())
    }

    /// Mapping without `camera`.
    pub fn without(&self, camera: &str) -> CameraMapping {
        CameraMapping {
            entries: self.entries.iter().filter(|(c, _)| c != camera).cloned().collect(),
        }
    }

    /// GCT node index for every camera, in mapping order.
    pub fn gct_indices(&self, gct_nodes: &[String]) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|(cam, seg)| {
                gct_nodes.iter().position(|n| n == seg).ok_or_else(|| {
                    Error::InvalidData(format!("camera `{cam}` maps to unknown segment `{seg}`"))
                })
            })
            .collect()
    }
}

/// Dimensions of one prediction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub n_gct_nodes: usize,
    pub n_vehicle_nodes: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub interval_minutes: u32,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_gct_nodes > self.n_vehicle_nodes && self.n_vehicle_nodes >= 1) {
            return Err(Error::Config(format!(
                "task needs N > M >= 1, got N={} M={}",
                self.n_gct_nodes, self.n_vehicle_nodes
            )));
        }
        if self.input_steps == 0 || self.output_steps == 0 || self.interval_minutes == 0 {
            return Err(Error::Config("task steps and interval must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn parse_hhmm(s: &str) -> Result<NaiveTime> {
    NaiveTime::parse_from_str(s.trim(), "%H:%M")
        .map_err(|_| Error::parse(s.to_string(), "expected HH:MM"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, TIME_FORMAT).unwrap()
    }

    #[test]
    fn spacing_allows_day_breaks_only() {
        let ok = FlowMatrix::new(
            vec![ts("2022-08-28 18:55"), ts("2022-08-29 06:00"), ts("2022-08-29 06:05")],
            vec!["1".into()],
            vec![Some(1.0); 3],
            5,
            FlowKind::Gct,
        );
        assert!(ok.is_ok());
        let bad = FlowMatrix::new(
            vec![ts("2022-08-28 06:00"), ts("2022-08-28 06:10")],
            vec!["1".into()],
            vec![Some(1.0); 2],
            5,
            FlowKind::Gct,
        );
        assert!(bad.unwrap_err().to_string().contains("irregular"));
    }

    #[test]
    fn segment_box_is_twenty_metres() {
        let s = RoadSegment::new(1, 24.787, 120.986);
        assert_eq!(s.side_m(), 20.0);
        let (dlat, _) = s.half_extent_deg();
        assert!(s.contains(24.787 + 0.999 * dlat, 120.986));
        assert!(!s.contains(24.787 + 1.01 * dlat, 120.986));
    }

    #[test]
    fn mapping_rules() {
        let nodes: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
        let m = CameraMapping::new(vec![("Cam1".into(), "2".into())]).unwrap();
        m.validate(&nodes).unwrap();
        assert_eq!(m.gct_indices(&nodes).unwrap(), vec![1]);
        assert!(CameraMapping::new(vec![("Cam1".into(), "1".into()), ("Cam1".into(), "2".into())]).is_err());
        let bad = CameraMapping::new(vec![("Cam1".into(), "9".into())]).unwrap();
        assert!(bad.validate(&nodes).is_err());
        let dense = CameraMapping::new(
            (1..=3).map(|i| (format!("Cam{i}"), i.to_string())).collect(),
        )
        .unwrap();
        assert!(dense.validate(&nodes).is_err());
    }

    #[test]
    fn task_spec_requires_sparse_cameras() {
        let mut t = TaskSpec {
            n_gct_nodes: 49,
            n_vehicle_nodes: 9,
            input_steps: 12,
            output_steps: 12,
            interval_minutes: 5,
        };
        t.validate().unwrap();
        t.n_vehicle_nodes = 49;
        assert!(t.validate().is_err());
        t.n_vehicle_nodes = 0;
        assert!(t.validate().is_err());
    }
}
