use chrono::NaiveDate;

use super::{CameraMapping, FlowMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeAverage {
    pub node_id: String,
    pub mean: f64,
}

/// Table-style summary of a flow matrix. Gaps are excluded everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptiveStats {
    pub samples: usize,
    pub nodes: usize,
    /// Mean over all observed cells.
    pub mean: f64,
    /// Population standard deviation over all observed cells.
    pub std: f64,
    pub per_node: Vec<NodeAverage>,
    pub max_node: NodeAverage,
    pub min_node: NodeAverage,
}

pub fn descriptive_stats(flows: &FlowMatrix) -> Result<DescriptiveStats> {
    let n = flows.n_nodes();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut total = 0.0;
    let mut cells = 0usize;
    for r in 0..flows.n_rows() {
        for (j, v) in flows.row(r).iter().enumerate() {
            if let Some(v) = v {
                sums[j] += v;
                counts[j] += 1;
                total += v;
                cells += 1;
            }
        }
    }
    if cells == 0 {
        return Err(Error::InvalidData("descriptive stats of an empty matrix".into()));
    }
    let mean = total / cells as f64;
    let mut ss = 0.0;
    for r in 0..flows.n_rows() {
        for v in flows.row(r).iter().flatten() {
            ss += (v - mean) * (v - mean);
        }
    }
    let std = (ss / cells as f64).sqrt();
    let per_node: Vec<NodeAverage> = flows
        .node_ids()
        .iter()
        .enumerate()
        .filter(|(j, _)| counts[*j] > 0)
        .map(|(j, id)| NodeAverage {
            node_id: id.clone(),
            mean: sums[j] / counts[j] as f64,
        })
        .collect();
    // first occurrence wins ties
    let max_node = per_node
        .iter()
        .fold(None::<&NodeAverage>, |best, x| match best {
            Some(b) if b.mean >= x.mean => Some(b),
            _ => Some(x),
        })
        .cloned()
        .expect("at least one observed node");
    let min_node = per_node
        .iter()
        .fold(None::<&NodeAverage>, |best, x| match best {
            Some(b) if b.mean <= x.mean => Some(b),
            _ => Some(x),
        })
        .cloned()
        .expect("at least one observed node");
    Ok(DescriptiveStats {
        samples: flows.n_rows(),
        nodes: n,
        mean,
        std,
        per_node,
        max_node,
        min_node,
    })
}

/// Pearson correlation; `None` for fewer than two pairs or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Daily correlation per camera: `values[day][camera]`, `None` where undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTable {
    pub days: Vec<NaiveDate>,
    /// (camera id, segment id) in mapping order.
    pub pairs: Vec<(String, String)>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationTable {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().flatten().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("day");
        for (c, seg) in &self.pairs {
            s.push_str(&format!(",{c}@{seg}"));
        }
        s.push('\n');
        for (d, row) in self.days.iter().zip(&self.values) {
            s.push_str(&d.format("%Y-%m-%d").to_string());
            for v in row {
                s.push(',');
                match v {
                    Some(v) => s.push_str(&format!("{v:.6}")),
                    None => s.push_str("NA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Pearson r between each camera's vehicle flow and its segment's GCT flow,
/// per calendar day, over intervals where both are observed.
pub fn daily_pearson(gct: &FlowMatrix, veh: &FlowMatrix, mapping: &CameraMapping) -> Result<CorrelationTable> {
    if gct.times() != veh.times() {
        return Err(Error::InvalidData(
            "GCT and vehicle flows must share the same interval grid".into(),
        ));
    }
    mapping.validate(gct.node_ids())?;
    let mut cols = Vec::new();
    for (cam, seg) in mapping.entries() {
        let v = veh
            .node_index(cam)
            .ok_or_else(|| Error::InvalidData(format!("camera `{cam}` missing from vehicle flows")))?;
        let g = gct.node_index(seg).expect("validated");
        cols.push((g, v));
    }
    let mut days = Vec::new();
    let mut values = Vec::new();
    for (day, rows) in gct.day_ranges() {
        days.push(day);
        let row: Vec<Option<f64>> = cols
            .iter()
            .map(|&(g, v)| {
                let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                    .clone()
                    .filter_map(|r| Some((gct.get(r, g)?, veh.get(r, v)?)))
                    .unzip();
                pearson(&xs, &ys)
            })
            .collect();
        values.push(row);
    }
    Ok(CorrelationTable {
        days,
        pairs: mapping.entries().to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowdata::{FlowKind, TIME_FORMAT};
    use chrono::NaiveDateTime;

    fn matrix(kind: FlowKind, ids: &[&str], rows: &[&[f64]]) -> FlowMatrix {
        let start = NaiveDateTime::parse_from_str("2022-08-28 06:00", TIME_FORMAT).unwrap();
        let times = (0..rows.len()).map(|i| start + chrono::Duration::minutes(5 * i as i64)).collect();
        let values = rows.iter().flat_map(|r| r.iter().map(|v| Some(*v))).collect();
        FlowMatrix::new(times, ids.iter().map(|s| s.to_string()).collect(), values, 5, kind).unwrap()
    }

    #[test]
    fn constant_matrix() {
        let m = matrix(FlowKind::Gct, &["1", "2"], &[&[7.0, 7.0], &[7.0, 7.0]]);
        let s = descriptive_stats(&m).unwrap();
        assert_eq!((s.mean, s.std), (7.0, 0.0));
    }

    #[test]
    fn extremes_and_population_std() {
        let m = matrix(FlowKind::Gct, &["1", "2"], &[&[1.0, 10.0], &[3.0, 30.0]]);
        let s = descriptive_stats(&m).unwrap();
        assert_eq!(s.mean, 11.0);
        let var = ((1.0f64 - 11.0).powi(2) + (3.0f64 - 11.0).powi(2) + (10.0f64 - 11.0).powi(2) + (30.0f64 - 11.0).powi(2)) / 4.0;
        assert!((s.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.max_node.node_id, "2");
        assert_eq!(s.min_node, NodeAverage { node_id: "1".into(), mean: 2.0 });
    }

    #[test]
    fn pearson_closed_form() {
        // x=[1,2,3,4], y=[1,2,3,5]: mx=2.5, my=2.75
        // sxy = (-1.5)(-1.75)+(-0.5)(-0.75)+(0.5)(0.25)+(1.5)(2.25) = 6.5
        // sxx = 5, syy = 3.0625+0.5625+0.0625+5.0625 = 8.75
        let expected = 6.5 / (5.0f64.sqrt() * 8.75f64.sqrt());
        let r = pearson(&[1., 2., 3., 4.], &[1., 2., 3., 5.]).unwrap();
        assert!((r - expected).abs() < 1e-15);
        assert!((r - 0.982_707_629_9).abs() < 1e-9);
        assert_eq!(pearson(&[1., 2., 3.], &[1., 2., 3.]), Some(1.0));
        assert_eq!(pearson(&[1., 2., 3.], &[-1., -2., -3.]), Some(-1.0));
        assert_eq!(pearson(&[1., 1., 1.], &[1., 2., 3.]), None);
    }

    #[test]
    fn daily_pearson_per_camera() {
        let g = matrix(FlowKind::Gct, &["1", "2", "3"], &[&[1., 5., 0.], &[2., 5., 0.], &[3., 5., 0.]]);
        let v = matrix(FlowKind::Vehicle, &["Cam1", "Cam2"], &[&[2., 1.], &[4., 2.], &[6., 3.]]);
        let map = CameraMapping::new(vec![("Cam1".into(), "1".into()), ("Cam2".into(), "2".into())]).unwrap();
        let t = daily_pearson(&g, &v, &map).unwrap();
        assert_eq!(t.values, vec![vec![Some(1.0), None]]);
        assert!(t.to_csv().contains("NA"));
    }
}
