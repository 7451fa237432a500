use std::ops::Range;

use super::{FlowMatrix, TaskSpec};
use crate::error::{Error, Result};

/// Whether statistics are kept per node or pooled over all nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormScope {
    PerNode,
    /// One mean/std shared by every node; preserves cross-node magnitude.
    Pooled,
}

/// Z-score normaliser fitted on training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub per_node_mean: Vec<f64>,
    pub per_node_std: Vec<f64>,
    pub epsilon: f64,
    /// Nodes whose variance was zero; their std is `epsilon`.
    pub degenerate: Vec<usize>,
}

impl Normalizer {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    /// Per-node population statistics over `train_rows`, ignoring gaps.
    pub fn fit(flows: &FlowMatrix, train_rows: Range<usize>) -> Result<Self> {
        Self::fit_scoped(flows, train_rows, NormScope::PerNode)
    }

    pub fn fit_scoped(flows: &FlowMatrix, train_rows: Range<usize>, scope: NormScope) -> Result<Self> {
        if train_rows.is_empty() || train_rows.end > flows.n_rows() {
            return Err(Error::InvalidData(format!(
                "normaliser needs a non-empty training range within {} rows, got {train_rows:?}",
                flows.n_rows()
            )));
        }
        let n = flows.n_nodes();
        let columns: Vec<Vec<f64>> = (0..n)
            .map(|j| train_rows.clone().filter_map(|r| flows.get(r, j)).collect())
            .collect();
        let groups: Vec<Vec<f64>> = match scope {
            NormScope::PerNode => columns,
            NormScope::Pooled => {
                let all: Vec<f64> = columns.into_iter().flatten().collect();
                vec![all; n]
            }
        };
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        let mut degenerate = Vec::new();
        for (j, vals) in groups.iter().enumerate() {
            if vals.is_empty() {
                return Err(Error::InvalidData(format!(
                    "node {} has no observed training values",
                    flows.node_ids()[j]
                )));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            let s = var.sqrt();
            mean.push(m);
            if s > 0.0 {
                std.push(s);
            } else {
                log::warn!("node {} has zero variance in the training split", flows.node_ids()[j]);
                degenerate.push(j);
                std.push(Self::DEFAULT_EPSILON);
            }
        }
        Ok(Normalizer {
            per_node_mean: mean,
            per_node_std: std,
            epsilon: Self::DEFAULT_EPSILON,
            degenerate,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.per_node_mean.len()
    }

    pub fn apply(&self, node: usize, value: f64) -> f64 {
        (value - self.per_node_mean[node]) / self.per_node_std[node]
    }

    pub fn invert(&self, node: usize, value: f64) -> f64 {
        value * self.per_node_std[node] + self.per_node_mean[node]
    }

    /// Statistics for a subset of nodes, in the given order.
    pub fn select(&self, nodes: &[usize]) -> Normalizer {
        Normalizer {
            per_node_mean: nodes.iter().map(|&j| self.per_node_mean[j]).collect(),
            per_node_std: nodes.iter().map(|&j| self.per_node_std[j]).collect(),
            epsilon: self.epsilon,
            degenerate: self
                .degenerate
                .iter()
                .filter_map(|d| nodes.iter().position(|j| j == d))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous train/val/test ranges in time order. Validation and test get
/// `floor(rows * ratio)` rows; the remainder goes to training.
pub fn chronological_split(rows: usize, ratios: (f64, f64, f64)) -> Result<SplitRanges> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    // the small offset absorbs binary rounding such as 0.1 * 30 = 3.0000000000000004
    let val = (rows as f64 * va + 1e-9).floor() as usize;
    let test = (rows as f64 * te + 1e-9).floor() as usize;
    let train = rows.saturating_sub(val + test);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Config(format!(
            "split of {rows} rows by {ratios:?} leaves an empty range ({train}/{val}/{test})"
        )));
    }
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..rows,
    })
}

/// A sliding window: inputs are rows `start..start + t_in`, targets the next `t_out` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl Window {
    pub fn input_rows(&self) -> Range<usize> {
        self.start..self.start + self.t_in
    }

    pub fn target_rows(&self) -> Range<usize> {
        self.start + self.t_in..self.start + self.t_in + self.t_out
    }

    pub fn rows(&self) -> Range<usize> {
        self.start..self.start + self.t_in + self.t_out
    }

    /// Input block `[nodes x t_in]` (gaps as NaN).
    pub fn input_block(&self, flows: &FlowMatrix) -> Vec<Vec<f64>> {
        block(flows, self.input_rows())
    }

    /// Target block `[nodes x t_out]` (gaps as NaN).
    pub fn target_block(&self, flows: &FlowMatrix) -> Vec<Vec<f64>> {
        block(flows, self.target_rows())
    }
}

fn block(flows: &FlowMatrix, rows: Range<usize>) -> Vec<Vec<f64>> {
    (0..flows.n_nodes())
        .map(|j| rows.clone().map(|r| flows.get(r, j).unwrap_or(f64::NAN)).collect())
        .collect()
}

/// Stride-1 windows inside `rows`. With `day_masking`, windows whose rows
/// span more than one calendar date are dropped.
pub fn make_windows(flows: &FlowMatrix, task: &TaskSpec, rows: Range<usize>, day_masking: bool) -> Vec<Window> {
    let span = task.input_steps + task.output_steps;
    let rows = rows.start..rows.end.min(flows.n_rows());
    if rows.len() < span {
        log::warn!(
            "range {rows:?} is shorter than T_in + T_out = {span}; no windows"
        );
        return Vec::new();
    }
    let times = flows.times();
    (rows.start..=rows.end - span)
        .filter(|&s| !day_masking || times[s].date() == times[s + span - 1].date())
        .map(|start| Window {
            start,
            t_in: task.input_steps,
            t_out: task.output_steps,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowdata::{FlowKind, TIME_FORMAT};
    use chrono::{Duration, NaiveDateTime};
    use proptest::prelude::*;

    fn days(n_days: usize, per_day: usize, nodes: usize) -> FlowMatrix {
        let mut times = Vec::new();
        let base = NaiveDateTime::parse_from_str("2022-08-28 06:00", TIME_FORMAT).unwrap();
        for d in 0..n_days {
            for k in 0..per_day {
                times.push(base + Duration::days(d as i64) + Duration::minutes(5 * k as i64));
            }
        }
        let values = (0..times.len() * nodes).map(|i| Some((i % 17) as f64)).collect();
        FlowMatrix::new(times, (0..nodes).map(|j| j.to_string()).collect(), values, 5, FlowKind::Gct).unwrap()
    }

    fn task(t_in: usize, t_out: usize) -> TaskSpec {
        TaskSpec {
            n_gct_nodes: 2,
            n_vehicle_nodes: 1,
            input_steps: t_in,
            output_steps: t_out,
            interval_minutes: 5,
        }
    }

    #[test]
    fn split_of_full_dataset() {
        let s = chronological_split(4240, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2968, 424, 848));
        assert_eq!(s.test.end, 4240);
        let s = chronological_split(10, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert!(chronological_split(3, (0.7, 0.1, 0.2)).is_err());
        assert!(chronological_split(10, (0.7, 0.1, 0.1)).is_err());
    }

    #[test]
    fn one_day_gives_133_windows() {
        let m = days(1, 156, 2);
        let w = make_windows(&m, &task(12, 12), 0..156, true);
        assert_eq!(w.len(), 133);
        let two = days(2, 156, 2);
        assert_eq!(make_windows(&two, &task(12, 12), 0..312, true).len(), 266);
        assert_eq!(make_windows(&two, &task(12, 12), 0..312, false).len(), 312 - 24 + 1);
    }

    #[test]
    fn small_ranges() {
        let m = days(1, 156, 2);
        assert_eq!(make_windows(&m, &task(1, 1), 0..2, true).len(), 1);
        assert!(make_windows(&m, &task(12, 12), 0..23, true).is_empty());
        let w = make_windows(&m, &task(2, 1), 5..8, true)[0];
        assert_eq!(w.input_block(&m)[0].len(), 2);
        assert_eq!(w.target_block(&m)[1].len(), 1);
    }

    #[test]
    fn normalizer_centers_and_flags() {
        let base = NaiveDateTime::parse_from_str("2022-08-28 06:00", TIME_FORMAT).unwrap();
        let times = (0..3).map(|i| base + Duration::minutes(5 * i)).collect();
        let values = vec![Some(10.0), Some(4.0), Some(20.0), Some(4.0), Some(30.0), Some(4.0)];
        let m = FlowMatrix::new(times, vec!["a".into(), "b".into()], values, 5, FlowKind::Gct).unwrap();
        let n = Normalizer::fit(&m, 0..3).unwrap();
        assert_eq!(n.per_node_mean[0], 20.0);
        assert!((n.per_node_std[0] - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(n.apply(0, 20.0), 0.0);
        assert_eq!(n.degenerate, vec![1]);
        assert_eq!(n.apply(1, 4.0), 0.0);
        let pooled = Normalizer::fit_scoped(&m, 0..3, NormScope::Pooled).unwrap();
        assert_eq!(pooled.per_node_mean[0], pooled.per_node_mean[1]);
        assert!(Normalizer::fit(&m, 0..0).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 1usize..60, t_in in 1usize..8, t_out in 1usize..8, off in 0usize..20) {
            let m = days(1, 100, 1);
            let rows = off..(off + len).min(100);
            let got = make_windows(&m, &task(t_in, t_out), rows.clone(), true).len();
            let brute = rows.clone().filter(|s| s + t_in + t_out <= rows.end).count();
            prop_assert_eq!(got, brute);
            let formula = (rows.len() + 1).saturating_sub(t_in + t_out);
            prop_assert_eq!(got, formula);
        }

        #[test]
        fn split_partitions_rows(rows in 20usize..5000, a in 1u32..8, b in 1u32..8) {
            let (va, te) = (a as f64 / 40.0, b as f64 / 40.0);
            if let Ok(s) = chronological_split(rows, (1.0 - va - te, va, te)) {
                prop_assert_eq!(s.train.start, 0);
                prop_assert_eq!(s.train.end, s.val.start);
                prop_assert_eq!(s.val.end, s.test.start);
                prop_assert_eq!(s.test.end, rows);
            }
        }

        #[test]
        fn normalizer_round_trip(vals in proptest::collection::vec(0.0f64..1e4, 3..30), probe in -1e5f64..1e5) {
            let base = NaiveDateTime::parse_from_str("2022-08-28 06:00", TIME_FORMAT).unwrap();
            let times = (0..vals.len()).map(|i| base + Duration::minutes(5 * i as i64)).collect();
            let m = FlowMatrix::new(times, vec!["a".into()], vals.iter().map(|v| Some(*v)).collect(), 5, FlowKind::Gct).unwrap();
            let n = Normalizer::fit(&m, 0..vals.len()).unwrap();
            let back = n.invert(0, n.apply(0, probe));
            prop_assert!((back - probe).abs() <= 1e-9 * probe.abs().max(1.0));
        }
    }
}
