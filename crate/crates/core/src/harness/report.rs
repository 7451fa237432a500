use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};

use super::metrics::{improvement_ratio, Metric, MetricsTriple};
use crate::error::{Error, Result};
use crate::flowdata::TIME_FORMAT;
use crate::fusion::LossBreakdown;

#[derive(Clone, Debug, PartialEq)]
pub enum FoldStatus {
    Completed,
    Failed(String),
}

/// Outcome of one arm on one (camera, seed) fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldEntry {
    pub seed: u64,
    pub camera: String,
    pub arm: String,
    pub fold_seed: u64,
    pub status: FoldStatus,
    /// Metrics at the withheld camera, one per horizon.
    pub horizons: Vec<(usize, MetricsTriple)>,
    /// MAE at the retained cameras on the test split.
    pub camera_test_mae: f64,
    pub test_windows: usize,
    pub trainings: usize,
    pub loss_trace: Vec<LossBreakdown>,
}

impl FoldEntry {
    pub fn is_completed(&self) -> bool {
        self.status == FoldStatus::Completed
    }

    pub fn at(&self, horizon: usize) -> Option<MetricsTriple> {
        self.horizons.iter().find(|(h, _)| *h == horizon).map(|(_, m)| *m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub time: NaiveDateTime,
    pub truth: Option<f64>,
    pub pred_with: Option<f64>,
    pub pred_without: Option<f64>,
}

/// Truth and both arms' predictions at one withheld camera over one day.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub camera: String,
    pub node: String,
    pub day: NaiveDate,
    pub seed: u64,
    pub horizon: usize,
    pub rows: Vec<PlotRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub interval_minutes: u32,
    pub horizons: Vec<usize>,
    pub arm_with: String,
    pub arm_without: String,
    pub model_label: String,
    pub cameras: Vec<String>,
    pub seeds: Vec<u64>,
    /// Camera-major, then seed, then arm (with before without).
    pub entries: Vec<FoldEntry>,
    /// Lineage assertions that passed.
    pub hygiene_checks: usize,
    /// Shared GCT extractors trained (one per seed at most).
    pub gct_extractors: usize,
    pub plot: Option<PlotSeries>,
}

impl ExperimentReport {
    pub fn entries_for<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a FoldEntry> + 'a {
        self.entries.iter().filter(move |e| e.arm == arm)
    }

    pub fn completed(&self, arm: &str) -> usize {
        self.entries_for(arm).filter(|e| e.is_completed()).count()
    }

    pub fn failed(&self, arm: &str) -> usize {
        self.entries_for(arm).filter(|e| !e.is_completed()).count()
    }

    /// Arithmetic mean over completed (camera, seed) cells, in entry order.
    pub fn mean(&self, arm: &str, horizon: usize) -> Option<MetricsTriple> {
        mean_of(self.entries_for(arm).filter_map(|e| if e.is_completed() { e.at(horizon) } else { None }))
    }

    /// Mean over the completed cameras of one seed.
    pub fn seed_mean(&self, arm: &str, seed: u64, horizon: usize) -> Option<MetricsTriple> {
        mean_of(
            self.entries_for(arm)
                .filter(|e| e.seed == seed && e.is_completed())
                .filter_map(|e| e.at(horizon)),
        )
    }

    /// Mean over the completed seeds of one withheld camera.
    pub fn camera_mean(&self, arm: &str, camera: &str, horizon: usize) -> Option<MetricsTriple> {
        mean_of(
            self.entries_for(arm)
                .filter(|e| e.camera == camera && e.is_completed())
                .filter_map(|e| e.at(horizon)),
        )
    }

    /// Improvement of the framework arm over the baseline, in percent.
    pub fn improvement(&self, horizon: usize, metric: Metric) -> Option<f64> {
        let w = self.mean(&self.arm_with, horizon)?.get(metric);
        let wo = self.mean(&self.arm_without, horizon)?.get(metric);
        improvement_ratio(w, wo)
    }

    /// Mean of per-model improvement ratios; one model family here.
    pub fn average_improvement(&self, horizon: usize, metric: Metric) -> Option<f64> {
        let per_model = [self.improvement(horizon, metric)?];
        Some(per_model.iter().sum::<f64>() / per_model.len() as f64)
    }
}

fn mean_of(items: impl Iterator<Item = MetricsTriple>) -> Option<MetricsTriple> {
    let mut sum = MetricsTriple::default();
    let mut n = 0usize;
    for m in items {
        sum.mae += m.mae;
        sum.rmse += m.rmse;
        sum.mape += m.mape;
        n += 1;
    }
    (n > 0).then(|| MetricsTriple {
        mae: sum.mae / n as f64,
        rmse: sum.rmse / n as f64,
        mape: sum.mape / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    TextTable,
    Rows,
    LinePlot,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-table" | "table" => Ok(ReportFormat::TextTable),
            "rows" | "csv" => Ok(ReportFormat::Rows),
            "line-plot" | "plot" => Ok(ReportFormat::LinePlot),
            _ => Err(Error::Unknown {
                kind: "report format",
                name: s.to_string(),
            }),
        }
    }
}

fn cell(v: Option<f64>, pct: bool) -> String {
    match (v, pct) {
        (Some(v), false) => format!("{v:.2}"),
        (Some(v), true) => format!("{v:.2}%"),
        (None, _) => "n/a".into(),
    }
}

pub fn render_table(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Camera-free vehicle flow prediction, leave-one-camera-out");
    let _ = writeln!(s, "config {}", r.fingerprint);
    let _ = writeln!(
        s,
        "cameras {}; seeds {}",
        r.cameras.join(","),
        r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    for arm in [&r.arm_with, &r.arm_without] {
        let total = r.entries_for(arm).count();
        let _ = writeln!(s, "folds {arm}: {} completed of {total}", r.completed(arm));
    }
    let _ = writeln!(s, "IR = (w/o - w) / w/o x 100; positive values mean the framework lowers the error");
    let _ = writeln!(s);

    let mut header = format!("{:<22}", "Model");
    let mut sub = format!("{:<22}", "");
    for &h in &r.horizons {
        let _ = write!(header, "| {:<30}", format!("{} mins.", h as u32 * r.interval_minutes));
        let _ = write!(sub, "| {:>9} {:>9} {:>10}", "MAE", "RMSE", "MAPE");
    }
    let _ = writeln!(s, "{header}");
    let _ = writeln!(s, "{sub}");
    let line = |label: String, f: &dyn Fn(usize, Metric) -> (Option<f64>, bool)| {
        let mut l = format!("{label:<22}");
        for &h in &r.horizons {
            let v: Vec<String> = Metric::ALL
                .iter()
                .map(|&m| {
                    let (x, pct) = f(h, m);
                    cell(x, pct)
                })
                .collect();
            let _ = write!(l, "| {:>9} {:>9} {:>10}", v[0], v[1], v[2]);
        }
        l
    };
    let metric_of = |arm: &str| {
        let arm = arm.to_string();
        move |h: usize, m: Metric| (r.mean(&arm, h).map(|t| t.get(m)), m == Metric::Mape)
    };
    let _ = writeln!(s, "{}", line(format!("{} (w/o)", r.model_label), &metric_of(&r.arm_without)));
    let _ = writeln!(s, "{}", line(format!("{} (w)", r.model_label), &metric_of(&r.arm_with)));
    let _ = writeln!(s, "{}", line("IR".into(), &|h, m| (r.improvement(h, m), true)));
    let _ = writeln!(s, "{}", line("Average IR".into(), &|h, m| (r.average_improvement(h, m), true)));

    let _ = writeln!(s);
    let _ = writeln!(s, "Per withheld camera, MAE");
    for cam in &r.cameras {
        for arm in [&r.arm_without, &r.arm_with] {
            let mut l = format!("{:<10}{:<12}", cam, arm);
            for &h in &r.horizons {
                let _ = write!(l, "| {:>9}", cell(r.camera_mean(arm, cam, h).map(|m| m.mae), false));
            }
            let _ = writeln!(s, "{l}");
        }
    }
    let failed: Vec<&FoldEntry> = r.entries.iter().filter(|e| !e.is_completed()).collect();
    if !failed.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Failed folds");
        for e in failed {
            if let FoldStatus::Failed(msg) = &e.status {
                let _ = writeln!(s, "seed {} camera {} arm {}: {msg}", e.seed, e.camera, e.arm);
            }
        }
    }
    s
}

pub fn render_rows(r: &ExperimentReport) -> String {
    let mut s = String::from("seed,camera,arm,horizon,metric,value\n");
    for e in &r.entries {
        for &h in &r.horizons {
            for m in Metric::ALL {
                let v = match (e.is_completed(), e.at(h)) {
                    (true, Some(t)) => t.get(m).to_string(),
                    _ => "NA".into(),
                };
                let _ = writeln!(s, "{},{},{},{},{},{}", e.seed, e.camera, e.arm, h, m.label(), v);
            }
        }
    }
    s
}

pub fn render_plot(p: &PlotSeries) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("time,truth,pred_with,pred_without\n");
    for row in &p.rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            row.time.format(TIME_FORMAT),
            opt(row.truth),
            opt(row.pred_with),
            opt(row.pred_without)
        );
    }
    s
}

pub fn plot_file_name(p: &PlotSeries) -> String {
    format!("plot_{}_{}.csv", p.node, p.day.format("%Y-%m-%d"))
}

/// Writes one format into `dir` and returns the file written.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (name, text) = match format {
        ReportFormat::TextTable => ("report.txt".to_string(), render_table(report)),
        ReportFormat::Rows => ("report_rows.csv".to_string(), render_rows(report)),
        ReportFormat::LinePlot => {
            let plot = report
                .plot
                .as_ref()
                .ok_or_else(|| Error::InvalidData("report holds no plot series".into()))?;
            (plot_file_name(plot), render_plot(plot))
        }
    };
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(seed: u64, camera: &str, arm: &str, mae: f64) -> FoldEntry {
        FoldEntry {
            seed,
            camera: camera.into(),
            arm: arm.into(),
            fold_seed: seed,
            status: FoldStatus::Completed,
            horizons: vec![(3, MetricsTriple { mae, rmse: mae * 1.5, mape: 10.0 })],
            camera_test_mae: 1.0,
            test_windows: 10,
            trainings: 1,
            loss_trace: Vec::new(),
        }
    }

    fn toy() -> ExperimentReport {
        let mut entries = Vec::new();
        for (i, cam) in ["Cam1", "Cam2"].iter().enumerate() {
            entries.push(entry(0, cam, "tel2veh", 80.0 + i as f64));
            entries.push(entry(0, cam, "gct-only", 100.0 + i as f64));
        }
        entries[3].status = FoldStatus::Failed("diverged".into());
        ExperimentReport {
            fingerprint: "abc".into(),
            interval_minutes: 5,
            horizons: vec![3],
            arm_with: "tel2veh".into(),
            arm_without: "gct-only".into(),
            model_label: "STGNN".into(),
            cameras: vec!["Cam1".into(), "Cam2".into()],
            seeds: vec![0],
            entries,
            hygiene_checks: 4,
            gct_extractors: 1,
            plot: None,
        }
    }

    #[test]
    fn means_skip_failed_folds() {
        let r = toy();
        assert_eq!(r.completed("gct-only"), 1);
        assert_eq!(r.failed("gct-only"), 1);
        assert_eq!(r.mean("tel2veh", 3).unwrap().mae, 80.5);
        assert_eq!(r.mean("gct-only", 3).unwrap().mae, 100.0);
        assert_eq!(r.improvement(3, Metric::Mae), improvement_ratio(80.5, 100.0));
        assert_eq!(r.average_improvement(3, Metric::Mae), r.improvement(3, Metric::Mae));
        assert_eq!(r.mean("tel2veh", 6), None);
    }

    #[test]
    fn table_layout_and_determinism() {
        let r = toy();
        let t = render_table(&r);
        assert_eq!(t, render_table(&r.clone()));
        assert!(t.contains("15 mins."));
        assert!(t.contains("Average IR"));
        assert!(t.contains("gct-only: 1 completed of 2"));
        assert!(t.contains("seed 0 camera Cam2 arm gct-only: diverged"));
    }

    #[test]
    fn rows_round_trip_to_means() {
        let r = toy();
        let rows = render_rows(&r);
        assert_eq!(rows.lines().count(), 1 + 4 * 3);
        let maes: Vec<f64> = rows
            .lines()
            .filter(|l| l.contains(",tel2veh,3,MAE,"))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        assert_eq!(mean.to_bits(), r.mean("tel2veh", 3).unwrap().mae.to_bits());
        assert!(rows.contains("0,Cam2,gct-only,3,MAE,NA"));
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!(matches!("pie-chart".parse::<ReportFormat>(), Err(Error::Unknown { .. })));
        assert_eq!("text-table".parse::<ReportFormat>().unwrap(), ReportFormat::TextTable);
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&toy(), ReportFormat::LinePlot, dir.path()).is_err());
        let p = emit_report(&toy(), ReportFormat::Rows, dir.path()).unwrap();
        assert_eq!(p.file_name().unwrap(), "report_rows.csv");
    }
}
