use chrono::NaiveDate;
use rayon::prelude::*;

use super::arms::{Arm, ArmContext, ArmRegistry, ArmRun, ExtractorCache, Fold, Prepared};
use super::dataset::Dataset;
use super::experiment::ExperimentConfig;
use super::metrics::{metrics, MetricsTriple};
use super::report::{ExperimentReport, FoldEntry, FoldStatus, PlotRow, PlotSeries};
use crate::error::{Error, Result};

/// One scheduled training of one arm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldJob {
    pub fold_index: usize,
    pub camera: String,
    pub seed: u64,
    pub fold_seed: u64,
    pub arm: String,
}

/// Scheduled jobs in (camera, seed, arm) order.
pub fn plan(cameras: &[String], config: &ExperimentConfig) -> Result<Vec<FoldJob>> {
    if cameras.len() < 2 {
        return Err(Error::InvalidData("leave-one-out needs at least two cameras".into()));
    }
    let mut jobs = Vec::with_capacity(cameras.len() * config.seeds.len() * 2);
    for (i, cam) in cameras.iter().enumerate() {
        for &seed in &config.seeds {
            for arm in [&config.arm_with, &config.arm_without] {
                jobs.push(FoldJob {
                    fold_index: i,
                    camera: cam.clone(),
                    seed,
                    fold_seed: seed ^ i as u64,
                    arm: arm.clone(),
                });
            }
        }
    }
    Ok(jobs)
}

/// Test cells of the withheld camera at `horizon` steps ahead:
/// (row, prediction, truth) for windows whose target is present.
fn horizon_cells(fold: &Fold<'_>, run: &ArmRun, truth: &[Option<f64>], horizon: usize) -> Vec<(usize, f64, f64)> {
    let shape = run.predictions.shape();
    let (n, t) = (shape[1], shape[2]);
    run.windows
        .iter()
        .enumerate()
        .filter_map(|(s, w)| {
            let row = w.target_rows().start + horizon - 1;
            truth[row].map(|y| (row, run.predictions.data()[(s * n + fold.excluded_node) * t + horizon - 1], y))
        })
        .collect()
}

fn evaluate(fold: &Fold<'_>, run: &ArmRun, horizons: &[usize]) -> Result<Vec<(usize, MetricsTriple)>> {
    let truth = fold.excluded_truth();
    horizons
        .iter()
        .map(|&h| {
            let cells = horizon_cells(fold, run, &truth, h);
            let (p, y): (Vec<f64>, Vec<f64>) = cells.iter().map(|&(_, p, y)| (p, y)).unzip();
            Ok((h, metrics(&p, &y)?))
        })
        .collect()
}

struct CellResult {
    entries: Vec<FoldEntry>,
    hygiene_checks: usize,
    /// Per-arm runs kept for the plot fold.
    runs: Option<Vec<Option<ArmRun>>>,
}

fn run_cell(
    fold: &Fold<'_>,
    seed: u64,
    arms: &[Box<dyn Arm>],
    config: &ExperimentConfig,
    cache: &ExtractorCache<'_>,
    keep_runs: bool,
) -> CellResult {
    let fold_seed = seed ^ fold.index as u64;
    let ctx = ArmContext {
        config,
        fold,
        seed,
        fold_seed,
        extractors: cache,
    };
    let mut out = CellResult {
        entries: Vec::new(),
        hygiene_checks: 0,
        runs: keep_runs.then(Vec::new),
    };
    for arm in arms {
        let result = arm.run(&ctx).and_then(|run| {
            fold.check_lineage(&run.lineage)?;
            let horizons = evaluate(fold, &run, &config.horizons)?;
            Ok((run, horizons))
        });
        let mut entry = FoldEntry {
            seed,
            camera: fold.excluded.clone(),
            arm: arm.name().to_string(),
            fold_seed,
            status: FoldStatus::Completed,
            horizons: Vec::new(),
            camera_test_mae: f64::NAN,
            test_windows: 0,
            trainings: 0,
            loss_trace: Vec::new(),
        };
        match result {
            Ok((run, horizons)) => {
                out.hygiene_checks += 1;
                entry.horizons = horizons;
                entry.camera_test_mae = run.camera_test_mae;
                entry.test_windows = run.windows.len();
                entry.trainings = run.trainings;
                entry.loss_trace = run.loss_trace.clone();
                if let Some(runs) = out.runs.as_mut() {
                    runs.push(Some(run));
                }
            }
            Err(e) => {
                log::warn!("fold {} seed {seed} arm {} failed: {e}", fold.excluded, arm.name());
                entry.status = FoldStatus::Failed(e.to_string());
                if let Some(runs) = out.runs.as_mut() {
                    runs.push(None);
                }
            }
        }
        out.entries.push(entry);
    }
    out
}

fn plot_series(
    fold: &Fold<'_>,
    seed: u64,
    day: NaiveDate,
    horizon: usize,
    runs: &[Option<ArmRun>],
) -> Result<PlotSeries> {
    let ds = fold.dataset;
    let (_, rows) = ds
        .gct
        .day_ranges()
        .into_iter()
        .find(|(d, _)| *d == day)
        .ok_or_else(|| Error::InvalidData(format!("plot day {day} is not in the data")))?;
    let truth = fold.excluded_truth();
    let pred_at = |run: &Option<ArmRun>, row: usize| {
        let run = run.as_ref()?;
        horizon_cells(fold, run, &truth, horizon)
            .into_iter()
            .find(|&(r, _, _)| r == row)
            .map(|(_, p, _)| p)
    };
    Ok(PlotSeries {
        camera: fold.excluded.clone(),
        node: ds.gct.node_ids()[fold.excluded_node].clone(),
        day,
        seed,
        horizon,
        rows: rows
            .map(|r| PlotRow {
                time: ds.gct.times()[r],
                truth: truth[r],
                pred_with: pred_at(&runs[0], r),
                pred_without: pred_at(&runs[1], r),
            })
            .collect(),
    })
}

/// Runs every (camera, seed) fold for both configured arms and assembles the
/// report. Folds run on a bounded pool; assembly follows (camera, seed) order.
pub fn leave_one_out(dataset: &Dataset, config: &ExperimentConfig, registry: &ArmRegistry) -> Result<ExperimentReport> {
    config.validate()?;
    let cameras = dataset.cameras();
    plan(&cameras, config)?;
    let arms = [registry.create(&config.arm_with)?, registry.create(&config.arm_without)?];
    let prepared = Prepared::new(dataset, config)?;
    let folds: Vec<Fold<'_>> = (0..cameras.len())
        .map(|i| Fold::new(dataset, &prepared, i))
        .collect::<Result<_>>()?;
    let plot_camera = match &config.plot_camera {
        Some(c) => cameras
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| Error::Unknown {
                kind: "camera",
                name: c.clone(),
            })?,
        None => 0,
    };
    let plot_seed = config.seeds[0];
    let plot_day = config
        .plot_day
        .unwrap_or_else(|| *dataset.gct.dates().last().expect("non-empty data"));

    let cache = ExtractorCache::new(dataset, &prepared, config);
    let cells: Vec<(usize, u64)> = (0..folds.len())
        .flat_map(|i| config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let work = || -> Vec<CellResult> {
        cells
            .par_iter()
            .map(|&(i, s)| run_cell(&folds[i], s, &arms, config, &cache, i == plot_camera && s == plot_seed))
            .collect()
    };
    let results = if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work)
    } else {
        work()
    };

    let mut report = ExperimentReport {
        fingerprint: config.fingerprint(),
        interval_minutes: dataset.gct.interval_minutes(),
        horizons: config.horizons.clone(),
        arm_with: config.arm_with.clone(),
        arm_without: config.arm_without.clone(),
        model_label: "STGNN".into(),
        cameras,
        seeds: config.seeds.clone(),
        entries: Vec::new(),
        hygiene_checks: 0,
        gct_extractors: cache.trained(),
        plot: None,
    };
    for (&(i, s), cell) in cells.iter().zip(results) {
        report.hygiene_checks += cell.hygiene_checks;
        report.entries.extend(cell.entries);
        if let Some(runs) = cell.runs {
            report.plot = Some(plot_series(&folds[i], s, plot_day, config.horizons[0], &runs)?);
        }
    }
    Ok(report)
}
