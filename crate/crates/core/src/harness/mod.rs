//! Metrics, the leave-one-camera-out protocol and report output.
//!
//! Each fold withholds one camera from every training run, trains the two
//! configured arms (looked up by name in an [`ArmRegistry`]) and scores
//! their predictions at the withheld camera's node on the test split.

mod arms;
mod dataset;
mod experiment;
mod loo;
mod metrics;
mod pipeline;
mod report;

pub use arms::{Arm, ArmContext, ArmRegistry, ArmRun, ExtractorCache, Fold, FusionArm, GctOnlyArm, Prepared};
pub use dataset::{write_dataset, Dataset, ADJACENCY_FILE, CAMERA_MAP_FILE, GCT_FILE, SEGMENTS_FILE, VEHICLE_FILE};
pub use experiment::ExperimentConfig;
pub use loo::{leave_one_out, plan, FoldJob};
pub use metrics::{improvement_ratio, metrics, Metric, MetricsTriple, MAPE_EPSILON};
pub use pipeline::{train_fusion, train_gct_extractor, train_vehicle_extractor, Retained};
pub use report::{
    emit_report, plot_file_name, render_plot, render_rows, render_table, ExperimentReport, FoldEntry, FoldStatus,
    PlotRow, PlotSeries, ReportFormat,
};
