use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use tel2veh::config::KvConfig;
use tel2veh::flowdata::{
    aggregate_gct_flow_parallel, daily_pearson, descriptive_stats, load_camera_mapping, load_flow_matrix,
    load_segments, parse_gct_records_on, write_flow_matrix, DayWindow, FlowKind,
};
use tel2veh::fusion::DynamicLossModel;
use tel2veh::harness::{
    emit_report, leave_one_out, train_fusion, train_gct_extractor, train_vehicle_extractor, write_dataset,
    ArmRegistry, Dataset, ExperimentConfig, Prepared, ReportFormat, Retained, CAMERA_MAP_FILE, GCT_FILE,
    VEHICLE_FILE,
};
use tel2veh::numcore::{read_checkpoint, write_checkpoint};
use tel2veh::stgnn::StgnnModel;
use tel2veh::synthgen::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "tel2veh", version, about = "Vehicle-flow prediction at camera-free road segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate raw GCT records into per-segment flows.
    Ingest(IngestArgs),
    /// Descriptive statistics of a flow file.
    Stats(StatsArgs),
    /// Daily Pearson correlation between GCT and camera flows.
    Correlate(CorrelateArgs),
    /// Train a Stage-1 extractor.
    TrainStage1(Stage1Args),
    /// Train Stage 2 on two frozen extractors.
    TrainStage2(Stage2Args),
    /// Leave-one-camera-out evaluation of both arms.
    EvaluateLoo(LooArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 5)]
    interval_minutes: u32,
    #[arg(long, default_value = "06:00")]
    day_start: String,
    #[arg(long, default_value = "19:00")]
    day_end: String,
}

#[derive(Args)]
struct IngestArgs {
    /// raw_gct.csv (`time,imei_hash,lat,lon`)
    #[arg(long)]
    raw: PathBuf,
    /// segments.csv (`segment_id,lat,lon`)
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Date for records that carry a time of day only.
    #[arg(long, default_value = "2022-08-28")]
    date: NaiveDate,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    flows: PathBuf,
    #[arg(long, default_value = "gct")]
    kind: FlowKind,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Stage1Args {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    source: FlowKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera withheld from a vehicle extractor, or `none`.
    #[arg(long, default_value = "none")]
    exclude_camera: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Stage2Args {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    gct_ckpt: PathBuf,
    #[arg(long)]
    veh_ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "none")]
    exclude_camera: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LooArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repetitions; seeds 0..n.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    Ok(match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    })
}

fn experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::from_kv(&load_kv(path)?)?)
}

fn exclusion(arg: &str) -> Option<&str> {
    (arg != "none").then_some(arg)
}

fn load_dataset(dir: &Path, config: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(dir, config.sigma_m, config.threshold).with_context(|| format!("loading {}", dir.display()))
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let file = File::open(&a.raw).with_context(|| format!("opening {}", a.raw.display()))?;
    let parsed = parse_gct_records_on(BufReader::new(file), a.date)?;
    for e in parsed.errors.iter().take(20) {
        eprintln!("line {}: {}", e.line, e.message);
    }
    let segments = load_segments(&a.segments)?;
    let window = DayWindow::parse(&a.grid.day_start, &a.grid.day_end)?;
    let agg = aggregate_gct_flow_parallel(&parsed.records, &segments, a.grid.interval_minutes, window, 1 << 16)?;
    for (x, y) in &agg.overlaps {
        log::warn!("segments {x} and {y} overlap; shared cells go to {}", x.min(y));
    }
    write_flow_matrix(&a.out, &agg.flows)?;
    println!(
        "records {} malformed {} discarded {} intervals {} segments {}",
        parsed.records.len(),
        parsed.errors.len(),
        agg.discarded,
        agg.flows.n_rows(),
        agg.flows.n_nodes()
    );
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let flows = load_flow_matrix(&a.flows, a.kind)?;
    let s = descriptive_stats(&flows)?;
    println!("samples {}", s.samples);
    println!("nodes {}", s.nodes);
    println!("average {:.1}", s.mean);
    println!("std {:.1}", s.std);
    println!("max_avg {} ({:.1})", s.max_node.node_id, s.max_node.mean);
    println!("min_avg {} ({:.1})", s.min_node.node_id, s.min_node.mean);
    Ok(())
}

fn correlate(a: &CorrelateArgs) -> Result<()> {
    let gct = load_flow_matrix(&a.data_dir.join(GCT_FILE), FlowKind::Gct)?;
    let veh = load_flow_matrix(&a.data_dir.join(VEHICLE_FILE), FlowKind::Vehicle)?;
    let mapping = load_camera_mapping(&a.data_dir.join(CAMERA_MAP_FILE))?;
    let csv = daily_pearson(&gct, &veh, &mapping)?.to_csv();
    match &a.out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn train_stage1(a: &Stage1Args) -> Result<()> {
    let config = experiment(a.config.as_deref())?;
    let dataset = load_dataset(&a.data_dir, &config)?;
    let prepared = Prepared::new(&dataset, &config)?;
    let mut extra = KvConfig::new();
    extra.set("source", a.source);
    extra.set("seed", a.seed);
    let (model, norm) = match a.source {
        FlowKind::Gct => (
            train_gct_extractor(&dataset, &prepared, &config, a.seed)?,
            prepared.gct_norm.clone(),
        ),
        FlowKind::Vehicle => {
            let retained = Retained::new(&dataset, &prepared, exclusion(&a.exclude_camera))?;
            extra.set("exclude_camera", &a.exclude_camera);
            extra.set("cameras", retained.cameras.join(","));
            (
                train_vehicle_extractor(&dataset, &prepared, &retained, &config, a.seed)?,
                retained.veh_norm.clone(),
            )
        }
    };
    write_checkpoint(&a.out, &model.to_checkpoint(&config.fingerprint(), Some(&norm), &extra))?;
    println!("{} extractor {} -> {}", a.source, model.checksum(), a.out.display());
    Ok(())
}

fn load_extractor(path: &Path, source: FlowKind) -> Result<(StgnnModel, KvConfig)> {
    let (model, _, meta) = StgnnModel::from_checkpoint(&read_checkpoint(path)?)?;
    let found = meta.raw("source").unwrap_or("");
    if found != source.to_string() {
        bail!("{} holds a `{found}` extractor, expected `{source}`", path.display());
    }
    Ok((model, meta))
}

fn train_stage2(a: &Stage2Args) -> Result<()> {
    let config = experiment(a.config.as_deref())?;
    let dataset = load_dataset(&a.data_dir, &config)?;
    let prepared = Prepared::new(&dataset, &config)?;
    let retained = Retained::new(&dataset, &prepared, exclusion(&a.exclude_camera))?;
    let (gct_ext, _) = load_extractor(&a.gct_ckpt, FlowKind::Gct)?;
    let (veh_ext, meta) = load_extractor(&a.veh_ckpt, FlowKind::Vehicle)?;
    let trained_on = meta.raw("cameras").unwrap_or("");
    if trained_on != retained.cameras.join(",") {
        bail!(
            "vehicle extractor was trained on cameras `{trained_on}`, this run keeps `{}`",
            retained.cameras.join(",")
        );
    }
    let (model, log, _) = train_fusion(&dataset, &prepared, &retained, &config, (&gct_ext, &veh_ext), a.seed)?;
    let mut extra = KvConfig::new();
    extra.set("seed", a.seed);
    extra.set("exclude_camera", &a.exclude_camera);
    extra.set("cameras", retained.cameras.join(","));
    extra.set("gct_extractor", gct_ext.checksum());
    extra.set("veh_extractor", veh_ext.checksum());
    write_checkpoint(&a.out, &model.to_checkpoint(&config.fingerprint(), &extra))?;
    let last = log.steps.last().context("stage 2 logged no steps")?;
    println!(
        "stage 2: {} steps, best epoch {}, lambda {:e}, params {} -> {}",
        log.steps.len(),
        log.best_epoch,
        last.lambda,
        model.params().checksum(),
        a.out.display()
    );
    Ok(())
}

fn evaluate_loo(a: &LooArgs) -> Result<()> {
    let mut config = experiment(a.config.as_deref())?;
    if let Some(n) = a.seeds {
        config.seeds = (0..n).collect();
    }
    if let Some(h) = &a.horizons {
        config.horizons = h.clone();
    }
    if let Some(w) = a.workers {
        config.workers = w;
    }
    config.validate()?;
    let dataset = load_dataset(&a.data_dir, &config)?;
    let report = leave_one_out(&dataset, &config, &ArmRegistry::default())?;
    for format in [ReportFormat::TextTable, ReportFormat::Rows, ReportFormat::LinePlot] {
        let path = emit_report(&report, format, &a.out_dir)?;
        println!("wrote {}", path.display());
    }
    let failed = report.entries.iter().filter(|e| !e.is_completed()).count();
    if failed > 0 {
        eprintln!("{failed} fold runs failed; see report.txt");
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    cfg.apply_kv(&load_kv(a.config.as_deref())?)?;
    let data = generate(&cfg)?;
    write_dataset(&a.out_dir, &data.gct, &data.veh, &data.mapping, &data.segments)?;
    println!(
        "{} intervals, {} segments, {} cameras -> {}",
        data.gct.n_rows(),
        data.gct.n_nodes(),
        data.mapping.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Ingest(a) => ingest(&a),
        Command::Stats(a) => stats(&a),
        Command::Correlate(a) => correlate(&a),
        Command::TrainStage1(a) => train_stage1(&a),
        Command::TrainStage2(a) => train_stage2(&a),
        Command::EvaluateLoo(a) => evaluate_loo(&a),
        Command::Synth(a) => synth(&a),
    }
}
