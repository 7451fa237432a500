use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use super::dataset::Dataset;
use super::experiment::ExperimentConfig;
use super::pipeline::{train_fusion, train_gct_extractor, train_vehicle_extractor, Retained};
use crate::error::{Error, Result};
use crate::flowdata::{
    chronological_split, make_windows, NormScope, Normalizer, SplitRanges, TaskSpec, Window,
};
use crate::fusion::{
    camera_mae, predict_samples, train_dynamic, GctOnlyModel, LossBreakdown, SampleSet,
};
use crate::numcore::{SeededRng, Tensor};
use crate::stgnn::StgnnModel;

/// Split, windows and GCT normaliser shared by every fold and seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: SplitRanges,
    pub train_windows: Vec<Window>,
    pub val_windows: Vec<Window>,
    pub test_windows: Vec<Window>,
    pub gct_norm: Normalizer,
}

impl Prepared {
    pub fn new(dataset: &Dataset, config: &ExperimentConfig) -> Result<Self> {
        let task = TaskSpec {
            n_gct_nodes: dataset.gct.n_nodes(),
            n_vehicle_nodes: dataset.mapping.len(),
            input_steps: config.input_steps,
            output_steps: config.output_steps,
            interval_minutes: dataset.gct.interval_minutes(),
        };
        task.validate()?;
        if dataset.mapping.len() < 2 {
            return Err(Error::InvalidData(
                "leave-one-out needs at least two cameras (one withheld, one kept)".into(),
            ));
        }
        let split = chronological_split(dataset.gct.n_rows(), config.split)?;
        let windows = |rows| make_windows(&dataset.gct, &task, rows, config.day_masking);
        let prepared = Prepared {
            train_windows: windows(split.train.clone()),
            val_windows: windows(split.val.clone()),
            test_windows: windows(split.test.clone()),
            gct_norm: Normalizer::fit_scoped(&dataset.gct, split.train.clone(), NormScope::Pooled)?,
            split,
        };
        for (name, w) in [
            ("train", &prepared.train_windows),
            ("validation", &prepared.val_windows),
            ("test", &prepared.test_windows),
        ] {
            if w.is_empty() {
                return Err(Error::InvalidData(format!("the {name} split yields no windows")));
            }
        }
        Ok(prepared)
    }
}

/// One leave-one-camera-out fold: everything a training run may see.
#[derive(Clone, Debug)]
pub struct Fold<'a> {
    pub dataset: &'a Dataset,
    pub prepared: &'a Prepared,
    pub index: usize,
    pub excluded: String,
    pub excluded_node: usize,
    /// Every camera except the withheld one.
    pub retained: Retained,
}

impl<'a> Fold<'a> {
    pub fn new(dataset: &'a Dataset, prepared: &'a Prepared, index: usize) -> Result<Self> {
        let cameras = dataset.cameras();
        let excluded = cameras
            .get(index)
            .ok_or_else(|| Error::InvalidData(format!("fold {index} out of range for {} cameras", cameras.len())))?
            .clone();
        let retained = Retained::new(dataset, prepared, Some(&excluded))?;
        let fold = Fold {
            dataset,
            prepared,
            index,
            excluded_node: dataset.camera_nodes()?[index],
            excluded,
            retained,
        };
        fold.check_lineage(&fold.retained.veh.node_ids().iter().cloned().collect())?;
        Ok(fold)
    }

    /// Fails if the withheld camera appears among `lineage` tags.
    pub fn check_lineage(&self, lineage: &BTreeSet<String>) -> Result<()> {
        if lineage.contains(&self.excluded) {
            return Err(Error::InvalidData(format!(
                "fold hygiene: withheld camera `{}` reached training data",
                self.excluded
            )));
        }
        Ok(())
    }

    pub fn samples(&self, windows: &[Window], extractors: Option<(&StgnnModel, &StgnnModel)>) -> Result<SampleSet> {
        self.retained.samples(self.dataset, self.prepared, windows, extractors)
    }

    /// Held-out vehicle flow of the withheld camera.
    pub fn excluded_truth(&self) -> Vec<Option<f64>> {
        let col = self.dataset.camera_columns()[self.index];
        self.dataset.veh.column(col)
    }
}

/// GCT extractors, trained at most once per base seed and shared by folds.
pub struct ExtractorCache<'a> {
    dataset: &'a Dataset,
    prepared: &'a Prepared,
    config: &'a ExperimentConfig,
    cells: BTreeMap<u64, OnceLock<std::result::Result<StgnnModel, String>>>,
}

impl<'a> ExtractorCache<'a> {
    pub fn new(dataset: &'a Dataset, prepared: &'a Prepared, config: &'a ExperimentConfig) -> Self {
        ExtractorCache {
            dataset,
            prepared,
            config,
            cells: config.seeds.iter().map(|&s| (s, OnceLock::new())).collect(),
        }
    }

    pub fn get(&self, seed: u64) -> Result<&StgnnModel> {
        let cell = self
            .cells
            .get(&seed)
            .ok_or_else(|| Error::InvalidData(format!("seed {seed} is not part of the experiment")))?;
        cell.get_or_init(|| self.train(seed).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::InvalidData(format!("GCT extractor for seed {seed}: {e}")))
    }

    pub fn trained(&self) -> usize {
        self.cells.values().filter(|c| c.get().is_some()).count()
    }

    fn train(&self, seed: u64) -> Result<StgnnModel> {
        train_gct_extractor(self.dataset, self.prepared, self.config, seed)
    }
}

/// Inputs of one arm run.
pub struct ArmContext<'a> {
    pub config: &'a ExperimentConfig,
    pub fold: &'a Fold<'a>,
    /// Base seed of the repetition.
    pub seed: u64,
    /// `seed ^ fold_index`.
    pub fold_seed: u64,
    pub extractors: &'a ExtractorCache<'a>,
}

/// Test-split predictions and training record of one arm on one fold.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub windows: Vec<Window>,
    /// Raw-scale predictions `[S, N, T_out]` for `windows`.
    pub predictions: Tensor,
    /// MAE at the retained camera nodes on the test split.
    pub camera_test_mae: f64,
    /// Networks trained for this fold.
    pub trainings: usize,
    pub loss_trace: Vec<LossBreakdown>,
    /// Source tags of every vehicle series seen during training.
    pub lineage: BTreeSet<String>,
}

/// A model family evaluated under the leave-one-out protocol.
pub trait Arm: Send + Sync {
    fn name(&self) -> &str;
    fn describe(&self) -> &str;
    fn run(&self, ctx: &ArmContext<'_>) -> Result<ArmRun>;
}

/// Frozen GCT and vehicle extractors, attention fusion and the predictor.
pub struct FusionArm;

impl Arm for FusionArm {
    fn name(&self) -> &str {
        "tel2veh"
    }

    fn describe(&self) -> &str {
        "with framework"
    }

    fn run(&self, ctx: &ArmContext<'_>) -> Result<ArmRun> {
        let fold = ctx.fold;
        let prepared = fold.prepared;
        let gct_ext = ctx.extractors.get(ctx.seed)?;
        let veh_ext = train_vehicle_extractor(fold.dataset, prepared, &fold.retained, ctx.config, ctx.fold_seed)?;
        let ext = (gct_ext, &veh_ext);
        let (model, log, lineage) =
            train_fusion(fold.dataset, prepared, &fold.retained, ctx.config, ext, ctx.fold_seed)?;
        let test = fold.samples(&prepared.test_windows, Some(ext))?;
        Ok(ArmRun {
            predictions: predict_samples(&model, &test)?,
            camera_test_mae: camera_mae(&model, &test)?,
            windows: test.windows,
            trainings: 2,
            loss_trace: log.steps,
            lineage,
        })
    }
}

/// One network on GCT flows alone, trained with the same two-term loss.
pub struct GctOnlyArm;

impl Arm for GctOnlyArm {
    fn name(&self) -> &str {
        "gct-only"
    }

    fn describe(&self) -> &str {
        "without framework"
    }

    fn run(&self, ctx: &ArmContext<'_>) -> Result<ArmRun> {
        let fold = ctx.fold;
        let prepared = fold.prepared;
        let train = fold.samples(&prepared.train_windows, None)?;
        let val = fold.samples(&prepared.val_windows, None)?;
        let test = fold.samples(&prepared.test_windows, None)?;
        let n = fold.dataset.gct.n_nodes();
        let mut model = GctOnlyModel::new(
            ctx.config.baseline_config(n)?,
            &fold.dataset.graph,
            &fold.retained.nodes,
            fold.retained.output_scale(),
            ctx.config.lambda_init()?,
            &mut SeededRng::new(ctx.fold_seed),
        )?;
        let log = train_dynamic(&mut model, &train, &val, &ctx.config.baseline_train, ctx.fold_seed)?;
        let mut lineage = train.lineage.clone();
        lineage.extend(val.lineage.iter().cloned());
        Ok(ArmRun {
            predictions: predict_samples(&model, &test)?,
            camera_test_mae: camera_mae(&model, &test)?,
            windows: test.windows,
            trainings: 1,
            loss_trace: log.steps,
            lineage,
        })
    }
}

type ArmFactory = fn() -> Box<dyn Arm>;

/// Arms by name.
#[derive(Clone)]
pub struct ArmRegistry {
    factories: BTreeMap<String, ArmFactory>,
}

impl Default for ArmRegistry {
    fn default() -> Self {
        let mut r = ArmRegistry::empty();
        r.register("tel2veh", || Box::new(FusionArm));
        r.register("gct-only", || Box::new(GctOnlyArm));
        r
    }
}

impl ArmRegistry {
    pub fn empty() -> Self {
        ArmRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Replaces any arm already registered under `name`.
    pub fn register(&mut self, name: &str, factory: ArmFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn Arm>> {
        self.factories.get(name).map(|f| f()).ok_or_else(|| Error::Unknown {
            kind: "arm",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}
