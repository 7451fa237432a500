use std::collections::BTreeSet;

use super::arms::Prepared;
use super::dataset::Dataset;
use super::experiment::ExperimentConfig;
use crate::error::{Error, Result};
use crate::flowdata::{FlowMatrix, NormScope, Normalizer, Window};
use crate::fusion::{train_stage2, FusionModel, SampleSet, SampleSpec, Stage2Log};
use crate::stgnn::{train_stage1, Stage1Data, StgnnModel, WindowTensors};

/// Cameras a training run may see, with their flows and normaliser.
#[derive(Clone, Debug)]
pub struct Retained {
    pub excluded: Option<String>,
    pub cameras: Vec<String>,
    /// GCT node of each retained camera, in mapping order.
    pub nodes: Vec<usize>,
    pub veh: FlowMatrix,
    /// Pooled over the retained cameras' training rows.
    pub veh_norm: Normalizer,
}

impl Retained {
    pub fn new(dataset: &Dataset, prepared: &Prepared, exclude: Option<&str>) -> Result<Self> {
        let cameras = dataset.cameras();
        if let Some(c) = exclude {
            if !cameras.iter().any(|x| x == c) {
                return Err(Error::Unknown {
                    kind: "camera",
                    name: c.to_string(),
                });
            }
        }
        let nodes = dataset.camera_nodes()?;
        let columns = dataset.camera_columns();
        let keep: Vec<usize> = (0..cameras.len())
            .filter(|&i| Some(cameras[i].as_str()) != exclude)
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidData("no camera left for training".into()));
        }
        let veh = dataset.veh.select_nodes(&keep.iter().map(|&i| columns[i]).collect::<Vec<_>>())?;
        let veh_norm = Normalizer::fit_scoped(&veh, prepared.split.train.clone(), NormScope::Pooled)?;
        Ok(Retained {
            excluded: exclude.map(str::to_string),
            cameras: keep.iter().map(|&i| cameras[i].clone()).collect(),
            nodes: keep.iter().map(|&i| nodes[i]).collect(),
            veh,
            veh_norm,
        })
    }

    /// (mean, std) mapping network outputs to vehicle counts.
    pub fn output_scale(&self) -> (f64, f64) {
        (self.veh_norm.per_node_mean[0], self.veh_norm.per_node_std[0])
    }

    pub fn samples(
        &self,
        dataset: &Dataset,
        prepared: &Prepared,
        windows: &[Window],
        extractors: Option<(&StgnnModel, &StgnnModel)>,
    ) -> Result<SampleSet> {
        SampleSet::build(&SampleSpec {
            gct: &dataset.gct,
            veh: &self.veh,
            camera_nodes: &self.nodes,
            windows,
            gct_norm: &prepared.gct_norm,
            veh_norm: &self.veh_norm,
            graph: &dataset.graph,
            extractors,
        })
    }
}

/// Stage-1 extractor on GCT flows over the whole road graph.
pub fn train_gct_extractor(
    dataset: &Dataset,
    prepared: &Prepared,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<StgnnModel> {
    let gct = &dataset.gct;
    let norm = &prepared.gct_norm;
    let train = WindowTensors::build(gct, norm, &prepared.train_windows)?;
    let val = WindowTensors::build(gct, norm, &prepared.val_windows)?;
    let data = Stage1Data {
        graph: &dataset.graph,
        normalizer: norm,
        train: &train,
        val: &val,
    };
    let cfg = config.stage1_config(gct.n_nodes())?;
    Ok(train_stage1(&data, cfg, &config.stage1_train, seed)?.0)
}

/// Stage-1 extractor on the retained cameras' flows over the induced subgraph.
pub fn train_vehicle_extractor(
    dataset: &Dataset,
    prepared: &Prepared,
    retained: &Retained,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<StgnnModel> {
    let graph = dataset.graph.subgraph(&retained.nodes);
    let train = WindowTensors::build(&retained.veh, &retained.veh_norm, &prepared.train_windows)?;
    let val = WindowTensors::build(&retained.veh, &retained.veh_norm, &prepared.val_windows)?;
    let data = Stage1Data {
        graph: &graph,
        normalizer: &retained.veh_norm,
        train: &train,
        val: &val,
    };
    let cfg = config.stage1_config(retained.nodes.len())?;
    Ok(train_stage1(&data, cfg, &config.stage1_train, seed)?.0)
}

/// Stage 2 on top of two frozen extractors. Also returns the source tags of
/// every vehicle series the run saw.
pub fn train_fusion(
    dataset: &Dataset,
    prepared: &Prepared,
    retained: &Retained,
    config: &ExperimentConfig,
    extractors: (&StgnnModel, &StgnnModel),
    seed: u64,
) -> Result<(FusionModel, Stage2Log, BTreeSet<String>)> {
    let (gct_ext, veh_ext) = extractors;
    if gct_ext.config().n_nodes != dataset.gct.n_nodes() {
        return Err(Error::InvalidData(format!(
            "GCT extractor has {} nodes, data has {}",
            gct_ext.config().n_nodes,
            dataset.gct.n_nodes()
        )));
    }
    if veh_ext.config().n_nodes != retained.nodes.len() {
        return Err(Error::InvalidData(format!(
            "vehicle extractor has {} nodes, {} cameras are retained",
            veh_ext.config().n_nodes,
            retained.nodes.len()
        )));
    }
    let train = retained.samples(dataset, prepared, &prepared.train_windows, Some(extractors))?;
    let val = retained.samples(dataset, prepared, &prepared.val_windows, Some(extractors))?;
    let g = gct_ext.config();
    let cfg = config.fusion_config(g.channels, g.feature_width(), dataset.gct.n_nodes())?;
    let (model, log) = train_stage2(
        gct_ext,
        veh_ext,
        &dataset.graph,
        &train,
        &val,
        &cfg,
        retained.output_scale(),
        &config.stage2_train,
        seed,
    )?;
    let mut lineage: BTreeSet<String> = retained.veh.node_ids().iter().cloned().collect();
    lineage.extend(train.lineage);
    lineage.extend(val.lineage);
    Ok((model, log, lineage))
}
