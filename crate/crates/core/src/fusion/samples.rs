use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::flowdata::{FlowMatrix, Normalizer, Window};
use crate::graphspec::GraphSpec;
use crate::numcore::Tensor;
use crate::stgnn::{support_tensor, StgnnModel, WindowTensors};

/// A block of equally shaped per-sample arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Per-sample shape.
    pub shape: Vec<usize>,
    data: Vec<f64>,
}

impl Block {
    fn new(shape: Vec<usize>) -> Self {
        Block { shape, data: Vec::new() }
    }

    fn stride(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    /// Samples `idx` stacked along a new leading axis.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        let data = idx.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        Tensor::from_parts(shape, data)
    }

    fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len() % self.stride(), 0);
        self.data.extend_from_slice(values);
    }
}

/// Stage-2 training material for a set of windows.
///
/// `lineage` lists every vehicle series whose values entered the set, as
/// inputs or targets; fold hygiene is checked against it.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub windows: Vec<Window>,
    pub n_nodes: usize,
    pub t_out: usize,
    /// GCT node of each training camera, in vehicle-feature order.
    pub camera_nodes: Vec<usize>,
    /// Normalised GCT inputs `[1, N, T_in]`.
    pub gct_input: Block,
    /// `[K, N, D]`, present when extractors were given.
    pub gct_features: Option<Block>,
    /// `[K, M, D]`.
    pub veh_features: Option<Block>,
    /// Raw vehicle targets at camera nodes `[M, T_out]`.
    pub veh_targets: Block,
    /// Raw GCT targets at all nodes `[N, T_out]`.
    pub gct_targets: Block,
    pub lineage: BTreeSet<String>,
}

pub struct SampleSpec<'a> {
    pub gct: &'a FlowMatrix,
    /// Vehicle flows of the training cameras only, columns aligned with `camera_nodes`.
    pub veh: &'a FlowMatrix,
    pub camera_nodes: &'a [usize],
    pub windows: &'a [Window],
    pub gct_norm: &'a Normalizer,
    pub veh_norm: &'a Normalizer,
    pub graph: &'a GraphSpec,
    /// Frozen (GCT, vehicle) extractors.
    pub extractors: Option<(&'a StgnnModel, &'a StgnnModel)>,
}

impl SampleSet {
    /// Windows with a gap in GCT flows or in any training camera are dropped.
    pub fn build(spec: &SampleSpec<'_>) -> Result<SampleSet> {
        let n = spec.gct.n_nodes();
        let m = spec.veh.n_nodes();
        if spec.camera_nodes.len() != m {
            return Err(Error::InvalidData(format!(
                "{} camera nodes for {m} vehicle series",
                spec.camera_nodes.len()
            )));
        }
        if spec.gct.n_rows() != spec.veh.n_rows() {
            return Err(Error::InvalidData("GCT and vehicle flows differ in length".into()));
        }
        let gct_w = WindowTensors::build(spec.gct, spec.gct_norm, spec.windows)?;
        let veh_w = WindowTensors::build(spec.veh, spec.veh_norm, &gct_w.windows)?;
        let veh_index: HashMap<usize, usize> =
            veh_w.windows.iter().enumerate().map(|(i, w)| (w.start, i)).collect();
        let keep: Vec<usize> = (0..gct_w.len())
            .filter(|&i| veh_index.contains_key(&gct_w.windows[i].start))
            .collect();
        let (t_in, t_out) = (gct_w.t_in, gct_w.t_out);
        let mut set = SampleSet {
            windows: keep.iter().map(|&i| gct_w.windows[i]).collect(),
            n_nodes: n,
            t_out,
            camera_nodes: spec.camera_nodes.to_vec(),
            gct_input: Block::new(vec![1, n, t_in]),
            gct_features: None,
            veh_features: None,
            veh_targets: Block::new(vec![m, t_out]),
            gct_targets: Block::new(vec![n, t_out]),
            lineage: spec.veh.node_ids().iter().cloned().collect(),
        };
        let veh_pos = |w: &Window| veh_index[&w.start];
        for &i in &keep {
            set.gct_input.push(gct_w.input(i));
            set.gct_targets.push(gct_w.target(i));
            set.veh_targets.push(veh_w.target(veh_pos(&gct_w.windows[i])));
        }
        if let Some((ge, ve)) = spec.extractors {
            if !ge.is_frozen() || !ve.is_frozen() {
                return Err(Error::NotFrozen);
            }
            let sup_g = support_tensor(spec.graph)?;
            let sup_v = support_tensor(&spec.graph.subgraph(spec.camera_nodes))?;
            let k = ge.config().channels;
            let d = ge.config().feature_width();
            let mut gf = Block::new(vec![k, n, d]);
            let mut vf = Block::new(vec![ve.config().channels, m, ve.config().feature_width()]);
            let positions: Vec<usize> = keep.iter().map(|&i| veh_pos(&gct_w.windows[i])).collect();
            for (chunk, vchunk) in keep.chunks(64).zip(positions.chunks(64)) {
                gf.push(ge.extract_features_batch(&gct_w.input_batch(chunk), &sup_g)?.data());
                vf.push(ve.extract_features_batch(&veh_w.input_batch(vchunk), &sup_v)?.data());
            }
            set.gct_features = Some(gf);
            set.veh_features = Some(vf);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}
