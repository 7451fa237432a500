use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::flowdata::CameraMapping;
use crate::graphspec::GraphSpec;
use crate::numcore::{glorot_init, BoundParams, ParamSet, SeededRng, Tape, Tensor, Var};
use crate::stgnn::FeatureMap;

/// Added to the scores of non-candidates before the softmax.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct MgatConfig {
    pub channels: usize,
    pub feature_dim: usize,
    pub attention_dim: usize,
    pub leaky_slope: f64,
    pub heads: usize,
}

impl MgatConfig {
    /// Attention width defaults to the feature width.
    pub fn new(channels: usize, feature_dim: usize) -> Self {
        MgatConfig {
            channels,
            feature_dim,
            attention_dim: feature_dim,
            leaky_slope: 0.2,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.feature_dim == 0 || self.attention_dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("invalid attention config {self:?}")));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be non-negative".into()));
        }
        Ok(())
    }

    /// Both extractors must agree with the attention on K and D.
    pub fn check_features(&self, k: usize, d: usize) -> Result<()> {
        if (k, d) != (self.channels, self.feature_dim) {
            return Err(Error::Config(format!(
                "feature maps are K={k}, D={d} but attention expects K={}, D={}",
                self.channels, self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        self.attention_dim = kv.get_or("attention_dim", self.attention_dim)?;
        self.leaky_slope = kv.get_or("leaky_slope", self.leaky_slope)?;
        self.heads = kv.get_or("heads", self.heads)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("channels", self.channels);
        kv.set("feature_dim", self.feature_dim);
        kv.set("attention_dim", self.attention_dim);
        kv.set("leaky_slope", self.leaky_slope);
        kv.set("heads", self.heads);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let k = kv.get("channels")?.ok_or_else(|| Error::Config("attention config missing `channels`".into()))?;
        let d = kv
            .get("feature_dim")?
            .ok_or_else(|| Error::Config("attention config missing `feature_dim`".into()))?;
        let mut c = MgatConfig::new(k, d);
        c.apply_kv(kv)?;
        Ok(c)
    }
}

/// Per-head weights `w [K, D, A]`, `a_src [K, A, 1]`, `a_dst [K, A, 1]`.
pub fn init_mgat(cfg: &MgatConfig, rng: &mut SeededRng) -> ParamSet {
    let (k, d, a) = (cfg.channels, cfg.feature_dim, cfg.attention_dim);
    let mut p = ParamSet::new();
    for h in 0..cfg.heads {
        p.insert(format!("h{h}.w"), glorot_init(&[k, d, a], rng));
        p.insert(format!("h{h}.a_src"), glorot_init(&[k, a, 1], rng));
        p.insert(format!("h{h}.a_dst"), glorot_init(&[k, a, 1], rng));
    }
    p
}

/// Candidate mask `[N, 1 + M]`: column 0 is the node itself, column `1 + m`
/// is camera `m`, admitted when its node has non-zero raw weight to the row
/// node. Rows without any such camera admit every camera.
pub fn candidate_mask(graph: &GraphSpec, camera_nodes: &[usize]) -> Tensor {
    let n = graph.n_nodes();
    let m = camera_nodes.len();
    let mut data = vec![0.0; n * (1 + m)];
    for i in 0..n {
        let row = &mut data[i * (1 + m)..(i + 1) * (1 + m)];
        let near: Vec<bool> = camera_nodes.iter().map(|&c| graph.weight(i, c) > 0.0).collect();
        if near.iter().any(|&b| b) {
            for (slot, ok) in row[1..].iter_mut().zip(&near) {
                if !ok {
                    *slot = MASKED;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, 1 + m], data)
}

pub struct MgatOutput<'t> {
    /// `[B, K, N, A]`.
    pub fused: Var<'t>,
    /// Per head, `[B, K, N, 1 + M]`; column 0 is the self weight.
    pub alpha: Vec<Var<'t>>,
}

/// Channel-wise attention over `{n} ∪ cameras` for every node at once.
/// `gct` is `[B, K, N, D]`, `veh` is `[B, K, M, D]` (or `None` for M = 0),
/// `mask` is `[N, 1 + M]`; parameter names carry `prefix`.
pub fn mgat_vars<'t>(
    cfg: &MgatConfig,
    p: &BoundParams<'t>,
    prefix: &str,
    gct: Var<'t>,
    veh: Option<Var<'t>>,
    mask: Var<'t>,
) -> Result<MgatOutput<'t>> {
    let gs = gct.shape();
    if gs.len() != 4 {
        return Err(Error::Shape { op: "attention input", lhs: gs, rhs: vec![0, cfg.channels, 0, cfg.feature_dim] });
    }
    cfg.check_features(gs[1], gs[3])?;
    let veh = veh.filter(|v| v.shape()[2] > 0);
    if let Some(v) = veh {
        let vs = v.shape();
        if vs.len() != 4 || vs[0] != gs[0] {
            return Err(Error::Shape { op: "attention vehicle input", lhs: vs, rhs: gs });
        }
        cfg.check_features(vs[1], vs[3])?;
    }
    let get = |s: &str| {
        let name = format!("{prefix}{s}");
        p.get(&name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    };
    let mut alphas = Vec::with_capacity(cfg.heads);
    let mut total: Option<Var<'t>> = None;
    for h in 0..cfg.heads {
        let w = get(&format!("h{h}.w"))?;
        let a_src = get(&format!("h{h}.a_src"))?;
        let a_dst = get(&format!("h{h}.a_dst"))?;
        let pg = gct.matmul(w)?;
        let s_src = pg.matmul(a_src)?;
        let e_self = s_src.add(pg.matmul(a_dst)?)?;
        let (scores, pv) = match veh {
            Some(v) => {
                let pv = v.matmul(w)?;
                let s_v = pv.matmul(a_dst)?.permute(&[0, 1, 3, 2])?;
                (Var::concat(&[e_self, s_src.add(s_v)?], 3)?, Some(pv))
            }
            None => (e_self, None),
        };
        let alpha = scores.leaky_relu(cfg.leaky_slope).add(mask)?.softmax(3)?;
        let mut out = alpha.slice(3, 0, 1)?.mul(pg)?;
        if let Some(pv) = pv {
            let m = pv.shape()[2];
            out = out.add(alpha.slice(3, 1, m)?.matmul(pv)?)?;
        }
        total = Some(match total {
            None => out,
            Some(t) => t.add(out)?,
        });
        alphas.push(alpha);
    }
    let mut fused = total.expect("heads >= 1");
    if cfg.heads > 1 {
        fused = fused.scale(1.0 / cfg.heads as f64);
    }
    Ok(MgatOutput { fused, alpha: alphas })
}

/// Stage-2 inputs for one window.
#[derive(Clone, Debug)]
pub struct FusionBatch {
    pub gct_features: FeatureMap,
    pub vehicle_features: FeatureMap,
    pub graph: GraphSpec,
    pub camera_mapping: CameraMapping,
}

impl FusionBatch {
    /// GCT node index of each vehicle feature row.
    pub fn camera_nodes(&self) -> Result<Vec<usize>> {
        self.vehicle_features
            .node_ids
            .iter()
            .map(|cam| {
                let seg = self
                    .camera_mapping
                    .segment_of(cam)
                    .ok_or_else(|| Error::InvalidData(format!("camera `{cam}` is not in the mapping")))?;
                self.graph
                    .node_ids()
                    .iter()
                    .position(|n| n == seg)
                    .ok_or_else(|| Error::InvalidData(format!("segment `{seg}` of camera `{cam}` is not a graph node")))
            })
            .collect()
    }

    /// `([1, K, N, D], [1, K, M, D])`.
    pub(crate) fn batched(&self) -> Result<(Tensor, Tensor)> {
        let g = &self.gct_features.values;
        let v = &self.vehicle_features.values;
        let mut gs = vec![1];
        gs.extend_from_slice(g.shape());
        let mut vs = vec![1];
        vs.extend_from_slice(v.shape());
        Ok((g.clone().reshape(&gs)?, v.clone().reshape(&vs)?))
    }
}

/// Fused feature `[K, A]` of node `n`. `params` are the attention weights
/// without prefix.
pub fn mgat_fuse(batch: &FusionBatch, n: usize, params: &ParamSet, cfg: &MgatConfig) -> Result<Tensor> {
    let nodes = batch.graph.n_nodes();
    if n >= nodes {
        return Err(Error::InvalidData(format!("node {n} out of range for {nodes} nodes")));
    }
    let cams = batch.camera_nodes()?;
    let (g, v) = batch.batched()?;
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = mgat_vars(
        cfg,
        &p,
        "",
        tape.constant(g),
        Some(tape.constant(v)),
        tape.constant(candidate_mask(&batch.graph, &cams)),
    )?;
    let k = cfg.channels;
    let a = cfg.attention_dim;
    out.fused.slice(2, n, 1)?.reshape(&[k, a]).map(|v| v.value())
}
