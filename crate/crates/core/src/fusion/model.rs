use super::loss::{dynamic_loss_vars, free_nodes, theta_for_lambda, LossBreakdown, PredictionBatch};
use super::mgat::{candidate_mask, init_mgat, mgat_vars, FusionBatch, MgatConfig};
use super::samples::SampleSet;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graphspec::GraphSpec;
use crate::numcore::{BoundParams, Checkpoint, ParamSet, SeededRng, Tape, Tensor, Var};
use crate::stgnn::{forward_vars, init_params, support_tensor, StgnnConfig};

pub const THETA: &str = "lambda.theta";

/// A predictor trained with the two-term loss.
pub trait DynamicLossModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// GCT nodes whose camera series are training targets.
    fn camera_nodes(&self) -> &[usize];
    /// Raw-scale predictions `[B, N, T_out]` for samples `idx`.
    fn predict<'t>(&self, tape: &'t Tape, p: &BoundParams<'t>, samples: &SampleSet, idx: &[usize]) -> Result<Var<'t>>;

    fn lambda(&self) -> f64 {
        let theta = self.params().get(THETA).map(|t| t.item()).unwrap_or(f64::NEG_INFINITY);
        let tape = Tape::new();
        tape.constant(Tensor::scalar(theta)).softplus().item()
    }
}

/// Loss of `model` on samples `idx`.
pub fn batch_loss<'t, M: DynamicLossModel + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    samples: &SampleSet,
    idx: &[usize],
) -> Result<(Var<'t>, LossBreakdown)> {
    let cams = model.camera_nodes();
    if cams != samples.camera_nodes.as_slice() {
        return Err(Error::InvalidData(format!(
            "model cameras {cams:?} differ from sample cameras {:?}",
            samples.camera_nodes
        )));
    }
    let pred = model.predict(tape, p, samples, idx)?;
    let free = free_nodes(samples.n_nodes, cams);
    let t = samples.t_out;
    let y_gct_all = samples.gct_targets.batch(idx);
    let mut y_gct = Vec::with_capacity(idx.len() * free.len() * t);
    for b in 0..idx.len() {
        let s = &y_gct_all.data()[b * samples.n_nodes * t..(b + 1) * samples.n_nodes * t];
        for &j in &free {
            y_gct.extend_from_slice(&s[j * t..(j + 1) * t]);
        }
    }
    let y_gct = Tensor::from_parts(vec![idx.len(), free.len(), t], y_gct);
    let theta = p
        .get(THETA)
        .ok_or_else(|| Error::Config(format!("missing parameter `{THETA}`")))?;
    dynamic_loss_vars(
        tape,
        pred.index_select(1, cams)?,
        pred.index_select(1, &free)?,
        &samples.veh_targets.batch(idx),
        &y_gct,
        theta,
    )
}

/// Raw-scale predictions for every sample, `[S, N, T_out]`.
pub fn predict_samples<M: DynamicLossModel + ?Sized>(model: &M, samples: &SampleSet) -> Result<Tensor> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut data = Vec::with_capacity(samples.len() * samples.n_nodes * samples.t_out);
    for chunk in idx.chunks(128) {
        let tape = Tape::new();
        let p = model.params().bind(&tape, false);
        data.extend_from_slice(model.predict(&tape, &p, samples, chunk)?.value().data());
    }
    Tensor::new(vec![samples.len(), samples.n_nodes, samples.t_out], data)
}

/// Stage-2 settings: the attention, the predictor template and the loss weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mgat: MgatConfig,
    /// Node count, input channels/steps and output steps are filled in from
    /// the attention and the task.
    pub stgnn3: StgnnConfig,
    pub lambda_init: f64,
}

impl FusionConfig {
    pub const DEFAULT_LAMBDA: f64 = 1e-4;

    pub fn new(channels: usize, feature_dim: usize, n_nodes: usize, out_steps: usize) -> Self {
        let mgat = MgatConfig::new(channels, feature_dim);
        let mut stgnn3 = StgnnConfig::with_defaults(n_nodes, mgat.attention_dim, out_steps);
        stgnn3.in_channels = channels;
        let (kernel, dilations) = default_predictor_stack(mgat.attention_dim);
        stgnn3.kernel_size = kernel;
        stgnn3.layers = dilations.len();
        stgnn3.dilations = dilations;
        FusionConfig {
            mgat,
            stgnn3,
            lambda_init: Self::DEFAULT_LAMBDA,
        }
    }

    /// Keys: `lambda_init`, `attention.*`, `predictor.*`.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        self.lambda_init = kv.get_or("lambda_init", self.lambda_init)?;
        self.mgat.apply_kv(&kv.section("attention"))?;
        let attn_changed = self.stgnn3.in_steps != self.mgat.attention_dim;
        self.stgnn3.in_steps = self.mgat.attention_dim;
        if attn_changed {
            let (kernel, dilations) = default_predictor_stack(self.mgat.attention_dim);
            self.stgnn3.kernel_size = kernel;
            self.stgnn3.layers = dilations.len();
            self.stgnn3.dilations = dilations;
        }
        self.stgnn3.apply_kv(&kv.section("predictor"))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.mgat.validate()?;
        if self.stgnn3.in_channels != self.mgat.channels || self.stgnn3.in_steps != self.mgat.attention_dim {
            return Err(Error::Config(format!(
                "predictor input [{}, {}] does not match the fused width [{}, {}]",
                self.stgnn3.in_channels, self.stgnn3.in_steps, self.mgat.channels, self.mgat.attention_dim
            )));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::Config("lambda_init must be positive".into()));
        }
        self.stgnn3.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lambda_init", self.lambda_init);
        kv.merge_section("attention", &self.mgat.to_kv());
        kv.merge_section("predictor", &self.stgnn3.to_kv());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let cfg = FusionConfig {
            mgat: MgatConfig::from_kv(&kv.section("attention"))?,
            stgnn3: StgnnConfig::from_kv(&kv.section("predictor"))?,
            lambda_init: kv.get_or("lambda_init", Self::DEFAULT_LAMBDA)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Largest simple stack that fits `steps` input steps.
fn default_predictor_stack(steps: usize) -> (usize, Vec<usize>) {
    match steps {
        0 | 1 => (1, vec![1]),
        2 => (2, vec![1]),
        _ => (2, vec![1, 1]),
    }
}

fn scale_to_raw<'t>(tape: &'t Tape, z: Var<'t>, scale: (f64, f64)) -> Result<Var<'t>> {
    z.scale(scale.1).add(tape.constant(Tensor::scalar(scale.0)))
}

/// Attention fusion followed by the predictor network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    params: ParamSet,
    camera_nodes: Vec<usize>,
    mask: Tensor,
    support: Tensor,
    /// (mean, std) mapping predictor output to vehicle counts.
    output_scale: (f64, f64),
}

impl FusionModel {
    pub fn new(
        config: FusionConfig,
        graph: &GraphSpec,
        camera_nodes: &[usize],
        output_scale: (f64, f64),
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut cfg = config;
        cfg.stgnn3.n_nodes = graph.n_nodes();
        cfg.validate()?;
        if camera_nodes.is_empty() {
            return Err(Error::InvalidData("stage 2 needs at least one camera".into()));
        }
        let mut params = ParamSet::new();
        params.extend_prefixed("mgat.", &init_mgat(&cfg.mgat, &mut rng.fork(10)));
        params.extend_prefixed("stgnn3.", &init_params(&cfg.stgnn3, &mut rng.fork(11)));
        params.insert(THETA, Tensor::scalar(theta_for_lambda(cfg.lambda_init)));
        Ok(FusionModel {
            mask: candidate_mask(graph, camera_nodes),
            support: support_tensor(graph)?,
            camera_nodes: camera_nodes.to_vec(),
            config: cfg,
            params,
            output_scale,
        })
    }

    pub fn output_scale(&self) -> (f64, f64) {
        self.output_scale
    }

    /// `gct [B, K, N, D]`, `veh [B, K, M, D]` to raw-scale `[B, N, T_out]`.
    pub fn predict_vars<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        gct: Var<'t>,
        veh: Var<'t>,
        mask: Var<'t>,
        support: Var<'t>,
    ) -> Result<Var<'t>> {
        let fused = mgat_vars(&self.config.mgat, p, "mgat.", gct, Some(veh), mask)?.fused;
        let out = forward_vars(&self.config.stgnn3, p, "stgnn3.", fused, support)?;
        scale_to_raw(tape, out.prediction, self.output_scale)
    }

    /// Same model with nodes reordered: new node `k` is old node `perm[k]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<FusionModel> {
        let inner = crate::stgnn::StgnnModel::from_params(self.config.stgnn3.clone(), self.params.strip_prefix("stgnn3."))?
            .permute_nodes(perm)?;
        let mut out = self.clone();
        out.params.extend_prefixed("stgnn3.", inner.params());
        let inv: Vec<usize> = (0..perm.len()).map(|i| perm.iter().position(|&p| p == i).unwrap()).collect();
        out.camera_nodes = self.camera_nodes.iter().map(|&c| inv[c]).collect();
        Ok(out)
    }

    pub fn to_checkpoint(&self, fingerprint: &str, extra: &KvConfig) -> Checkpoint {
        let mut meta = extra.clone();
        meta.merge_section("fusion", &self.config.to_kv());
        meta.set(
            "camera_nodes",
            self.camera_nodes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        meta.set("output_mean", self.output_scale.0);
        meta.set("output_std", self.output_scale.1);
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            metadata: meta.to_text(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, graph: &GraphSpec) -> Result<FusionModel> {
        let meta = KvConfig::parse(&ck.metadata)?;
        let config = FusionConfig::from_kv(&meta.section("fusion"))?;
        let cams: Vec<usize> = meta
            .get_list("camera_nodes")?
            .ok_or_else(|| Error::Checkpoint("missing camera_nodes".into()))?;
        let scale = (
            meta.get("output_mean")?.ok_or_else(|| Error::Checkpoint("missing output_mean".into()))?,
            meta.get("output_std")?.ok_or_else(|| Error::Checkpoint("missing output_std".into()))?,
        );
        let mut model = FusionModel::new(config, graph, &cams, scale, &mut SeededRng::new(0))?;
        for (name, t) in model.params.iter_mut() {
            let v = ck
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", v.shape())));
            }
            *t = v.clone();
        }
        Ok(model)
    }
}

impl DynamicLossModel for FusionModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn camera_nodes(&self) -> &[usize] {
        &self.camera_nodes
    }

    fn predict<'t>(&self, tape: &'t Tape, p: &BoundParams<'t>, samples: &SampleSet, idx: &[usize]) -> Result<Var<'t>> {
        let (gf, vf) = match (&samples.gct_features, &samples.veh_features) {
            (Some(g), Some(v)) => (g, v),
            _ => return Err(Error::InvalidData("fusion needs extracted feature maps".into())),
        };
        self.predict_vars(
            tape,
            p,
            tape.constant(gf.batch(idx)),
            tape.constant(vf.batch(idx)),
            tape.constant(self.mask.clone()),
            tape.constant(self.support.clone()),
        )
    }
}

/// Fuses one window and predicts every node.
pub fn stage2_forward(batch: &FusionBatch, model: &FusionModel) -> Result<PredictionBatch> {
    let cams = batch.camera_nodes()?;
    if cams.is_empty() {
        return Err(Error::InvalidData("stage 2 needs at least one camera".into()));
    }
    let (g, v) = batch.batched()?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let pred = model.predict_vars(
        &tape,
        &p,
        tape.constant(g),
        tape.constant(v),
        tape.constant(candidate_mask(&batch.graph, &cams)),
        tape.constant(support_tensor(&batch.graph)?),
    )?;
    let n = batch.graph.n_nodes();
    let combined = pred.value().reshape(&[n, model.config.stgnn3.out_steps])?;
    PredictionBatch::from_combined(combined, &cams)
}

/// A single network on normalised GCT inputs, trained with the same loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GctOnlyModel {
    pub config: StgnnConfig,
    params: ParamSet,
    camera_nodes: Vec<usize>,
    support: Tensor,
    output_scale: (f64, f64),
}

impl GctOnlyModel {
    pub fn new(
        config: StgnnConfig,
        graph: &GraphSpec,
        camera_nodes: &[usize],
        output_scale: (f64, f64),
        lambda_init: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if config.n_nodes != graph.n_nodes() || config.in_channels != 1 {
            return Err(Error::Config("baseline network must read one channel per graph node".into()));
        }
        if camera_nodes.is_empty() {
            return Err(Error::InvalidData("training needs at least one camera".into()));
        }
        let mut params = ParamSet::new();
        params.extend_prefixed("stgnn.", &init_params(&config, &mut rng.fork(20)));
        params.insert(THETA, Tensor::scalar(theta_for_lambda(lambda_init)));
        Ok(GctOnlyModel {
            config,
            params,
            camera_nodes: camera_nodes.to_vec(),
            support: support_tensor(graph)?,
            output_scale,
        })
    }
}

impl DynamicLossModel for GctOnlyModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn camera_nodes(&self) -> &[usize] {
        &self.camera_nodes
    }

    fn predict<'t>(&self, tape: &'t Tape, p: &BoundParams<'t>, samples: &SampleSet, idx: &[usize]) -> Result<Var<'t>> {
        let out = forward_vars(
            &self.config,
            p,
            "stgnn.",
            tape.constant(samples.gct_input.batch(idx)),
            tape.constant(self.support.clone()),
        )?;
        scale_to_raw(tape, out.prediction, self.output_scale)
    }
}
