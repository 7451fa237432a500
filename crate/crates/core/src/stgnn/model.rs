use super::StgnnConfig;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::flowdata::{FlowKind, Normalizer};
use crate::graphspec::GraphSpec;
use crate::numcore::{glorot_init, BoundParams, Checkpoint, ParamSet, SeededRng, Tape, Tensor, Var};

/// Pre-head representation `[K, nodes, D]` of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub source: FlowKind,
    pub node_ids: Vec<String>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Outputs of one pass through the network.
#[derive(Clone, Copy)]
pub struct StgnnOutput<'t> {
    /// Skip sum `[B, K, N, D]`.
    pub features: Var<'t>,
    /// Head output `[B, N, T_out]`, in the network's (normalised) scale.
    pub prediction: Var<'t>,
}

/// Row-normalised `G` as a dense `[N, N]` tensor.
pub fn support_tensor(graph: &GraphSpec) -> Result<Tensor> {
    let n = graph.n_nodes();
    Tensor::new(vec![n, n], graph.row_normalize()?.weights().to_vec())
}

fn lookup<'t>(p: &BoundParams<'t>, name: &str) -> Result<Var<'t>> {
    p.get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// `softmax(relu(E1 E2^T))` along rows.
pub fn adaptive_adjacency<'t>(src: Var<'t>, dst: Var<'t>) -> Result<Var<'t>> {
    src.matmul(dst.permute(&[1, 0])?)?.relu().softmax(1)
}

/// The network on tape variables. `x` is `[B, C_in, N, T_in]`, `support`
/// the `[N, N]` row-normalised adjacency; parameter names carry `prefix`.
pub fn forward_vars<'t>(
    cfg: &StgnnConfig,
    p: &BoundParams<'t>,
    prefix: &str,
    x: Var<'t>,
    support: Var<'t>,
) -> Result<StgnnOutput<'t>> {
    let xs = x.shape();
    let expect = [cfg.in_channels, cfg.n_nodes, cfg.in_steps];
    if xs.len() != 4 || xs[1..] != expect {
        return Err(Error::Shape {
            op: "stgnn input",
            lhs: xs,
            rhs: vec![0, expect[0], expect[1], expect[2]],
        });
    }
    let b = xs[0];
    let g = |s: &str| lookup(p, &format!("{prefix}{s}"));
    let mut h = x.dilated_causal_conv1d(g("start.w")?, 1)?.add(g("start.b")?)?;
    let adp = if cfg.use_adaptive_adjacency {
        Some(adaptive_adjacency(g("emb.src")?, g("emb.dst")?)?)
    } else {
        None
    };
    let mut skip: Option<Var<'t>> = None;
    for (l, &d) in cfg.dilations.iter().enumerate() {
        let lp = |s: &str| g(&format!("l{l}.{s}"));
        let filter = h.dilated_causal_conv1d(lp("filter.w")?, d)?.add(lp("filter.b")?)?.tanh();
        let gate = h.dilated_causal_conv1d(lp("gate.w")?, d)?.add(lp("gate.b")?)?.sigmoid();
        let z = filter.mul(gate)?;
        let t = z.shape()[3];
        let s = z.dilated_causal_conv1d(lp("skip.w")?, 1)?.add(lp("skip.b")?)?;
        skip = Some(match skip {
            None => s,
            Some(prev) => s.add(prev.tail(3, t)?)?,
        });
        let mut parts = vec![z, support.matmul(z)?];
        if let Some(a) = adp {
            parts.push(a.matmul(z)?);
        }
        let mixed = Var::concat(&parts, 1)?
            .dilated_causal_conv1d(lp("gconv.w")?, 1)?
            .add(lp("gconv.b")?)?;
        h = mixed.add(h.tail(3, t)?)?;
    }
    let features = skip.expect("at least one layer");
    let width = features.shape()[3];
    let flat = features
        .relu()
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, cfg.n_nodes, cfg.channels * width])?;
    let hidden = flat.matmul(g("head1.w")?)?.add(g("head1.b")?)?.relu();
    let prediction = hidden.matmul(g("head2.w")?)?.add(g("head2.b")?)?;
    Ok(StgnnOutput { features, prediction })
}

/// Freshly initialised parameters (no prefix).
pub fn init_params(cfg: &StgnnConfig, rng: &mut SeededRng) -> ParamSet {
    let k = cfg.channels;
    let mut p = ParamSet::new();
    let bias = |c: usize| Tensor::zeros(&[1, c, 1, 1]);
    p.insert("start.w", glorot_init(&[k, cfg.in_channels, 1], rng));
    p.insert("start.b", bias(k));
    let n_supports = if cfg.use_adaptive_adjacency { 3 } else { 2 };
    for l in 0..cfg.layers {
        p.insert(format!("l{l}.filter.w"), glorot_init(&[k, k, cfg.kernel_size], rng));
        p.insert(format!("l{l}.filter.b"), bias(k));
        p.insert(format!("l{l}.gate.w"), glorot_init(&[k, k, cfg.kernel_size], rng));
        p.insert(format!("l{l}.gate.b"), bias(k));
        p.insert(format!("l{l}.skip.w"), glorot_init(&[k, k, 1], rng));
        p.insert(format!("l{l}.skip.b"), bias(k));
        p.insert(format!("l{l}.gconv.w"), glorot_init(&[k, n_supports * k, 1], rng));
        p.insert(format!("l{l}.gconv.b"), bias(k));
    }
    if cfg.use_adaptive_adjacency {
        p.insert("emb.src", glorot_init(&[cfg.n_nodes, cfg.embedding_dim], rng));
        p.insert("emb.dst", glorot_init(&[cfg.n_nodes, cfg.embedding_dim], rng));
    }
    p.insert("head1.w", glorot_init(&[k * cfg.feature_width(), cfg.head_hidden], rng));
    p.insert("head1.b", Tensor::zeros(&[1, 1, cfg.head_hidden]));
    p.insert("head2.w", glorot_init(&[cfg.head_hidden, cfg.out_steps], rng));
    p.insert("head2.b", Tensor::zeros(&[1, 1, cfg.out_steps]));
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgnnModel {
    config: StgnnConfig,
    params: ParamSet,
    frozen: bool,
}

impl StgnnModel {
    /// Validates the configuration, so a receptive field wider than the
    /// input fails here rather than at the first forward pass.
    pub fn new(config: StgnnConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(StgnnModel {
            config,
            params,
            frozen: false,
        })
    }

    pub fn from_params(config: StgnnConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, &mut SeededRng::new(0));
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Shape {
                        op: "stgnn parameter",
                        lhs: v.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != reference.len() {
            return Err(Error::Config("unexpected extra stgnn parameters".into()));
        }
        Ok(StgnnModel {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &StgnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::Tape("parameters of a frozen model are read-only".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Places the parameters on `tape`. Frozen models refuse `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundParams<'t>> {
        if trainable && self.frozen {
            return Err(Error::Tape("frozen model cannot record gradients".into()));
        }
        Ok(self.params.bind(tape, trainable))
    }

    fn as_batch(&self, input: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = input.shape();
        let ok = match s.len() {
            2 => c.in_channels == 1 && s == [c.n_nodes, c.in_steps],
            3 => s == [c.in_channels, c.n_nodes, c.in_steps],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape {
                op: "stgnn input",
                lhs: s.to_vec(),
                rhs: vec![c.in_channels, c.n_nodes, c.in_steps],
            });
        }
        input
            .clone()
            .reshape(&[1, c.in_channels, c.n_nodes, c.in_steps])
    }

    /// One window: `[nodes, T_in]` (or `[C, nodes, T_in]`) to `[nodes, T_out]`.
    pub fn forward(&self, input: &Tensor, graph: &GraphSpec) -> Result<Tensor> {
        let x = self.as_batch(input)?;
        let out = self.forward_batch(&x, &support_tensor(graph)?)?;
        out.reshape(&[self.config.n_nodes, self.config.out_steps])
    }

    /// `[B, C, N, T_in]` to `[B, N, T_out]`, without recording gradients.
    pub fn forward_batch(&self, input: &Tensor, support: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false)?;
        let out = forward_vars(
            &self.config,
            &p,
            "",
            tape.constant(input.clone()),
            tape.constant(support.clone()),
        )?;
        Ok(out.prediction.value())
    }

    /// Feature map of one window. Requires a frozen model.
    pub fn extract_features(&self, input: &Tensor, graph: &GraphSpec, source: FlowKind) -> Result<FeatureMap> {
        let x = self.as_batch(input)?;
        let f = self.extract_features_batch(&x, &support_tensor(graph)?)?;
        let s = f.shape().to_vec();
        Ok(FeatureMap {
            values: f.reshape(&s[1..])?,
            source,
            node_ids: graph.node_ids().to_vec(),
        })
    }

    /// `[B, C, N, T_in]` to `[B, K, N, D]`. Requires a frozen model.
    pub fn extract_features_batch(&self, input: &Tensor, support: &Tensor) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        let tape = Tape::new();
        let p = self.bind(&tape, false)?;
        let out = forward_vars(
            &self.config,
            &p,
            "",
            tape.constant(input.clone()),
            tape.constant(support.clone()),
        )?;
        debug_assert_eq!(tape.recorded_ops(), 0);
        Ok(out.features.value())
    }

    /// Adaptive adjacency `[N, N]`, or `None` when disabled.
    pub fn adaptive_matrix(&self) -> Result<Option<Tensor>> {
        if !self.config.use_adaptive_adjacency {
            return Ok(None);
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(Some(adaptive_adjacency(p["emb.src"], p["emb.dst"])?.value()))
    }

    /// Same network with nodes reordered: new node `k` is old node `perm[k]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<StgnnModel> {
        let n = self.config.n_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidData(format!("not a permutation of {n} nodes: {perm:?}")));
        }
        let mut out = self.clone();
        for name in ["emb.src", "emb.dst"] {
            if let Some(t) = out.params.get_mut(name) {
                let e = t.shape()[1];
                let old = t.data().to_vec();
                for (k, &src) in perm.iter().enumerate() {
                    t.data_mut()[k * e..(k + 1) * e].copy_from_slice(&old[src * e..(src + 1) * e]);
                }
            }
        }
        Ok(out)
    }

    /// Checkpoint with the config (and an optional normaliser) embedded.
    pub fn to_checkpoint(&self, fingerprint: &str, norm: Option<&Normalizer>, extra: &KvConfig) -> Checkpoint {
        let mut meta = extra.clone();
        meta.merge_section("stgnn", &self.config.to_kv());
        meta.set("frozen", self.frozen);
        let mut params = ParamSet::new();
        params.extend_prefixed("model.", &self.params);
        if let Some(nm) = norm {
            let n = nm.n_nodes();
            params.insert("norm.mean", Tensor::from_parts(vec![n], nm.per_node_mean.clone()));
            params.insert("norm.std", Tensor::from_parts(vec![n], nm.per_node_std.clone()));
        }
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            metadata: meta.to_text(),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(StgnnModel, Option<Normalizer>, KvConfig)> {
        let meta = KvConfig::parse(&ck.metadata)?;
        let cfg = StgnnConfig::from_kv(&meta.section("stgnn"))?;
        let mut model = StgnnModel::from_params(cfg, ck.params.strip_prefix("model."))?;
        if meta.get_or("frozen", false)? {
            model.freeze();
        }
        let norm = match (ck.params.get("norm.mean"), ck.params.get("norm.std")) {
            (Some(m), Some(s)) => Some(Normalizer {
                per_node_mean: m.data().to_vec(),
                per_node_std: s.data().to_vec(),
                epsilon: Normalizer::DEFAULT_EPSILON,
                degenerate: s
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v <= Normalizer::DEFAULT_EPSILON)
                    .map(|(i, _)| i)
                    .collect(),
            }),
            _ => None,
        };
        Ok((model, norm, meta))
    }
}
