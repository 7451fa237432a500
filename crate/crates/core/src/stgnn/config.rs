use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Shape and depth of a spatio-temporal graph network.
///
/// Each layer shrinks the temporal axis by `dilation * (kernel_size - 1)`;
/// what remains after the last layer is the feature width `D`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StgnnConfig {
    pub n_nodes: usize,
    pub in_channels: usize,
    pub in_steps: usize,
    pub out_steps: usize,
    /// Feature-map count K (residual and skip width).
    pub channels: usize,
    pub layers: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub use_adaptive_adjacency: bool,
    pub embedding_dim: usize,
    pub head_hidden: usize,
}

impl StgnnConfig {
    /// K=16, L=4, kernel 2, dilations 1,2,2,4 (receptive field 10 for T_in = 12).
    pub fn with_defaults(n_nodes: usize, in_steps: usize, out_steps: usize) -> Self {
        StgnnConfig {
            n_nodes,
            in_channels: 1,
            in_steps,
            out_steps,
            channels: 16,
            layers: 4,
            kernel_size: 2,
            dilations: vec![1, 2, 2, 4],
            use_adaptive_adjacency: true,
            embedding_dim: 10,
            head_hidden: 64,
        }
    }

    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|d| d * (self.kernel_size.saturating_sub(1)))
            .sum::<usize>()
    }

    /// Temporal width D of the feature map.
    pub fn feature_width(&self) -> usize {
        self.in_steps + 1 - self.receptive_field()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_nodes == 0 || self.in_channels == 0 || self.out_steps == 0 || self.in_steps == 0 {
            return fail("stgnn dimensions must be positive".into());
        }
        if self.channels == 0 || self.layers == 0 {
            return fail(format!("need K >= 1 and L >= 1, got K={} L={}", self.channels, self.layers));
        }
        if self.kernel_size < 1 || self.dilations.iter().any(|&d| d == 0) {
            return fail("kernel size and dilations must be positive".into());
        }
        if self.dilations.len() != self.layers {
            return fail(format!(
                "{} dilations given for {} layers",
                self.dilations.len(),
                self.layers
            ));
        }
        if self.receptive_field() > self.in_steps {
            return fail(format!(
                "receptive field {} exceeds input steps {} (kernel {}, dilations {:?})",
                self.receptive_field(),
                self.in_steps,
                self.kernel_size,
                self.dilations
            ));
        }
        if self.use_adaptive_adjacency && self.embedding_dim == 0 {
            return fail("adaptive adjacency needs embedding_dim >= 1".into());
        }
        if self.head_hidden == 0 {
            return fail("head_hidden must be positive".into());
        }
        Ok(())
    }

    /// Overrides from a config section; absent keys keep the current value.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        self.channels = kv.get_or("channels", self.channels)?;
        self.kernel_size = kv.get_or("kernel_size", self.kernel_size)?;
        if let Some(d) = kv.get_list("dilations")? {
            self.dilations = d;
        }
        self.layers = kv.get_or("layers", self.dilations.len())?;
        self.use_adaptive_adjacency = kv.get_or("adaptive_adjacency", self.use_adaptive_adjacency)?;
        self.embedding_dim = kv.get_or("embedding_dim", self.embedding_dim)?;
        self.head_hidden = kv.get_or("head_hidden", self.head_hidden)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_nodes", self.n_nodes);
        kv.set("in_channels", self.in_channels);
        kv.set("in_steps", self.in_steps);
        kv.set("out_steps", self.out_steps);
        kv.set("channels", self.channels);
        kv.set("layers", self.layers);
        kv.set("kernel_size", self.kernel_size);
        kv.set(
            "dilations",
            self.dilations.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.set("adaptive_adjacency", self.use_adaptive_adjacency);
        kv.set("embedding_dim", self.embedding_dim);
        kv.set("head_hidden", self.head_hidden);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let need = |k: &str| -> Result<usize> {
            kv.get(k)?
                .ok_or_else(|| Error::Config(format!("stgnn config missing `{k}`")))
        };
        let mut cfg = StgnnConfig::with_defaults(need("n_nodes")?, need("in_steps")?, need("out_steps")?);
        cfg.in_channels = kv.get_or("in_channels", 1)?;
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
