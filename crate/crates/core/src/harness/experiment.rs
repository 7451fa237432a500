use chrono::NaiveDate;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::stgnn::{StgnnConfig, TrainConfig};

/// Settings of a leave-one-camera-out experiment.
///
/// Keys: `task.input_steps`, `task.output_steps`, `split` (train,val,test
/// ratios), `horizons`, `seeds` (list), `graph.sigma_m`, `graph.threshold`,
/// `arms.with`, `arms.without`, `workers`, `day_masking`, `plot.camera`,
/// `plot.day`, and the component sections `stage1.*`, `stage1.train.*`,
/// `stage2.*`, `stage2.train.*`, `baseline.*`, `baseline.train.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub input_steps: usize,
    pub output_steps: usize,
    pub split: (f64, f64, f64),
    /// Steps ahead at which metrics are read off, 1-based.
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sigma_m: f64,
    pub threshold: f64,
    pub arm_with: String,
    pub arm_without: String,
    /// Worker threads for folds; 0 uses the global pool.
    pub workers: usize,
    pub day_masking: bool,
    pub plot_camera: Option<String>,
    pub plot_day: Option<NaiveDate>,
    pub stage1: KvConfig,
    pub stage1_train: TrainConfig,
    pub stage2: KvConfig,
    pub stage2_train: TrainConfig,
    pub baseline: KvConfig,
    pub baseline_train: TrainConfig,
    raw: KvConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_kv(&KvConfig::new()).expect("defaults are valid")
    }
}

const COMPONENT_SECTIONS: [&str; 3] = ["stage1", "stage2", "baseline"];

fn component(kv: &KvConfig, name: &str) -> KvConfig {
    let section = kv.section(name);
    let mut out = KvConfig::new();
    for k in section.keys().filter(|k| !k.starts_with("train.")) {
        out.set(k, section.raw(k).unwrap_or_default());
    }
    out
}

fn train_config(kv: &KvConfig, name: &str) -> Result<TrainConfig> {
    let mut tc = TrainConfig::default();
    tc.apply_kv(&kv.section(&format!("{name}.train")))?;
    Ok(tc)
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let split = kv.get_list::<f64>("split")?.unwrap_or_else(|| vec![0.7, 0.1, 0.2]);
        if split.len() != 3 {
            return Err(Error::Config(format!("split needs three ratios, got {split:?}")));
        }
        let cfg = ExperimentConfig {
            input_steps: kv.get_or("task.input_steps", 12)?,
            output_steps: kv.get_or("task.output_steps", 12)?,
            split: (split[0], split[1], split[2]),
            horizons: kv.get_list("horizons")?.unwrap_or_else(|| vec![3, 6, 12]),
            seeds: kv.get_list("seeds")?.unwrap_or_else(|| (0..10).collect()),
            sigma_m: kv.get_or("graph.sigma_m", 500.0)?,
            threshold: kv.get_or("graph.threshold", 0.1)?,
            arm_with: kv.get_or("arms.with", "tel2veh".to_string())?,
            arm_without: kv.get_or("arms.without", "gct-only".to_string())?,
            workers: kv.get_or("workers", 0)?,
            day_masking: kv.get_or("day_masking", true)?,
            plot_camera: kv.get("plot.camera")?,
            plot_day: kv.get("plot.day")?,
            stage1: component(kv, "stage1"),
            stage1_train: train_config(kv, "stage1")?,
            stage2: component(kv, "stage2"),
            stage2_train: train_config(kv, "stage2")?,
            baseline: component(kv, "baseline"),
            baseline_train: train_config(kv, "baseline")?,
            raw: kv.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_steps == 0 || self.output_steps == 0 {
            return Err(Error::Config("task steps must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0 || h > self.output_steps) {
            return Err(Error::Config(format!(
                "horizons {:?} must lie in 1..={}",
                self.horizons, self.output_steps
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if self.arm_with == self.arm_without {
            return Err(Error::Config("the two arms must differ".into()));
        }
        Ok(())
    }

    /// The key/value form this config was read from, with overrides applied.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.raw.clone();
        kv.set("task.input_steps", self.input_steps);
        kv.set("task.output_steps", self.output_steps);
        kv.set("split", format!("{},{},{}", self.split.0, self.split.1, self.split.2));
        kv.set("horizons", join(&self.horizons));
        kv.set("seeds", join(&self.seeds));
        kv.set("graph.sigma_m", self.sigma_m);
        kv.set("graph.threshold", self.threshold);
        kv.set("arms.with", &self.arm_with);
        kv.set("arms.without", &self.arm_without);
        kv.set("workers", self.workers);
        kv.set("day_masking", self.day_masking);
        for (name, tc) in COMPONENT_SECTIONS
            .iter()
            .zip([&self.stage1_train, &self.stage2_train, &self.baseline_train])
        {
            kv.merge_section(&format!("{name}.train"), &tc.to_kv());
        }
        kv
    }

    /// Hash of the effective settings; worker count is excluded since it
    /// does not change results.
    pub fn fingerprint(&self) -> String {
        let mut kv = self.to_kv();
        kv.set("workers", 0);
        kv.fingerprint()
    }

    /// Stage-1 extractor for `n_nodes` nodes.
    pub fn stage1_config(&self, n_nodes: usize) -> Result<StgnnConfig> {
        let mut cfg = StgnnConfig::with_defaults(n_nodes, self.input_steps, self.output_steps);
        cfg.apply_kv(&self.stage1)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stage-2 settings for extractors with `channels` maps of width `width`.
    pub fn fusion_config(&self, channels: usize, width: usize, n_nodes: usize) -> Result<FusionConfig> {
        let mut cfg = FusionConfig::new(channels, width, n_nodes, self.output_steps);
        cfg.apply_kv(&self.stage2)?;
        Ok(cfg)
    }

    /// The GCT-only network: the stage-1 architecture with `baseline.*` overrides.
    pub fn baseline_config(&self, n_nodes: usize) -> Result<StgnnConfig> {
        let mut cfg = self.stage1_config(n_nodes)?;
        cfg.apply_kv(&self.baseline)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambda_init(&self) -> Result<f64> {
        self.stage2.get_or("lambda_init", FusionConfig::DEFAULT_LAMBDA)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
