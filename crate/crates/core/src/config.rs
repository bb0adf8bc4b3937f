//! Run configuration: one TOML document with dotted keys.
//!
//! Every field has a default, unknown keys are rejected, and
//! [`RunConfig::from_toml_with_overrides`] applies `key = value` overrides
//! (for example `model.heads = 4`) on top of a file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of cascade stages.
pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub fusion: FusionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// CNN widths at full, half and quarter resolution. The quarter width is
    /// the transformer width.
    pub feature_channels: [usize; 3],
    /// Number of alternations of the global-context and cross-view modules.
    pub transformer_layers: usize,
    pub heads: usize,
    /// Correlation groups per cost volume.
    pub groups: usize,
    pub unet_base_channels: usize,
    pub unet_levels: usize,
    pub norm_eps: f64,
    /// Training resolution (height, width) of the input images; sizes the
    /// positional-encoding table.
    pub image_size: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Depth hypotheses per stage, coarsest first.
    pub hypotheses: [usize; STAGES],
    /// Stage interval as a fraction of the base interval
    /// `(depth_max - depth_min) / (hypotheses[0] - 1)`. The first entry is unused.
    pub interval_ratios: [f64; STAGES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    /// Epochs (1-based) at whose start the learning rate halves.
    pub lr_halving_epochs: Vec<usize>,
    /// Loss weight per stage, coarsest first.
    pub loss_weights: [f64; STAGES],
    pub num_sources: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub num_sources: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub conf_threshold: f64,
    pub reproj_px_threshold: f64,
    pub rel_depth_threshold: f64,
    pub min_consistent_views: usize,
    /// Nearest-neighbour cutoff for accuracy/completeness; defaults to 5% of
    /// the ground-truth bounding-box diagonal.
    pub outlier_dist: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelConfig::default(),
            cascade: CascadeConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: [8, 16, 32],
            transformer_layers: 4,
            heads: 4,
            groups: 8,
            unet_base_channels: 8,
            unet_levels: 2,
            norm_eps: 1e-5,
            image_size: [64, 64],
        }
    }
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            hypotheses: [48, 32, 8],
            interval_ratios: [1.0, 0.5, 0.25],
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            epochs: 16,
            lr_halving_epochs: vec![10, 12, 14],
            loss_weights: [0.5, 1.0, 2.0],
            num_sources: 2,
            max_steps: None,
        }
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { num_sources: 4 }
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.3,
            reproj_px_threshold: 1.0,
            rel_depth_threshold: 0.01,
            min_consistent_views: 2,
            outlier_dist: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale model used for the synthetic overfit experiments.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.feature_channels = [8, 8, 16];
        cfg.cascade.hypotheses = [16, 8, 4];
        cfg.train.epochs = 100;
        cfg.train.lr_halving_epochs = scale_epochs(&[10, 12, 14], 16, cfg.train.epochs);
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then merges each override line (`dotted.key = value`).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for line in overrides {
            let patch: toml::Table = line
                .parse()
                .map_err(|e| Error::Config(format!("override '{line}': {e}")))?;
            merge(&mut table, patch);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.feature_channels.contains(&0) || m.heads == 0 || m.groups == 0 {
            return fail("channel, head and group counts must be positive".into());
        }
        if m.feature_channels[2] % m.heads != 0 {
            return fail(format!(
                "transformer width {} is not divisible by {} heads",
                m.feature_channels[2], m.heads
            ));
        }
        for &c in &m.feature_channels {
            if c % m.groups != 0 {
                return fail(format!("stage width {c} is not divisible by {} groups", m.groups));
            }
        }
        if m.unet_base_channels == 0 {
            return fail("unet_base_channels must be positive".into());
        }
        if m.image_size.iter().any(|&s| s == 0 || s % 4 != 0) {
            return fail(format!("image_size {:?} must be positive multiples of 4", m.image_size));
        }
        if self.cascade.hypotheses.iter().any(|&d| d < 2) {
            return fail("every stage needs at least 2 hypotheses".into());
        }
        if self.cascade.interval_ratios.iter().any(|&r| !(r > 0.0)) {
            return fail("interval ratios must be positive".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0) {
            return fail("train.lr must be positive".into());
        }
        if t.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail("train.betas must lie in [0, 1)".into());
        }
        if t.num_sources == 0 || self.infer.num_sources == 0 {
            return fail("num_sources must be at least 1".into());
        }
        let f = &self.fusion;
        if !(f.conf_threshold >= 0.0 && f.reproj_px_threshold > 0.0 && f.rel_depth_threshold > 0.0) {
            return fail("fusion thresholds must be positive".into());
        }
        if f.min_consistent_views == 0 {
            return fail("fusion.min_consistent_views must be at least 1".into());
        }
        if matches!(f.outlier_dist, Some(d) if !(d > 0.0)) {
            return fail("fusion.outlier_dist must be positive".into());
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.cascade.hypotheses.len()
    }
}

/// Maps epoch milestones of a `from`-epoch schedule onto `to` epochs.
pub fn scale_epochs(milestones: &[usize], from: usize, to: usize) -> Vec<usize> {
    milestones
        .iter()
        .map(|&e| ((e as f64) * to as f64 / from as f64).round().max(1.0) as usize)
        .collect()
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
