//! Run configuration: one JSON document that pins every toggle, size,
//! and hyperparameter of a training/evaluation run. The four ablation
//! axes (refinement chain, bin head, latent-std normalization,
//! embedding regularization) each map to one field so that published
//! ablation rows become constructible configs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::depth::DepthRange;
use crate::error::{Error, Result};
use crate::imafr::ChainDirection;
use crate::optim::AdamConfig;
use crate::text::AggregationStrategy;

/// Depth-range preset; fixes the far plane of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Indoor,
    Outdoor,
}

impl Preset {
    pub fn d_max(self) -> f64 {
        match self {
            Preset::Indoor => 10.0,
            Preset::Outdoor => 80.0,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(Preset::Indoor),
            "outdoor" => Ok(Preset::Outdoor),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (expected indoor or outdoor)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Indoor => "indoor",
            Preset::Outdoor => "outdoor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImafrConfig {
    pub enabled: bool,
    pub direction: ChainDirection,
    pub kernel: usize,
    pub reduction: usize,
}

impl Default for ImafrConfig {
    fn default() -> Self {
        ImafrConfig {
            enabled: true,
            direction: ChainDirection::FineToCoarse,
            kernel: 7,
            reduction: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Stage widths in emission order, finest level first.
    pub channels: Vec<usize>,
    /// Seeds the extractor's weight init independently of the run seed:
    /// the stub stands in for a pretrained encoder, so its identity
    /// should not shift when the run seed does.
    pub seed: u64,
    /// Latent-std normalization toggle.
    pub std_enabled: bool,
    /// GroupNorm group count for every conv block in the model.
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: vec![32, 64, 96, 128], seed: 0, std_enabled: true, groups: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub strategy: AggregationStrategy,
    /// Hidden width of the residual adapter.
    pub hidden: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { strategy: AggregationStrategy::V, hidden: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub bins_enabled: bool,
    pub num_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Channel width of the decoder trunk.
    pub width: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { bins_enabled: true, num_bins: 64, d_min: 0.001, d_max: 10.0, width: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: crate::depth::SILOG_LAMBDA, alpha: crate::depth::SILOG_ALPHA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, steps: 500, batch: 4 }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
    pub width: usize,
    pub height: usize,
    /// Embedding rows per scene.
    pub k: usize,
    /// Embedding dimension.
    pub dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_count: 48, eval_count: 16, width: 64, height: 64, k: 8, dim: 64 }
    }
}

/// Rows of the ablation grid this artifact can reproduce, by their
/// published numbering.
pub const ABLATION_ROWS: [u8; 7] = [1, 2, 4, 9, 10, 11, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub imafr: ImafrConfig,
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            preset: Preset::Indoor,
            imafr: ImafrConfig::default(),
            backbone: BackboneConfig::default(),
            text: TextConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Default config with the far plane moved to the preset's range.
    pub fn for_preset(preset: Preset) -> Self {
        let mut cfg = RunConfig { preset, ..RunConfig::default() };
        cfg.head.d_max = preset.d_max();
        cfg
    }

    /// The (refinement, bins, std, regularization) toggle tuple.
    pub fn toggles(&self) -> (bool, bool, bool, AggregationStrategy) {
        (self.imafr.enabled, self.head.bins_enabled, self.backbone.std_enabled, self.text.strategy)
    }

    /// Config for one row of the published ablation grid. Rows outside
    /// the reproducible set are rejected.
    pub fn ablation_row(row: u8) -> Result<Self> {
        use AggregationStrategy::*;
        let (imafr, bins, std, reg) = match row {
            1 => (false, false, false, V),
            2 => (true, false, false, V),
            4 => (true, true, true, V),
            9 => (true, false, true, Vd),
            10 => (true, true, true, Vd),
            11 => (true, true, true, D),
            12 => (true, true, true, I),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "ablation row {other} is not reproducible here (rows {ABLATION_ROWS:?} are)"
                )))
            }
        };
        let mut cfg = RunConfig::default();
        cfg.imafr.enabled = imafr;
        cfg.head.bins_enabled = bins;
        cfg.backbone.std_enabled = std;
        cfg.text.strategy = reg;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head.d_max != self.preset.d_max() {
            return Err(Error::Config(format!(
                "preset {} fixes d_max = {}, config says {}",
                self.preset,
                self.preset.d_max(),
                self.head.d_max
            )));
        }
        DepthRange::new(self.head.d_min, self.head.d_max)?;
        if self.imafr.kernel.is_multiple_of(2) || self.imafr.kernel == 0 {
            return Err(Error::Config(format!(
                "attention kernel must be odd, got {}",
                self.imafr.kernel
            )));
        }
        if self.imafr.reduction == 0 {
            return Err(Error::Config("channel reduction must be positive".into()));
        }
        if self.backbone.channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.backbone.groups == 0 {
            return Err(Error::Config("group count must be positive".into()));
        }
        if self.head.num_bins == 0 {
            return Err(Error::Config("bin count must be positive".into()));
        }
        if self.head.width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        if self.text.hidden == 0 {
            return Err(Error::Config("adapter hidden width must be positive".into()));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda <= 1.0 && self.loss.alpha > 0.0) {
            return Err(Error::Config(format!(
                "loss settings out of range: lambda {}, alpha {}",
                self.loss.lambda, self.loss.alpha
            )));
        }
        self.train.adam().validate()?;
        if self.train.steps == 0 || self.train.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return Err(Error::Config("both splits must be non-empty".into()));
        }
        // The stub halves resolution per stage after a 4x patchify; the
        // latent must stay at least one pixel at the coarsest stage.
        let divisor = 4usize << (self.backbone.channels.len() - 1);
        if !self.data.width.is_multiple_of(divisor) || !self.data.height.is_multiple_of(divisor) {
            return Err(Error::Config(format!(
                "image extents {}x{} must be divisible by {divisor} for {} stages",
                self.data.width,
                self.data.height,
                self.backbone.channels.len()
            )));
        }
        self.data_spec().validate()?;
        Ok(())
    }

    /// The generation spec this run draws its samples from.
    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            seed: self.seed,
            width: self.data.width,
            height: self.data.height,
            range: DepthRange { d_min: self.head.d_min, d_max: self.head.d_max },
            k: self.data.k,
            dim: self.data.dim,
        }
    }

    pub fn range(&self) -> DepthRange {
        DepthRange { d_min: self.head.d_min, d_max: self.head.d_max }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json_pretty())
            .map_err(|e| Error::io(path.as_ref(), e))
    }
}
