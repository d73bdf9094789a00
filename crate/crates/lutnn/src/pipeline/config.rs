//! Pipeline configuration: a versioned JSON schema describing the network,
//! dataset, training schedule, pruning target, and expansion parameters.
//! Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::OptimizerKind;
use crate::lut::{feasible, ReconnectWeights};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub expand: ExpandConfig,
    #[serde(default = "default_out_dir")]
    pub output_dir: PathBuf,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_seed() -> u64 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        dir: PathBuf,
        /// Optional caps for reduced runs.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        train: usize,
        test: usize,
        features: usize,
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_noise() -> f64 {
    0.4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Sample shape: [features] for dense stacks, [c, h, w] for CNNs.
    pub input: Vec<usize>,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerConfig {
    Dense {
        outputs: usize,
    },
    Conv2d {
        outputs: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        same_padding: bool,
    },
    Maxpool {
        window: usize,
    },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Per-phase learning-rate multipliers.
    #[serde(default = "default_phase_lr")]
    pub phase_lr_scale: [f64; 3],
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs for the three phases.
    #[serde(default = "default_epochs")]
    pub epochs: [usize; 3],
    /// Sparsification regularizer factor, applied in phase 1.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_lr() -> f64 {
    1e-3
}

fn default_phase_lr() -> [f64; 3] {
    // retraining phases refine an already-good solution; the expansion
    // phase in particular overfits quickly at full rate
    [1.0, 0.5, 0.1]
}

fn default_batch() -> usize {
    100
}

fn default_epochs() -> [usize; 3] {
    // a 10x scale-down of the full schedule; the full values remain
    // selectable by flag or config
    [20, 5, 20]
}

fn default_lambda() -> f64 {
    5e-7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Target density; a threshold is searched to reach it.
    #[serde(default)]
    pub density: Option<f64>,
    /// Explicit threshold; overrides the density search.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Which layers the single threshold applies to.
    #[serde(default)]
    pub scope: PruneScope,
    /// Per-layer thresholds (compute-layer index to threshold), overriding
    /// the global value where present.
    #[serde(default)]
    pub per_layer_threshold: Vec<(usize, f64)>,
}

/// Pruning scope. The benchmark protocol prunes exactly the layers that
/// get expanded, leaving the rest at full density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneScope {
    #[default]
    All,
    Targets,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            density: Some(1.0),
            threshold: None,
            scope: PruneScope::All,
            per_layer_threshold: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub p: usize,
    #[serde(default = "default_tile")]
    pub t_i: usize,
    #[serde(default = "default_tile")]
    pub t_o: usize,
    /// Compute-layer indices to expand (dense/conv positions in the layer
    /// list). Empty means every layer except the first.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "default_reconnect")]
    pub reconnect: ReconnectWeights,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        ExpandConfig {
            k: 4,
            p: 0,
            t_i: 1,
            t_o: 1,
            layers: Vec::new(),
            reconnect: ReconnectWeights::Original,
        }
    }
}

fn default_k() -> usize {
    4
}

fn default_tile() -> usize {
    1
}

fn default_reconnect() -> ReconnectWeights {
    ReconnectWeights::Original
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compute-layer indices (dense/conv entries) in layer-list order.
    pub fn compute_layers(&self) -> Vec<usize> {
        self.network
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !matches!(l, LayerConfig::Maxpool { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Expansion targets: configured list, or every compute layer except
    /// the first.
    pub fn expand_targets(&self) -> Vec<usize> {
        if !self.expand.layers.is_empty() {
            return self.expand.layers.clone();
        }
        self.compute_layers().into_iter().skip(1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.network.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        if !matches!(self.network.layers.last(), Some(LayerConfig::Dense { .. })) {
            return Err(Error::config("the final layer must be dense (class scores)"));
        }
        // Retraining phases may be skipped (zero epochs); initial training
        // cannot.
        if self.train.epochs[0] == 0 {
            return Err(Error::config("phase-1 epochs must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.train.lambda < 0.0 {
            return Err(Error::config("regularization factor must be nonnegative"));
        }
        if let Some(d) = self.prune.density {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::config("prune density must be in (0, 1]"));
            }
        }
        if !feasible(self.expand.k, self.expand.p)? {
            return Err(Error::config(format!(
                "expansion (k={}, p={}) is infeasible",
                self.expand.k, self.expand.p
            )));
        }
        let compute = self.compute_layers();
        for &t in &self.expand.layers {
            if !compute.contains(&t) {
                return Err(Error::config(format!(
                    "expansion target {t} is not a compute layer"
                )));
            }
        }
        Ok(())
    }
}
