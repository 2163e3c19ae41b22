//! Run configuration: strict JSON with defaults for everything the paper
//! leaves unstated. Unknown keys are rejected so hyperparameter typos fail
//! loudly instead of silently training the wrong model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataGenConfig;
use crate::error::{Error, Result};
use crate::model::{BhivaeArch, BlockLayout, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_step_size")]
    pub step_size: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
}

fn d_step_size() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: d_step_size(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            epsilon: d_epsilon(),
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "optimizer.step_size must be positive, got {}",
                self.step_size
            )));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "optimizer.{key} must lie in [0, 1), got {v}"
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "optimizer.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default = "d_bins")]
    pub bins: usize,
    #[serde(default = "d_votes")]
    pub votes: usize,
    #[serde(default = "d_pairs")]
    pub pairs: usize,
}

fn d_bins() -> usize {
    20
}
fn d_votes() -> usize {
    200
}
fn d_pairs() -> usize {
    16
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            bins: d_bins(),
            votes: d_votes(),
            pairs: d_pairs(),
        }
    }
}

/// Network width overrides; anything absent falls back to desk-scale sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    /// Hidden widths per encoder layer; default `[256,128]` per layer
    /// (or `[512,256]` for 28x28 inputs).
    #[serde(default)]
    pub enc_hidden: Option<Vec<Vec<usize>>>,
    #[serde(default = "d_merge_dim")]
    pub merge_dim: usize,
    #[serde(default = "d_dec_hidden")]
    pub dec_hidden: Vec<usize>,
    #[serde(default = "d_disc_hidden")]
    pub disc_hidden: Vec<usize>,
}

fn d_merge_dim() -> usize {
    32
}
fn d_dec_hidden() -> Vec<usize> {
    vec![64]
}
fn d_disc_hidden() -> Vec<usize> {
    vec![32]
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            enc_hidden: None,
            merge_dim: d_merge_dim(),
            dec_hidden: d_dec_hidden(),
            disc_hidden: d_disc_hidden(),
        }
    }
}

/// Default encoder trunk widths, scaled to the input size.
fn default_enc_hidden(data_dim: usize) -> Vec<usize> {
    if data_dim == 28 * 28 {
        vec![512, 256]
    } else {
        vec![256, 128]
    }
}

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    /// A directory holding images.idx + factors.json.
    #[serde(rename = "dir")]
    Dir(PathBuf),
    /// Generate mini-dSprites in memory from a spec.
    #[serde(rename = "generate")]
    Generate(DataGenConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub layout: BlockLayout,
    pub dataset: DatasetSource,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_total_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub model: ModelOptions,
    /// Supervision target per layer, by factor name (supervised mode).
    /// Defaults to the scale/pos_x/shape ladder when absent.
    #[serde(default)]
    pub layer_factors: Option<Vec<String>>,
    /// Where `train` writes checkpoint + trace; defaults next to the config.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn d_beta() -> f64 {
    10.0
}
fn d_gamma() -> f64 {
    3.0
}
fn d_rho() -> f64 {
    0.5
}
fn d_batch_size() -> usize {
    128
}
fn d_total_steps() -> u64 {
    5000
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        // serde fills the struct without invariant checks; re-run them.
        BlockLayout::new(
            self.layout.s_dims.clone(),
            self.layout.h_dims.clone(),
            self.layout.c_dim,
        )
        .map_err(|e| Error::Config(format!("layout: {e}")))?;
        for (key, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{key} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.rho.is_finite() && self.rho.abs() < 1.0) {
            return Err(Error::Config(format!("rho must satisfy |rho| < 1, got {}", self.rho)));
        }
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.metrics.bins < 2 {
            return Err(Error::Config(format!(
                "metrics.bins must be at least 2, got {}",
                self.metrics.bins
            )));
        }
        if self.metrics.votes < 2 || self.metrics.pairs == 0 {
            return Err(Error::Config(
                "metrics.votes must be ≥ 2 and metrics.pairs ≥ 1".into(),
            ));
        }
        if let Some(names) = &self.layer_factors {
            if names.len() != self.layout.num_layers() {
                return Err(Error::Config(format!(
                    "layer_factors names {} layers, layout has {}",
                    names.len(),
                    self.layout.num_layers()
                )));
            }
        }
        if let Some(enc) = &self.model.enc_hidden {
            if enc.len() != self.layout.num_layers() {
                return Err(Error::Config(format!(
                    "model.enc_hidden has {} entries, layout has {} layers",
                    enc.len(),
                    self.layout.num_layers()
                )));
            }
        }
        Ok(())
    }

    /// Concrete architecture for a dataset of the given flattened image size.
    /// `class_counts` is required in supervised mode (one per layer).
    pub fn arch(&self, data_dim: usize, class_counts: Vec<usize>) -> Result<BhivaeArch> {
        let l = self.layout.num_layers();
        let arch = BhivaeArch {
            layout: self.layout.clone(),
            data_dim,
            mode: self.mode,
            enc_hidden: self
                .model
                .enc_hidden
                .clone()
                .unwrap_or_else(|| vec![default_enc_hidden(data_dim); l]),
            merge_dim: self.model.merge_dim,
            dec_hidden: self.model.dec_hidden.clone(),
            class_counts,
            disc_hidden: self.model.disc_hidden.clone(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Parse and validate a JSON run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
