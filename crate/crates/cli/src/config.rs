//! The resolved run configuration: defaults, overridden by a JSON config
//! file, overridden by command-line flags. The resolved record is echoed
//! verbatim into every output artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pointkey_core::loss::LossConfig;
use pointkey_core::metrics::MetricConfig;
use pointkey_core::model::NetworkConfig;
use pointkey_core::train::{AblationMask, Objective, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NetSection {
    pub preset: String,
    pub n_points: usize,
    pub n_keypoints: usize,
    pub feat_dim: Option<usize>,
    pub hidden_dims: Option<Vec<usize>>,
    pub res_dim: Option<usize>,
    pub input_transform: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            n_points: 1024,
            n_keypoints: 10,
            feat_dim: None,
            hidden_dims: None,
            res_dim: None,
            input_transform: true,
        }
    }
}

impl NetSection {
    pub fn resolve(&self) -> Result<NetworkConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => NetworkConfig::desk_scale(),
            "paper" => NetworkConfig::paper_scale(),
            // compact: sized so a full desk-scale run fits a small CPU
            "compact" => NetworkConfig {
                n_points: 1024,
                n_keypoints: 10,
                feat_dim: 96,
                hidden_dims: vec![32, 64],
                res_dim: 48,
                input_transform: true,
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown net preset '{other}' (desk, paper, compact)"
                )))
            }
        };
        cfg.n_points = self.n_points;
        cfg.n_keypoints = self.n_keypoints;
        if let Some(m) = self.feat_dim {
            cfg.feat_dim = m;
        }
        if let Some(h) = &self.hidden_dims {
            cfg.hidden_dims = h.clone();
        }
        if let Some(r) = self.res_dim {
            cfg.res_dim = r;
        }
        cfg.input_transform = self.input_transform;
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossSection {
    pub tau1: f64,
    pub w_sep: f64,
    pub w_sh: f64,
    pub w_vol: f64,
    pub w_ovr: f64,
    pub w_con: f64,
    pub w_pose: f64,
    pub sep_floor: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::default();
        Self {
            tau1: c.tau1,
            w_sep: c.w_sep,
            w_sh: c.w_sh,
            w_vol: c.w_vol,
            w_ovr: c.w_ovr,
            w_con: c.w_con,
            w_pose: c.w_pose,
            sep_floor: c.sep_floor,
            smooth_l1_beta: c.smooth_l1_beta,
        }
    }
}

impl LossSection {
    pub fn resolve(&self) -> LossConfig {
        LossConfig {
            tau1: self.tau1,
            w_sep: self.w_sep,
            w_sh: self.w_sh,
            w_vol: self.w_vol,
            w_ovr: self.w_ovr,
            w_con: self.w_con,
            w_pose: self.w_pose,
            sep_floor: self.sep_floor,
            smooth_l1_beta: self.smooth_l1_beta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationSection {
    pub separation: bool,
    pub shape: bool,
    pub volume: bool,
    pub overlap: bool,
    pub consistency: bool,
    pub pose: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            separation: true,
            shape: true,
            volume: true,
            overlap: true,
            consistency: true,
            pose: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// "sc3k" for the full individual losses, "chamfer" for the ablation
    /// baseline.
    pub objective: String,
    pub loss: LossSection,
    pub ablation: AblationSection,
    pub grad_clip: Option<f64>,
    pub fresh_rotations: bool,
    pub skip_gradcheck: bool,
    pub deterministic: bool,
    pub tape_pairs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            objective: "sc3k".into(),
            loss: LossSection::default(),
            ablation: AblationSection::default(),
            grad_clip: None,
            fresh_rotations: false,
            skip_gradcheck: false,
            deterministic: false,
            tape_pairs: 8,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let objective = match self.objective.as_str() {
            "sc3k" => Objective::Standard,
            "chamfer" => Objective::Chamfer,
            other => {
                return Err(CliError::Config(format!(
                    "unknown objective '{other}' (sc3k, chamfer)"
                )))
            }
        };
        let cfg = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            loss: self.loss.resolve(),
            ablation: AblationMask {
                separation: self.ablation.separation,
                shape: self.ablation.shape,
                volume: self.ablation.volume,
                overlap: self.ablation.overlap,
                consistency: self.ablation.consistency,
                pose: self.ablation.pose,
            },
            objective,
            grad_clip: self.grad_clip,
            fresh_rotations: self.fresh_rotations,
            skip_gradcheck: self.skip_gradcheck,
            deterministic: self.deterministic,
            tape_pairs: self.tape_pairs,
        };
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricSection {
    pub tau2: f64,
    pub tau2_alt: f64,
    pub coverage_gate: f64,
    pub das_reference: Option<usize>,
    pub me_copies: usize,
    pub tau2_sweep: Vec<f64>,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            tau2: 0.1,
            tau2_alt: 0.05,
            coverage_gate: 2.0,
            das_reference: None,
            me_copies: 8,
            tau2_sweep: vec![0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2],
        }
    }
}

impl MetricSection {
    pub fn resolve(&self) -> MetricConfig {
        MetricConfig {
            tau2: self.tau2,
            tau2_alt: self.tau2_alt,
            coverage_gate: self.coverage_gate,
            das_reference: self.das_reference,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataSection {
    pub count: usize,
    pub n_points: usize,
    pub seed: u64,
    pub poses_per_object: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub noise_scales: Vec<f64>,
    pub ds_ratios: Vec<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 200,
            n_points: 1024,
            seed: 0,
            poses_per_object: pointkey_core::data::DEFAULT_POSES_PER_OBJECT,
            val_fraction: 0.2,
            test_fraction: 0.2,
            noise_scales: pointkey_core::data::default_noise_scales(),
            ds_ratios: pointkey_core::data::default_ds_ratios(),
        }
    }
}

/// The full resolved configuration record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetSection,
    pub train: TrainSection,
    pub metric: MetricSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

/// The code/version stamp embedded in artifacts.
pub fn version_stamp() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
