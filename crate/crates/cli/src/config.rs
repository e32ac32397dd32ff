//! Run configuration: CLI flags backed by an optional JSON config file with
//! the same keys. Flags win over the file, the file wins over defaults.
//! Unknown keys in the file are rejected.

use anyhow::{Context, Result};
use graspdiff_core::diffusion::NoiseSchedule;
use graspdiff_core::eval::GripperSpec;
use graspdiff_core::model::ModelConfig;
use graspdiff_core::train::TrainConfig;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schedule: Option<SchedulePatch>,
    pub train: Option<TrainPatch>,
    pub model: Option<ModelPatch>,
    pub gripper: Option<GripperPatch>,
    pub eval: Option<EvalPatch>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePatch {
    pub levels: Option<usize>,
    pub sigma_max: Option<f64>,
    pub sigma_min: Option<f64>,
    pub eta: Option<f64>,
    pub steps_per_level: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_final_factor: Option<f64>,
    pub lambda_sdf: Option<f64>,
    pub sdf_points_per_step: Option<usize>,
    pub scaled_loss: Option<bool>,
    pub cloud_points: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPatch {
    pub resolution: Option<usize>,
    pub feat_dim: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperPatch {
    pub finger_length: Option<f64>,
    pub max_opening: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPatch {
    pub friction: Option<f64>,
    pub fc_eps: Option<f64>,
    pub fc_delta: Option<f64>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Schedule resolution order: flag > config file > checkpoint sigmas >
/// built-in defaults.
#[allow(clippy::too_many_arguments)]
pub fn resolve_schedule(
    patch: Option<&SchedulePatch>,
    levels: Option<usize>,
    sigma_max: Option<f64>,
    sigma_min: Option<f64>,
    eta: Option<f64>,
    steps_per_level: Option<usize>,
    checkpoint_sigmas: Option<&[f64]>,
) -> NoiseSchedule {
    let default = NoiseSchedule::default();
    let base_sigmas = checkpoint_sigmas
        .filter(|s| !s.is_empty())
        .map(|s| s.to_vec())
        .unwrap_or(default.sigmas.clone());
    let p = patch.cloned().unwrap_or_default();
    let levels = levels.or(p.levels);
    let sigma_max = sigma_max.or(p.sigma_max);
    let sigma_min = sigma_min.or(p.sigma_min);
    let eta = eta.or(p.eta).unwrap_or(default.eta);
    let steps = steps_per_level
        .or(p.steps_per_level)
        .unwrap_or(default.steps_per_level);
    // Any sigma knob regenerates the geometric ladder.
    let sigmas = if levels.is_some() || sigma_max.is_some() || sigma_min.is_some() {
        let l = levels.unwrap_or(base_sigmas.len());
        let hi = sigma_max.unwrap_or(*base_sigmas.first().unwrap());
        let lo = sigma_min.unwrap_or(*base_sigmas.last().unwrap());
        NoiseSchedule::geometric(l, hi, lo, eta, steps).sigmas
    } else {
        base_sigmas
    };
    NoiseSchedule {
        sigmas,
        eta,
        steps_per_level: steps,
    }
}

pub fn resolve_train(patch: Option<&TrainPatch>, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(p) = patch {
        if let Some(v) = p.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = p.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = p.lr {
            cfg.lr = v;
        }
        if let Some(v) = p.lr_final_factor {
            cfg.lr_final_factor = v;
        }
        if let Some(v) = p.lambda_sdf {
            cfg.lambda_sdf = v;
        }
        if let Some(v) = p.sdf_points_per_step {
            cfg.sdf_points_per_step = v;
        }
        if let Some(v) = p.scaled_loss {
            cfg.scaled_loss = v;
        }
        if let Some(v) = p.cloud_points {
            cfg.cloud_points = v;
        }
        if let Some(v) = p.validation_fraction {
            cfg.validation_fraction = v;
        }
        if let Some(v) = p.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
    cfg
}

pub fn resolve_model(
    patch: Option<&ModelPatch>,
    resolution: Option<usize>,
    feat_dim: Option<usize>,
) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    if let Some(p) = patch {
        if let Some(v) = p.resolution {
            cfg.resolution = v;
        }
        if let Some(v) = p.feat_dim {
            cfg.feat_dim = v;
        }
    }
    if let Some(v) = resolution {
        cfg.resolution = v;
    }
    if let Some(v) = feat_dim {
        cfg.feat_dim = v;
    }
    cfg
}

pub fn resolve_gripper(patch: Option<&GripperPatch>) -> GripperSpec {
    let mut g = GripperSpec::default();
    if let Some(p) = patch {
        if let Some(v) = p.finger_length {
            g.finger_length = v;
        }
        if let Some(v) = p.max_opening {
            g.max_opening = v;
        }
    }
    g
}
