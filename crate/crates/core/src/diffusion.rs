//! Annealed Langevin sampling on SE(3): the unconstrained chain, the
//! part-guided max-energy composition over two shape contexts, the naive
//! target-only baseline, and energy thresholding.

use crate::model::{ModelWeights, ShapeContext};
use crate::rng::stream_rng;
use crate::se3::{compose, expmap, random_pose, Pose, PoseBounds, Twist};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Anything that scores a pose at a noise level and yields the
/// left-trivialized energy derivative. Implemented by the learned model
/// bound to a shape context and by the analytic oracle.
pub trait EnergyField: Sync {
    fn energy(&self, pose: &Pose, sigma: f64) -> f64;
    fn gradient(&self, pose: &Pose, sigma: f64) -> Twist;
}

/// Learned model bound to one shape context.
pub struct ModelField<'a> {
    pub model: &'a ModelWeights,
    pub ctx: &'a ShapeContext,
}

impl EnergyField for ModelField<'_> {
    fn energy(&self, pose: &Pose, sigma: f64) -> f64 {
        self.model.energy(self.ctx, pose, sigma)
    }

    fn gradient(&self, pose: &Pose, sigma: f64) -> Twist {
        self.model.energy_gradient(self.ctx, pose, sigma).1
    }
}

/// Geometric noise schedule with step sizes
/// `alpha_k = eta * sigma_k / sigma_min`.
///
/// With a field whose gradient scales like `displacement / sigma^2`, this
/// step rule keeps the per-step relaxation rate `alpha_k^2 / (2 sigma_k^2)`
/// constant across levels and the stationary spread proportional to
/// `sigma_k`, so the anneal actually tightens as the noise drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Strictly decreasing noise levels, sigma_max first.
    pub sigmas: Vec<f64>,
    pub eta: f64,
    pub steps_per_level: usize,
}

impl NoiseSchedule {
    pub fn geometric(
        levels: usize,
        sigma_max: f64,
        sigma_min: f64,
        eta: f64,
        steps_per_level: usize,
    ) -> Self {
        assert!(levels >= 1 && sigma_max >= sigma_min && sigma_min > 0.0 && eta > 0.0);
        let sigmas = if levels == 1 {
            vec![sigma_max]
        } else {
            let ratio = (sigma_min / sigma_max).powf(1.0 / (levels - 1) as f64);
            (0..levels).map(|k| sigma_max * ratio.powi(k as i32)).collect()
        };
        NoiseSchedule {
            sigmas,
            eta,
            steps_per_level,
        }
    }

    pub fn sigma_min(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }

    pub fn alpha(&self, level: usize) -> f64 {
        let s = self.sigmas[level];
        self.eta * s / self.sigma_min()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::geometric(50, 1.0, 0.01, 8e-3, 5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Unconstrained,
    PartGuided,
    NaiveTarget,
}

/// A sampled grasp hypothesis with its final energies (evaluation flags are
/// attached separately by the metric pass).
#[derive(Debug, Clone, PartialEq)]
pub struct GraspCandidate {
    pub pose: Pose,
    pub energy_full: f64,
    pub energy_target: Option<f64>,
    pub provenance: Provenance,
}

/// JSON layout of a candidate: `pose` is the row-major 4x4 matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraspCandidateJson {
    pub pose: Vec<f64>,
    pub energy_full: f64,
    pub energy_target: Option<f64>,
    pub provenance: Provenance,
}

impl GraspCandidate {
    pub fn to_json(&self) -> GraspCandidateJson {
        GraspCandidateJson {
            pose: self.pose.to_flat16().to_vec(),
            energy_full: self.energy_full,
            energy_target: self.energy_target,
            provenance: self.provenance,
        }
    }

    pub fn from_json(j: &GraspCandidateJson) -> Result<Self, crate::se3::Se3Error> {
        let arr: [f64; 16] = j
            .pose
            .as_slice()
            .try_into()
            .map_err(|_| crate::se3::Se3Error::InvalidRotation("pose needs 16 numbers".into()))?;
        Ok(GraspCandidate {
            pose: Pose::from_flat16(&arr)?,
            energy_full: j.energy_full,
            energy_target: j.energy_target,
            provenance: j.provenance,
        })
    }
}

/// Which context drives a part-guided step: the one with the larger energy,
/// full context on ties.
fn pick_larger(e_full: f64, e_target: f64) -> bool {
    e_full >= e_target
}

fn langevin_step<R: Rng>(
    pose: &Pose,
    grad: &Twist,
    alpha: f64,
    noise_scale: f64,
    rng: &mut R,
) -> Pose {
    let mut eps = [0.0f64; 6];
    for v in &mut eps {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * alpha * noise_scale;
    }
    let delta = *grad * (-0.5 * alpha * alpha) + Twist::from_array(&eps);
    compose(&expmap(&delta), pose)
}

fn run_chain<F: EnergyField>(
    field: &F,
    bounds: &PoseBounds,
    schedule: &NoiseSchedule,
    seed: u64,
    chain: u64,
    noise_scale: f64,
) -> Pose {
    let mut rng = stream_rng(seed, chain);
    let mut pose = random_pose(&bounds.inflate(1.5), &mut rng);
    for level in 0..schedule.sigmas.len() {
        let sigma = schedule.sigmas[level];
        let alpha = schedule.alpha(level);
        for _ in 0..schedule.steps_per_level {
            let grad = field.gradient(&pose, sigma);
            debug_assert!(grad.is_finite(), "non-finite gradient");
            pose = langevin_step(&pose, &grad, alpha, noise_scale, &mut rng);
        }
    }
    pose
}

/// M independent annealed Langevin chains over the field; chains start from
/// uniform poses in `bounds` inflated 1.5x. Deterministic per (seed, chain)
/// at any thread count.
pub fn sample<F: EnergyField>(
    field: &F,
    bounds: &PoseBounds,
    m: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Vec<GraspCandidate> {
    sample_with_noise(field, bounds, m, schedule, seed, 1.0)
}

pub(crate) fn sample_with_noise<F: EnergyField>(
    field: &F,
    bounds: &PoseBounds,
    m: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    noise_scale: f64,
) -> Vec<GraspCandidate> {
    assert!(m >= 1);
    crate::exec::map_indexed(m, |chain| {
        let pose = run_chain(field, bounds, schedule, seed, chain as u64, noise_scale);
        let energy = field.energy(&pose, schedule.sigma_min());
        GraspCandidate {
            pose,
            energy_full: energy,
            energy_target: None,
            provenance: Provenance::Unconstrained,
        }
    })
}

/// Part-guided sampling: each step evaluates both contexts and follows the
/// gradient of whichever currently has the larger energy (full context on
/// ties). Both final energies are recorded.
pub fn sample_constrained<F: EnergyField, G: EnergyField>(
    full: &F,
    target: &G,
    bounds: &PoseBounds,
    m: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Vec<GraspCandidate> {
    assert!(m >= 1);
    crate::exec::map_indexed(m, |chain| {
        let mut rng = stream_rng(seed, chain as u64);
        let mut pose = random_pose(&bounds.inflate(1.5), &mut rng);
        for level in 0..schedule.sigmas.len() {
            let sigma = schedule.sigmas[level];
            let alpha = schedule.alpha(level);
            for _ in 0..schedule.steps_per_level {
                let e_full = full.energy(&pose, sigma);
                let e_target = target.energy(&pose, sigma);
                let grad = if pick_larger(e_full, e_target) {
                    full.gradient(&pose, sigma)
                } else {
                    target.gradient(&pose, sigma)
                };
                pose = langevin_step(&pose, &grad, alpha, 1.0, &mut rng);
            }
        }
        let smin = schedule.sigma_min();
        GraspCandidate {
            pose,
            energy_full: full.energy(&pose, smin),
            energy_target: Some(target.energy(&pose, smin)),
            provenance: Provenance::PartGuided,
        }
    })
}

/// Naive constrained baseline: sample against the target context alone,
/// then record both energies so thresholding can use them.
pub fn sample_naive_target<F: EnergyField, G: EnergyField>(
    full: &F,
    target: &G,
    bounds: &PoseBounds,
    m: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Vec<GraspCandidate> {
    assert!(m >= 1);
    crate::exec::map_indexed(m, |chain| {
        let pose = run_chain(target, bounds, schedule, seed, chain as u64, 1.0);
        let smin = schedule.sigma_min();
        GraspCandidate {
            pose,
            energy_full: full.energy(&pose, smin),
            energy_target: Some(target.energy(&pose, smin)),
            provenance: Provenance::NaiveTarget,
        }
    })
}

/// Keeps candidates whose worst energy (max over recorded contexts) is below
/// `delta`. Returns the kept set and the sample efficiency in percent.
pub fn threshold_grasps(candidates: &[GraspCandidate], delta: f64) -> (Vec<GraspCandidate>, f64) {
    assert!(!delta.is_nan());
    let kept: Vec<GraspCandidate> = candidates
        .iter()
        .filter(|c| c.energy_full.max(c.energy_target.unwrap_or(f64::NEG_INFINITY)) < delta)
        .cloned()
        .collect();
    let se = if candidates.is_empty() {
        0.0
    } else {
        100.0 * kept.len() as f64 / candidates.len() as f64
    };
    (kept, se)
}

/// Energy threshold from known-good validation grasps: the given percentile
/// (linear interpolation between order statistics) of their energies.
pub fn calibrate_delta(validation_energies: &[f64], percentile: f64) -> f64 {
    assert!(!validation_energies.is_empty());
    assert!((0.0..=100.0).contains(&percentile));
    let mut e = validation_energies.to_vec();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = percentile / 100.0 * (e.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    e[lo] * (1.0 - frac) + e[hi] * frac
}
