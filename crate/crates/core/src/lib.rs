//! Constrained 6-DoF grasp generation by SE(3) energy-based diffusion:
//! exact Lie-group arithmetic, tri-plane shape features, a pose-energy
//! model with hand-written derivatives, annealed Langevin sampling with
//! part-guided max-energy composition, a procedural toy dataset and
//! analytic grasp metrics.

pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod rng;
pub mod se3;
pub mod train;
pub mod triplane;

pub use diffusion::{EnergyField, GraspCandidate, NoiseSchedule};
pub use model::{ModelConfig, ModelWeights, ShapeContext};
pub use se3::{Pose, PoseBounds, Twist};
