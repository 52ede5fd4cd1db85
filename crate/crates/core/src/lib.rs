//! Joint Bayesian reward inference from heterogeneous feedback on tabular MDPs.
//!
//! A shared Gaussian reward encoder and an auxiliary Q-network are trained on
//! preferences, demonstrations, ratings and stop signals through a single
//! variational objective. The crate also contains the exact planning oracles,
//! the feedback simulators and the evaluation metrics used to judge the
//! recovered rewards.
//!
//! Module map:
//! - [`mdp`]: tabular MDPs, gridworlds, value iteration, rollouts.
//! - [`feedback`]: feedback simulation and the line-oriented dataset format.
//! - [`nn`]: MLPs with closed-form backprop, AdamW, checkpoints.
//! - [`mavrl`]: likelihood decoders, the variational objective and training.
//! - [`eval`]: normalized returns, EPIC distance, robustness sweeps, heatmaps.
//! - [`experiment`]: configuration and the end-to-end per-seed pipeline.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod feedback;
pub mod mavrl;
pub mod mdp;
pub mod nn;
pub mod rng;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use eval::{EvalReport, InferredReward};
pub use experiment::{ExperimentConfig, ModalitySet};
pub use feedback::{FeedbackDataset, SimulatorParams};
pub use mavrl::{MavrlModel, TrainConfig};
pub use mdp::{GridKind, Policy, QTable, TabularMdp, Trajectory};
