//! Shared fixtures for the benchmarks.

use mavrl_core::experiment::{seed_dataset, ExperimentConfig, Oracle};
use mavrl_core::mavrl::{Batch, LikelihoodParams, Objective, TermWeights};
use mavrl_core::{FeedbackDataset, GridKind, MavrlModel};

/// The 10x10 trap grid with the default budget, simulated for seed 0.
pub fn trap_fixture() -> (Oracle, FeedbackDataset) {
    let cfg = ExperimentConfig { env: GridKind::Trap, ..Default::default() };
    let oracle = Oracle::new(cfg.env, cfg.size).expect("grid builds");
    let ds = seed_dataset(&cfg, &oracle, 0).expect("feedback simulates");
    (oracle, ds)
}

/// A batch of 32 observations per modality, the size one training step uses.
pub fn training_batch(ds: &FeedbackDataset) -> Batch<'_> {
    Batch {
        preferences: ds.preferences.iter().take(32).collect(),
        demo_steps: ds.demos.iter().flat_map(|d| d.trajectory.steps.iter().copied()).take(32).collect(),
        ratings: ds.ratings.iter().take(32).collect(),
        stops: ds.stops.iter().take(32).collect(),
        transitions: mavrl_core::feedback::extract_transitions(ds).into_iter().take(32).collect(),
    }
}

pub fn objective(ds: &FeedbackDataset) -> Objective {
    Objective { likelihood: LikelihoodParams::from_meta(&ds.meta), gamma: 0.99, weights: TermWeights::objective(1.0, 1.0) }
}

pub fn model(ds: &FeedbackDataset) -> MavrlModel {
    MavrlModel::new(ds.meta.n_states, ds.meta.n_actions, 64, ds.meta.categories, &mut mavrl_core::rng::derive(0, 6))
}
