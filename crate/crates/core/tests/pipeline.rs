use mavrl_core::experiment::{seed_dataset, ExperimentConfig, ModalitySet, Oracle};
use mavrl_core::feedback::{FeedbackBudget, FeedbackDataset};
use mavrl_core::mavrl::train;
use mavrl_core::nn::Checkpoint;
use mavrl_core::{GridKind, MavrlModel, TrainConfig};
use proptest::prelude::*;

fn small(env: GridKind, modalities: ModalitySet) -> ExperimentConfig {
    ExperimentConfig {
        env,
        size: 5,
        modalities,
        budget: FeedbackBudget::new(16, 2, 16, 32),
        train: TrainConfig { steps: 400, hidden: 16, ..Default::default() },
        seeds: 1,
        ..Default::default()
    }
}

#[test]
fn training_lowers_the_smoothed_loss_on_the_table_budget() {
    let cfg = ExperimentConfig { train: TrainConfig { steps: 3_000, ..Default::default() }, ..Default::default() };
    let oracle = Oracle::new(cfg.env, cfg.size).unwrap();
    let ds = seed_dataset(&cfg, &oracle, 0).unwrap();
    let (_, curve) = train(&ds, &cfg.train).unwrap();
    let n = curve.rows.len();
    assert!(curve.mean_total(n - 100..n) < curve.mean_total(0..100));
}

#[test]
fn serialized_feedback_and_checkpoints_reproduce_training() {
    let cfg = small(GridKind::Cliff, ModalitySet::ALL);
    let oracle = Oracle::new(cfg.env, cfg.size).unwrap();
    let ds = seed_dataset(&cfg, &oracle, 3).unwrap();
    let reread = FeedbackDataset::from_text(&ds.to_text()).unwrap();
    let (a, curve_a) = train(&ds, &cfg.train).unwrap();
    let (b, curve_b) = train(&reread, &cfg.train).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(curve_a.to_csv(), curve_b.to_csv());

    let loaded = MavrlModel::from_checkpoint(&Checkpoint::from_text(&a.to_checkpoint().to_text()).unwrap()).unwrap();
    assert_eq!(loaded.params(), a.params());
    assert_eq!(loaded.rating_head.cutpoints(), a.rating_head.cutpoints());
}

#[test]
fn seeds_change_results_and_repeat_exactly() {
    let cfg = small(GridKind::Trap, "PS".parse().unwrap());
    let oracle = Oracle::new(cfg.env, cfg.size).unwrap();
    let ds = seed_dataset(&cfg, &oracle, 0).unwrap();
    let run = |seed| train(&ds, &TrainConfig { seed, ..cfg.train }).unwrap().0.params();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // ablations see the same observations as the full run for the
    // modalities they keep
    #[test]
    fn restricted_datasets_share_observations(seed in 0u64..500, bits in 1u8..16) {
        let mods: String = ['P', 'D', 'R', 'S'].iter().enumerate().filter(|(i, _)| bits & (8 >> i) != 0).map(|(_, c)| *c).collect();
        let subset: ModalitySet = mods.parse().unwrap();
        let full_cfg = small(GridKind::Sparse, ModalitySet::ALL);
        let oracle = Oracle::new(full_cfg.env, full_cfg.size).unwrap();
        let full = seed_dataset(&full_cfg, &oracle, seed).unwrap();
        let part = seed_dataset(&ExperimentConfig { modalities: subset, ..full_cfg.clone() }, &oracle, seed).unwrap();
        prop_assert_eq!(part.trajectories, full.trajectories);
        prop_assert_eq!(part.preferences.is_empty(), !subset.preferences);
        if subset.preferences { prop_assert_eq!(&part.preferences, &full.preferences); }
        if subset.demos { prop_assert_eq!(&part.demos, &full.demos); }
        if subset.ratings { prop_assert_eq!(&part.ratings, &full.ratings); }
        if subset.stops { prop_assert_eq!(&part.stops, &full.stops); }
        prop_assert_eq!(part.stops.is_empty(), !subset.stops);
    }
}
