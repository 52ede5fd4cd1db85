//! Experiment configuration and the per-seed pipeline: build the grid,
//! solve it, simulate feedback, train, evaluate.
//!
//! Configuration files are TOML with four sections:
//!
//! ```toml
//! [experiment]
//! env = "grid_trap"        # grid_cliff | grid_sparse | grid_trap
//! size = 10
//! modalities = "PDRS"      # any nonempty subset of P, D, R, S
//! seeds = 10
//! base_seed = 0
//!
//! [budget]
//! preferences = 64
//! demonstrations = 1
//! ratings = 64
//! stops = 256
//!
//! [simulator]              # optional, defaults shown in SimulatorParams
//! [train]                  # optional, defaults shown in TrainConfig
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::eval::{epic_distance, extract_inferred_reward, mean_se, plan_on_inferred, Anchors, EvalReport, InferredReward};
use crate::feedback::{FeedbackBudget, FeedbackDataset, SimulatorParams};
use crate::mavrl::{train, LossCurve, MavrlModel, TrainConfig};
use crate::mdp::{build_grid_env, policy_value, value_iteration, GridKind, QTable, TabularMdp, VI_TOL};

/// A nonempty subset of the four feedback modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalitySet {
    pub preferences: bool,
    pub demos: bool,
    pub ratings: bool,
    pub stops: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet { preferences: true, demos: true, ratings: true, stops: true };

    /// All 15 nonempty subsets: singles, pairs, triples, then all four.
    pub fn subsets() -> Vec<ModalitySet> {
        let mut out: Vec<ModalitySet> = (1u8..16).map(Self::from_bits).collect();
        out.sort_by_key(|m| (m.count(), std::cmp::Reverse(m.bits())));
        out
    }

    fn from_bits(b: u8) -> Self {
        ModalitySet { preferences: b & 8 != 0, demos: b & 4 != 0, ratings: b & 2 != 0, stops: b & 1 != 0 }
    }

    fn bits(&self) -> u8 {
        (self.preferences as u8) << 3 | (self.demos as u8) << 2 | (self.ratings as u8) << 1 | self.stops as u8
    }

    pub fn count(&self) -> usize {
        self.bits().count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits() == 0
    }

    pub fn singles() -> [ModalitySet; 4] {
        [Self::from_bits(8), Self::from_bits(4), Self::from_bits(2), Self::from_bits(1)]
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, c) in [(self.preferences, 'P'), (self.demos, 'D'), (self.ratings, 'R'), (self.stops, 'S')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = ModalitySet { preferences: false, demos: false, ratings: false, stops: false };
        for c in s.trim().chars() {
            let slot = match c.to_ascii_uppercase() {
                'P' => &mut m.preferences,
                'D' => &mut m.demos,
                'R' => &mut m.ratings,
                'S' => &mut m.stops,
                _ => return config_err(format!("unknown modality `{c}` in `{s}`")),
            };
            if *slot {
                return config_err(format!("modality `{c}` repeated in `{s}`"));
            }
            *slot = true;
        }
        if m.is_empty() {
            return config_err("modality set is empty");
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: GridKind,
    pub size: usize,
    pub modalities: ModalitySet,
    pub budget: FeedbackBudget,
    pub simulator: SimulatorParams,
    pub train: TrainConfig,
    pub seeds: usize,
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: GridKind::Trap,
            size: 10,
            modalities: ModalitySet::ALL,
            budget: FeedbackBudget::new(64, 1, 64, 256),
            simulator: SimulatorParams::default(),
            train: TrainConfig::default(),
            seeds: 10,
            base_seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    env: String,
    #[serde(default = "default_size")]
    size: usize,
    #[serde(default = "default_modalities")]
    modalities: String,
    #[serde(default = "default_seeds")]
    seeds: usize,
    #[serde(default)]
    base_seed: u64,
}

fn default_size() -> usize {
    10
}

fn default_modalities() -> String {
    "PDRS".into()
}

fn default_seeds() -> usize {
    10
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: ExperimentSection,
    budget: FeedbackBudget,
    #[serde(default)]
    simulator: SimulatorParams,
    #[serde(default)]
    train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = ExperimentConfig {
            env: file.experiment.env.parse()?,
            size: file.experiment.size,
            modalities: file.experiment.modalities.parse()?,
            budget: file.budget,
            simulator: file.simulator,
            train: file.train,
            seeds: file.experiment.seeds,
            base_seed: file.experiment.base_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML rendering; `from_toml(to_toml())` is the identity.
    pub fn to_toml(&self) -> String {
        let file = ConfigFile {
            experiment: ExperimentSection {
                env: self.env.name().into(),
                size: self.size,
                modalities: self.modalities.to_string(),
                seeds: self.seeds,
                base_seed: self.base_seed,
            },
            budget: self.budget,
            simulator: self.simulator,
            train: self.train,
        };
        toml::to_string(&file).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 3 {
            return config_err(format!("grid size must be at least 3, got {}", self.size));
        }
        if self.seeds == 0 {
            return config_err("at least one seed is required");
        }
        let m = &self.modalities;
        let b = &self.budget;
        for (on, n, name) in [
            (m.preferences, b.preferences, "preferences"),
            (m.demos, b.demonstrations, "demonstrations"),
            (m.ratings, b.ratings, "ratings"),
            (m.stops, b.stops, "stops"),
        ] {
            if on && n == 0 {
                return config_err(format!("{name} selected but its budget is 0"));
            }
        }
        if m.ratings && b.ratings < self.simulator.categories {
            return config_err(format!("{} ratings cannot fill {} categories", b.ratings, self.simulator.categories));
        }
        self.simulator.validate()?;
        self.train.validate()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn label(&self) -> String {
        format!("{} {} {}", self.env.name(), self.budget, self.modalities)
    }
}

/// Environment, its optimal Q-table and normalization anchors.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub mdp: TabularMdp,
    pub q_star: QTable,
    pub anchors: Anchors,
}

impl Oracle {
    pub fn new(env: GridKind, size: usize) -> Result<Self> {
        let mdp = build_grid_env(env, size)?;
        let q_star = value_iteration(&mdp, None, VI_TOL)?;
        let anchors = Anchors::of(&mdp)?;
        Ok(Oracle { mdp, q_star, anchors })
    }
}

/// Everything one seed of an experiment produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dataset: FeedbackDataset,
    pub model: MavrlModel,
    pub curve: LossCurve,
    pub reward: InferredReward,
    pub raw_return: f64,
    pub normalized_return: f64,
    pub epic: f64,
}

/// Full-budget feedback for one seed. Restricting the result to a modality
/// subset leaves the other modalities' observations untouched, so ablations
/// share their data.
pub fn simulate_seed(config: &ExperimentConfig, oracle: &Oracle, seed: u64) -> Result<FeedbackDataset> {
    FeedbackDataset::simulate(&oracle.mdp, &oracle.q_star, &config.simulator, config.budget, seed)
}

/// The training data of one seed: full-budget feedback restricted to the
/// configured modalities.
pub fn seed_dataset(config: &ExperimentConfig, oracle: &Oracle, seed: u64) -> Result<FeedbackDataset> {
    let m = config.modalities;
    Ok(simulate_seed(config, oracle, seed)?.restricted(m.preferences, m.demos, m.ratings, m.stops))
}

pub fn run_seed(config: &ExperimentConfig, oracle: &Oracle, seed: u64) -> Result<SeedRun> {
    let dataset = seed_dataset(config, oracle, seed)?;
    let train_cfg = TrainConfig { seed, ..config.train };
    let (model, curve) = train(&dataset, &train_cfg)?;
    evaluate_model(oracle, seed, dataset, model, curve)
}

pub fn evaluate_model(oracle: &Oracle, seed: u64, dataset: FeedbackDataset, model: MavrlModel, curve: LossCurve) -> Result<SeedRun> {
    let reward = extract_inferred_reward(&model, &oracle.mdp)?;
    let policy = plan_on_inferred(&oracle.mdp, &reward.mean)?;
    let raw_return = policy_value(&oracle.mdp, &policy, None)?;
    let normalized_return = oracle.anchors.normalize(raw_return)?;
    let truth = oracle.mdp.reward().to_vec();
    let epic = epic_distance(&reward.mean, &truth, &oracle.mdp, oracle.mdp.gamma())?;
    Ok(SeedRun { seed, dataset, model, curve, reward, raw_return, normalized_return, epic })
}

/// Metric rows of one seed.
pub fn seed_rows(config: &ExperimentConfig, run: &SeedRun, report: &mut EvalReport) {
    let (env, budget, mods) = (config.env.name(), config.budget.to_string(), config.modalities.to_string());
    report.push(env, &budget, &mods, run.seed, "normalized_return", run.normalized_return);
    report.push(env, &budget, &mods, run.seed, "raw_return", run.raw_return);
    report.push(env, &budget, &mods, run.seed, "epic", run.epic);
}

/// Report for completed seeds (in the given order) plus aggregate rows.
pub fn build_report(config: &ExperimentConfig, runs: &[SeedRun]) -> EvalReport {
    let mut report = EvalReport::default();
    for run in runs {
        seed_rows(config, run, &mut report);
    }
    report.aggregate();
    report
}

/// Runs every seed sequentially.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(EvalReport, Vec<SeedRun>)> {
    config.validate()?;
    let oracle = Oracle::new(config.env, config.size)?;
    let runs = config.seed_list().into_iter().map(|s| run_seed(config, &oracle, s)).collect::<Result<Vec<_>>>()?;
    Ok((build_report(config, &runs), runs))
}

/// Candidate `(lambda_kl, lambda_td)` pairs.
pub const LAMBDA_GRID: [(f64, f64); 4] = [(0.5, 0.5), (0.5, 1.0), (1.0, 0.5), (1.0, 1.0)];

/// Seeds used for hyperparameter selection start here, away from the
/// evaluation seeds.
pub const TUNING_SEED_BASE: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub lambda_kl: f64,
    pub lambda_td: f64,
    pub score: f64,
}

/// Picks the pair with the highest mean normalized return over
/// `tuning_seeds` seeds starting at [`TUNING_SEED_BASE`]; ties keep the
/// earlier candidate.
pub fn select_lambdas(config: &ExperimentConfig, tuning_seeds: usize) -> Result<Selection> {
    let oracle = Oracle::new(config.env, config.size)?;
    let mut best: Option<Selection> = None;
    for (kl, td) in LAMBDA_GRID {
        let cfg = ExperimentConfig { train: TrainConfig { lambda_kl: kl, lambda_td: td, ..config.train }, ..config.clone() };
        let scores = (0..tuning_seeds as u64)
            .map(|i| run_seed(&cfg, &oracle, TUNING_SEED_BASE + i).map(|r| r.normalized_return))
            .collect::<Result<Vec<_>>>()?;
        let (score, _) = mean_se(&scores);
        if best.is_none_or(|b| score > b.score) {
            best = Some(Selection { lambda_kl: kl, lambda_td: td, score });
        }
    }
    best.ok_or_else(|| Error::Config("no candidates".into()))
}
