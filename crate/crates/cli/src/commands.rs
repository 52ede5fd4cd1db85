use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use mavrl_core::eval::{behavioral_cloning, export_heatmap, grid_to_csv, heatmap_grid, perturbed_return, Behavior};
use mavrl_core::experiment::{evaluate_model, run_seed, seed_dataset, seed_rows, select_lambdas, Oracle, SeedRun};
use mavrl_core::mavrl::{train, LossCurve};
use mavrl_core::nn::Checkpoint;
use mavrl_core::{EvalReport, ExperimentConfig, FeedbackDataset, MavrlModel};
use rayon::prelude::*;

use crate::output::{ensure_dir, file_name, write_atomic, write_config, Manifest, SelectionRecord, RESULTS};

/// Options shared by every verb.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl Common {
    /// Loads the config (defaults when no file is given) and narrows it to
    /// a single seed when `--seed` is set.
    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.base_seed = seed;
            cfg.seeds = 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs.max(1)).build()?)
    }
}

pub fn model_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("model_seed{seed}.ckpt"))
}

fn feedback_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("feedback_seed{seed}.txt"))
}

fn loss_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("loss_seed{seed}.csv"))
}

/// Runs `f` for every seed on the pool, keeping seed order in the result.
fn per_seed<T: Send>(pool: &rayon::ThreadPool, seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

/// Optionally replaces the configured lambdas by the best grid pair.
pub fn apply_selection(config: &mut ExperimentConfig, tuning_seeds: Option<usize>) -> Result<Option<SelectionRecord>> {
    let Some(n) = tuning_seeds else { return Ok(None) };
    if n == 0 {
        bail!("--select-lambdas needs at least one tuning seed");
    }
    let sel = select_lambdas(config, n)?;
    info!("selected lambda_kl={} lambda_td={} (mean normalized return {:.2})", sel.lambda_kl, sel.lambda_td, sel.score);
    config.train.lambda_kl = sel.lambda_kl;
    config.train.lambda_td = sel.lambda_td;
    Ok(Some(SelectionRecord::new(sel, n)))
}

pub fn simulate(common: &Common) -> Result<()> {
    let cfg = common.load_config()?;
    ensure_dir(&common.out)?;
    let oracle = Oracle::new(cfg.env, cfg.size)?;
    let seeds = cfg.seed_list();
    let files = per_seed(&common.pool()?, &seeds, |s| {
        let ds = seed_dataset(&cfg, &oracle, s)?;
        let path = feedback_path(&common.out, s);
        write_atomic(&path, ds.to_text().as_bytes())?;
        info!("seed {s}: {} preferences, {} demos, {} ratings, {} stops", ds.preferences.len(), ds.demos.len(), ds.ratings.len(), ds.stops.len());
        Ok(file_name(&path))
    })?;
    finish(common, "simulate", &cfg, files, None)
}

pub fn train_models(common: &Common, feedback: Option<&Path>) -> Result<()> {
    let cfg = common.load_config()?;
    let seeds = cfg.seed_list();
    let given = match feedback {
        Some(path) => {
            if seeds.len() != 1 {
                bail!("--feedback trains a single model; pass --seed or use a one-seed config");
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            Some(FeedbackDataset::from_text(&text)?)
        }
        None => None,
    };
    ensure_dir(&common.out)?;
    let oracle = Oracle::new(cfg.env, cfg.size)?;
    let files = per_seed(&common.pool()?, &seeds, |s| {
        let ds = match &given {
            Some(ds) => ds.clone(),
            None => seed_dataset(&cfg, &oracle, s)?,
        };
        let (model, curve) = train(&ds, &mavrl_core::TrainConfig { seed: s, ..cfg.train })?;
        let (mp, lp) = (model_path(&common.out, s), loss_path(&common.out, s));
        write_atomic(&mp, model.to_checkpoint().to_text().as_bytes())?;
        write_atomic(&lp, curve.to_csv().as_bytes())?;
        info!("seed {s}: final loss {:.4}", curve.rows.last().map(|r| r.total).unwrap_or(f64::NAN));
        Ok(vec![file_name(&mp), file_name(&lp)])
    })?;
    finish(common, "train", &cfg, files.concat(), None)
}

/// Trains (or loads from `models`) and evaluates one seed.
pub fn obtain_run(cfg: &ExperimentConfig, oracle: &Oracle, seed: u64, models: Option<&Path>) -> Result<SeedRun> {
    let run = match models {
        Some(dir) => {
            let path = model_path(dir, seed);
            let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let model = MavrlModel::from_checkpoint(&Checkpoint::from_text(&text)?)?;
            if model.n_states() != oracle.mdp.n_states() {
                bail!("{} has {} states, the grid has {}", path.display(), model.n_states(), oracle.mdp.n_states());
            }
            evaluate_model(oracle, seed, seed_dataset(cfg, oracle, seed)?, model, LossCurve::default())?
        }
        None => run_seed(cfg, oracle, seed)?,
    };
    info!("seed {seed}: normalized return {:.2}, epic {:.4}", run.normalized_return, run.epic);
    Ok(run)
}

/// Per-seed metric rows, robustness rows for each `p_rand` level, then
/// the mean/se aggregates.
pub fn report(cfg: &ExperimentConfig, oracle: &Oracle, runs: &[SeedRun], p_rand: &[f64]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let (env, budget, mods) = (cfg.env.name(), cfg.budget.to_string(), cfg.modalities.to_string());
    for run in runs {
        seed_rows(cfg, run, &mut report);
        let bc = if run.dataset.demos.is_empty() {
            None
        } else {
            Some(behavioral_cloning(&run.dataset.demos, oracle.mdp.n_states(), oracle.mdp.n_actions())?)
        };
        for &p in p_rand {
            let ours = perturbed_return(&oracle.mdp, &oracle.anchors, &Behavior::Reward(run.reward.mean.clone()), p)?;
            report.push(env, &budget, &mods, run.seed, &format!("normalized_return_p{p}"), ours);
            if let Some(pi) = &bc {
                let v = perturbed_return(&oracle.mdp, &oracle.anchors, &Behavior::Policy(pi.clone()), p)?;
                report.push(env, &budget, &mods, run.seed, &format!("bc_normalized_return_p{p}"), v);
            }
        }
    }
    report.aggregate();
    Ok(report)
}

pub fn eval(common: &Common, models: Option<&Path>, p_rand: &[f64], tuning: Option<usize>) -> Result<()> {
    let mut cfg = common.load_config()?;
    mavrl_core::eval::check_levels(p_rand)?;
    ensure_dir(&common.out)?;
    let selection = apply_selection(&mut cfg, tuning)?;
    let oracle = Oracle::new(cfg.env, cfg.size)?;
    let runs = per_seed(&common.pool()?, &cfg.seed_list(), |s| obtain_run(&cfg, &oracle, s, models))?;
    let rep = report(&cfg, &oracle, &runs, p_rand)?;
    write_atomic(&common.out.join(RESULTS), rep.to_csv().as_bytes())?;
    let mut files = vec![RESULTS.to_string()];
    for run in runs.iter().filter(|r| !r.curve.rows.is_empty()) {
        let path = loss_path(&common.out, run.seed);
        write_atomic(&path, run.curve.to_csv().as_bytes())?;
        files.push(file_name(&path));
    }
    for metric in ["normalized_return", "epic"] {
        let mods = cfg.modalities.to_string();
        if let (Some(m), Some(se)) = (rep.value(&mods, "mean", metric), rep.value(&mods, "se", metric)) {
            println!("{} {metric}: {m:.3} +- {se:.3}", cfg.label());
        }
    }
    let mut manifest = Manifest::new("eval", &cfg, cfg.seed_list());
    manifest.p_rand = p_rand.to_vec();
    manifest.selection = selection;
    manifest.files = files;
    write_config(&common.out, &cfg)?;
    manifest.files.push("config.toml".into());
    manifest.write(&common.out)
}

pub fn heatmap(common: &Common, models: Option<&Path>, png: bool, normalize: bool) -> Result<()> {
    let cfg = common.load_config()?;
    ensure_dir(&common.out)?;
    let oracle = Oracle::new(cfg.env, cfg.size)?;
    let runs = per_seed(&common.pool()?, &cfg.seed_list(), |s| obtain_run(&cfg, &oracle, s, models))?;
    // render into a scratch directory beside the output, then move each
    // finished file into place
    let scratch = tempfile::TempDir::new_in(&common.out)?;
    let mut files = Vec::new();
    for run in &runs {
        for path in export_heatmap(&run.reward, cfg.size, normalize, png, scratch.path(), &format!("seed{}", run.seed))? {
            let name = file_name(&path);
            std::fs::rename(&path, common.out.join(&name))?;
            files.push(name);
        }
    }
    let truth = heatmap_grid(oracle.mdp.reward().as_slice().unwrap_or(&[]), cfg.size, normalize)?;
    write_atomic(&common.out.join("true_reward.csv"), grid_to_csv(&truth).as_bytes())?;
    files.push("true_reward.csv".into());
    finish(common, "heatmap", &cfg, files, None)
}

fn finish(common: &Common, command: &str, cfg: &ExperimentConfig, files: Vec<String>, selection: Option<SelectionRecord>) -> Result<()> {
    write_config(&common.out, cfg)?;
    let mut manifest = Manifest::new(command, cfg, cfg.seed_list());
    manifest.files = files;
    manifest.files.push("config.toml".into());
    manifest.selection = selection;
    manifest.write(&common.out)?;
    println!("{command}: wrote {} files to {}", manifest.files.len(), common.out.display());
    Ok(())
}
