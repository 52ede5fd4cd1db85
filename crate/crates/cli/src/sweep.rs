//! Cartesian sweeps over budgets and modality subsets.
//!
//! Every cell gets its own directory under `cells/`. A cell whose manifest
//! matches its config hash and robustness levels is reused, so an
//! interrupted sweep picks up where it stopped. Failed cells are recorded in
//! `failures.csv` and do not stop the others.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mavrl_core::eval::check_levels;
use mavrl_core::experiment::Oracle;
use mavrl_core::feedback::FeedbackBudget;
use mavrl_core::{EvalReport, ExperimentConfig, ModalitySet};
use rayon::prelude::*;

use crate::commands::{apply_selection, obtain_run, report};
use crate::output::{ensure_dir, write_atomic, write_config, Manifest, RESULTS};

/// Parses `n_p,n_d,n_r,n_s`.
pub fn parse_budget(s: &str) -> Result<FeedbackBudget> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad budget entry `{p}` in `{s}`")))
        .collect::<Result<_>>()?;
    match parts[..] {
        [p, d, r, st] => Ok(FeedbackBudget::new(p, d, r, st)),
        _ => bail!("budget `{s}` needs four counts n_p,n_d,n_r,n_s"),
    }
}

/// `all` (15 subsets), `singles`, or a comma-separated list such as `P,DS,PDRS`.
pub fn parse_modalities(s: &str) -> Result<Vec<ModalitySet>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "all" => Ok(ModalitySet::subsets()),
        "singles" => Ok(ModalitySet::singles().to_vec()),
        _ => s.split(',').map(|m| Ok(m.trim().parse::<ModalitySet>()?)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub budgets: Vec<FeedbackBudget>,
    pub modalities: Vec<ModalitySet>,
    pub p_rand: Vec<f64>,
    pub tuning_seeds: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

impl Cell {
    pub fn name(&self) -> String {
        let b = self.config.budget;
        format!("{}_{}-{}-{}-{}_{}", self.config.env.name(), b.preferences, b.demonstrations, b.ratings, b.stops, self.config.modalities)
    }
}

pub fn cells(base: &ExperimentConfig, plan: &SweepPlan, out: &Path) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &budget in &plan.budgets {
        for &modalities in &plan.modalities {
            let config = ExperimentConfig { budget, modalities, ..base.clone() };
            let mut cell = Cell { config, dir: PathBuf::new() };
            cell.dir = out.join("cells").join(cell.name());
            cells.push(cell);
        }
    }
    cells
}

/// True when the cell directory already holds results for exactly this
/// configuration.
pub fn is_complete(cell: &Cell, plan: &SweepPlan) -> bool {
    match Manifest::read(&cell.dir) {
        Ok(m) => {
            m.config_hash == cell.config.hash()
                && m.p_rand == plan.p_rand
                && m.selection.as_ref().map(|s| s.tuning_seeds) == plan.tuning_seeds
                && cell.dir.join(RESULTS).is_file()
        }
        Err(_) => false,
    }
}

fn run_cell(cell: &Cell, plan: &SweepPlan) -> Result<()> {
    let mut cfg = cell.config.clone();
    // invalid cells (a selected modality with zero budget) fail here
    cfg.validate()?;
    ensure_dir(&cell.dir)?;
    let selection = apply_selection(&mut cfg, plan.tuning_seeds)?;
    let oracle = Oracle::new(cfg.env, cfg.size)?;
    let runs = cfg.seed_list().into_iter().map(|s| obtain_run(&cfg, &oracle, s, None)).collect::<Result<Vec<_>>>()?;
    let rep = report(&cfg, &oracle, &runs, &plan.p_rand)?;
    write_atomic(&cell.dir.join(RESULTS), rep.to_csv().as_bytes())?;
    write_config(&cell.dir, &cfg)?;
    // the hash recorded is that of the cell as planned, so resumption
    // recognizes it even when lambda selection changed the train section
    let mut manifest = Manifest::new("sweep-cell", &cfg, cfg.seed_list());
    manifest.config_hash = cell.config.hash();
    manifest.p_rand = plan.p_rand.clone();
    manifest.selection = selection;
    manifest.files = vec![RESULTS.into(), "config.toml".into()];
    // written last: its presence marks the cell complete
    manifest.write(&cell.dir)
}

#[derive(Debug, Default)]
pub struct SweepSummary {
    pub ran: usize,
    pub reused: usize,
    pub failed: Vec<(String, String)>,
}

pub fn run_sweep(base: &ExperimentConfig, plan: &SweepPlan, out: &Path, jobs: usize) -> Result<SweepSummary> {
    check_levels(&plan.p_rand)?;
    if plan.budgets.is_empty() || plan.modalities.is_empty() {
        bail!("sweep has no cells");
    }
    ensure_dir(out)?;
    let cells = cells(base, plan, out);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let outcomes: Vec<(bool, Result<()>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                if is_complete(cell, plan) {
                    info!("{}: up to date", cell.name());
                    return (true, Ok(()));
                }
                info!("{}: running", cell.name());
                let result = run_cell(cell, plan);
                if let Err(e) = &result {
                    warn!("{}: failed: {e:#}", cell.name());
                }
                (false, result)
            })
            .collect()
    });

    let mut summary = SweepSummary::default();
    let mut combined = EvalReport::default();
    let mut failures = String::from("cell,error\n");
    for (cell, (reused, result)) in cells.iter().zip(outcomes) {
        match result {
            Ok(()) => {
                if reused {
                    summary.reused += 1;
                } else {
                    summary.ran += 1;
                }
                let text = std::fs::read_to_string(cell.dir.join(RESULTS))?;
                combined.rows.extend(EvalReport::from_csv(&text)?.rows);
            }
            Err(e) => {
                let msg = format!("{e:#}").replace(['\n', '"'], " ");
                failures.push_str(&format!("{},\"{msg}\"\n", cell.name()));
                summary.failed.push((cell.name(), msg));
            }
        }
    }
    write_atomic(&out.join("sweep.csv"), combined.to_csv().as_bytes())?;
    write_atomic(&out.join("failures.csv"), failures.as_bytes())?;
    let mut manifest = Manifest::new("sweep", base, base.seed_list());
    manifest.p_rand = plan.p_rand.clone();
    manifest.files = vec!["sweep.csv".into(), "failures.csv".into(), "config.toml".into()];
    manifest.files.extend(cells.iter().map(|c| format!("cells/{}", c.name())));
    write_config(out, base)?;
    manifest.write(out)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_parse() {
        assert_eq!(parse_budget("64, 1,64,256").unwrap(), FeedbackBudget::new(64, 1, 64, 256));
        assert!(parse_budget("1,2,3").is_err());
        assert!(parse_budget("1,2,3,x").is_err());
    }

    #[test]
    fn modality_lists_parse() {
        assert_eq!(parse_modalities("all").unwrap().len(), 15);
        assert_eq!(parse_modalities("singles").unwrap().len(), 4);
        let m = parse_modalities("P, ds").unwrap();
        assert_eq!(m.iter().map(|m| m.to_string()).collect::<Vec<_>>(), ["P", "DS"]);
        assert!(parse_modalities("P,Q").is_err());
    }

    #[test]
    fn cell_names_are_unique() {
        let plan = SweepPlan {
            budgets: vec![FeedbackBudget::new(64, 1, 64, 256), FeedbackBudget::new(8, 1, 8, 32)],
            modalities: ModalitySet::subsets(),
            p_rand: vec![],
            tuning_seeds: None,
        };
        let cells = cells(&ExperimentConfig::default(), &plan, Path::new("out"));
        assert_eq!(cells.len(), 30);
        let names: std::collections::HashSet<String> = cells.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), 30);
        assert_eq!(cells[0].dir, Path::new("out/cells/grid_trap_64-1-64-256_P"));
    }
}
