//! Turning trained models into numbers: planning on the inferred reward,
//! normalized returns, EPIC distances, the behavioral-cloning baseline,
//! robustness sweeps under random-action noise, and heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{config_err, Error, Result};
use crate::feedback::DemoObs;
use crate::mavrl::MavrlModel;
use crate::mdp::{perturb_random_action, policy_value, value_iteration, Policy, TabularMdp, VI_TOL};

/// Perturbation levels of the robustness sweep.
pub const ROBUSTNESS_LEVELS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

/// Per-state mean and variance of the learned reward distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredReward {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn extract_inferred_reward(model: &MavrlModel, mdp: &TabularMdp) -> Result<InferredReward> {
    if model.n_states() != mdp.n_states() {
        return Err(Error::Shape(format!("model has {} states, environment {}", model.n_states(), mdp.n_states())));
    }
    let heads = model.heads();
    let variance = heads.logvar.iter().map(|lv| lv.exp()).collect();
    Ok(InferredReward { mean: heads.mu, variance })
}

/// Greedy policy of value iteration on `mean` under the true dynamics.
pub fn plan_on_inferred(mdp: &TabularMdp, mean: &[f64]) -> Result<Policy> {
    Ok(value_iteration(mdp, Some(mean), VI_TOL)?.greedy_policy())
}

/// `100 (raw - v_rand) / (v_opt - v_rand)`.
pub fn normalized_return(raw: f64, v_opt: f64, v_rand: f64) -> Result<f64> {
    let span = v_opt - v_rand;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::Degenerate(format!("optimal and random values coincide ({v_opt})")));
    }
    Ok(100.0 * (raw - v_rand) / span)
}

/// Values of the optimal and the uniform policy on the true reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchors {
    pub v_opt: f64,
    pub v_rand: f64,
}

impl Anchors {
    pub fn of(mdp: &TabularMdp) -> Result<Self> {
        let q = value_iteration(mdp, None, VI_TOL)?;
        let v_opt = policy_value(mdp, &q.greedy_policy(), None)?;
        let v_rand = policy_value(mdp, &Policy::uniform(mdp.n_states(), mdp.n_actions()), None)?;
        Ok(Anchors { v_opt, v_rand })
    }

    pub fn normalize(&self, raw: f64) -> Result<f64> {
        normalized_return(raw, self.v_opt, self.v_rand)
    }
}

/// Transition-level table `R(s, a, s') = reward[s']` of a state-only
/// reward paid on entry. Terminal absorption belongs to the dynamics, so
/// it is not folded in here.
pub fn transition_reward(mdp: &TabularMdp, reward: &[f64]) -> Array3<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    Array3::from_shape_fn((n, na, n), |(_, _, t)| reward[t])
}

/// Canonicalization under independent uniform coverage of `S`, `A`, `S'`:
/// `C(s,a,s') = R(s,a,s') + gamma E[R(s',A,S')] - E[R(s,A,S')] - gamma E[R(S,A,S')]`.
pub fn canonicalize(reward: &Array3<f64>, gamma: f64) -> Array3<f64> {
    let (n, na, n2) = reward.dim();
    let from: Vec<f64> = (0..n).map(|s| reward.index_axis(ndarray::Axis(0), s).mean().unwrap_or(0.0)).collect();
    let all = reward.mean().unwrap_or(0.0);
    Array3::from_shape_fn((n, na, n2), |(s, a, t)| reward[[s, a, t]] + gamma * from[t] - from[s] - gamma * all)
}

fn centered(c: &Array3<f64>) -> (Vec<f64>, f64) {
    let m = c.mean().unwrap_or(0.0);
    let v: Vec<f64> = c.iter().map(|x| x - m).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// Norm below which (relative to the raw table) a canonical reward counts
/// as constant.
const FLAT_TOL: f64 = 1e-10;

/// EPIC pseudo-distance between two transition-level reward tables.
///
/// `sqrt((1 - rho) / 2)` equals half the distance between the standardized
/// canonical rewards; computing it that way keeps distances near zero
/// accurate instead of amplifying rounding in `rho`.
pub fn epic_distance_transitions(a: &Array3<f64>, b: &Array3<f64>, gamma: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("reward tables {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reward in EPIC input".into()));
    }
    let (va, na) = centered(&canonicalize(a, gamma));
    let (vb, nb) = centered(&canonicalize(b, gamma));
    let size = |r: &Array3<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let flat_a = na <= FLAT_TOL * size(a);
    let flat_b = nb <= FLAT_TOL * size(b);
    match (flat_a, flat_b) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(1.0),
        _ => {}
    }
    let sq: f64 = va.iter().zip(&vb).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    Ok((sq.sqrt() / 2.0).min(1.0))
}

/// EPIC distance between two state-only rewards on `mdp`.
pub fn epic_distance(a: &[f64], b: &[f64], mdp: &TabularMdp, gamma: f64) -> Result<f64> {
    let n = mdp.n_states();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!("reward tables of length {} and {}, expected {n}", a.len(), b.len())));
    }
    epic_distance_transitions(&transition_reward(mdp, a), &transition_reward(mdp, b), gamma)
}

/// Tabular maximum-likelihood policy with add-one smoothing; states never
/// visited by a demonstration get the uniform row.
pub fn behavioral_cloning(demos: &[DemoObs], n_states: usize, n_actions: usize) -> Result<Policy> {
    if demos.is_empty() {
        return Err(Error::Data("behavioral cloning needs at least one demonstration".into()));
    }
    let mut counts = Array2::<f64>::zeros((n_states, n_actions));
    for d in demos {
        for st in &d.trajectory.steps {
            if st.state >= n_states || st.action >= n_actions {
                return Err(Error::Data(format!("demo step {st:?} outside {n_states}x{n_actions}")));
            }
            counts[[st.state, st.action]] += 1.0;
        }
    }
    counts.mapv_inplace(|c| c + 1.0);
    for mut row in counts.rows_mut() {
        let z = row.sum();
        row.mapv_inplace(|c| c / z);
    }
    Ok(Policy { probs: counts })
}

/// How a method acts under perturbed dynamics.
#[derive(Debug, Clone)]
pub enum Behavior {
    /// Re-plan on a fixed reward estimate.
    Reward(Vec<f64>),
    /// Keep a fixed policy.
    Policy(Policy),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessPoint {
    pub p_rand: f64,
    pub mean: f64,
    pub se: f64,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Normalized return of one behavior under `p_rand` random-action noise,
/// anchored to the unperturbed environment.
pub fn perturbed_return(mdp: &TabularMdp, anchors: &Anchors, behavior: &Behavior, p_rand: f64) -> Result<f64> {
    let env = perturb_random_action(mdp, p_rand)?;
    let policy = match behavior {
        Behavior::Reward(r) => plan_on_inferred(&env, r)?,
        Behavior::Policy(p) => p.clone(),
    };
    anchors.normalize(policy_value(&env, &policy, None)?)
}

/// Robustness curve over `levels`, one behavior per seed.
pub fn robustness_sweep(mdp: &TabularMdp, per_seed: &[Behavior], levels: &[f64]) -> Result<Vec<RobustnessPoint>> {
    let anchors = Anchors::of(mdp)?;
    levels
        .iter()
        .map(|&p| {
            let values = per_seed.iter().map(|b| perturbed_return(mdp, &anchors, b, p)).collect::<Result<Vec<_>>>()?;
            let (mean, se) = mean_se(&values);
            Ok(RobustnessPoint { p_rand: p, mean, se })
        })
        .collect()
}

/// Reshapes a per-state table into a `size x size` grid, optionally
/// min-max normalized to `[0, 1]` (a constant table maps to zeros).
pub fn heatmap_grid(values: &[f64], size: usize, normalize: bool) -> Result<Array2<f64>> {
    if size * size != values.len() {
        return Err(Error::Shape(format!("{} states do not form a {size}x{size} grid", values.len())));
    }
    let mut grid = Array2::from_shape_vec((size, size), values.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    if normalize {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        grid.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    }
    Ok(grid)
}

pub fn grid_to_csv(grid: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in grid.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn grid_from_csv(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
                .collect()
        })
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("ragged heatmap rows".into()));
    }
    Array2::from_shape_vec((rows.len(), width), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
}

/// Grayscale rendering of a `[0, 1]` grid, `scale` pixels per cell.
pub fn render_png(grid: &Array2<f64>, scale: u32, path: &Path) -> Result<()> {
    let (h, w) = grid.dim();
    let img = image::GrayImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = grid[[(y / scale) as usize, (x / scale) as usize]];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Writes `<prefix>_mean.csv` and `<prefix>_variance.csv` (and PNGs when
/// `png` is set) into `dir`; returns the written paths.
pub fn export_heatmap(reward: &InferredReward, size: usize, normalize: bool, png: bool, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, table) in [("mean", &reward.mean), ("variance", &reward.variance)] {
        let grid = heatmap_grid(table, size, normalize)?;
        let csv = dir.join(format!("{prefix}_{name}.csv"));
        std::fs::write(&csv, grid_to_csv(&grid))?;
        written.push(csv);
        if png {
            let shown = if normalize { grid } else { heatmap_grid(table, size, true)? };
            let img = dir.join(format!("{prefix}_{name}.png"));
            render_png(&shown, 16, &img)?;
            written.push(img);
        }
    }
    Ok(written)
}

/// One metric value in the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub env: String,
    pub budget: String,
    pub modalities: String,
    /// A seed number, or `mean` / `se` for aggregate rows.
    pub seed: String,
    pub metric: String,
    pub value: f64,
}

/// Evaluation results in long format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "env,budget,modalities,seed,metric,value";

    pub fn push(&mut self, env: &str, budget: &str, modalities: &str, seed: impl ToString, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            env: env.into(),
            budget: budget.into(),
            modalities: modalities.into(),
            seed: seed.to_string(),
            metric: metric.into(),
            value,
        });
    }

    /// Appends `mean` and `se` rows for every (env, budget, modalities,
    /// metric) group of per-seed rows, in first-appearance order.
    pub fn aggregate(&mut self) {
        let mut keys: Vec<(String, String, String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.env.clone(), r.budget.clone(), r.modalities.clone(), r.metric.clone());
            if r.seed != "mean" && r.seed != "se" && !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (env, budget, mods, metric) in keys {
            let values: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.env == env && r.budget == budget && r.modalities == mods && r.metric == metric)
                .filter(|r| r.seed != "mean" && r.seed != "se")
                .map(|r| r.value)
                .collect();
            let (mean, se) = mean_se(&values);
            self.push(&env, &budget, &mods, "mean", &metric, mean);
            self.push(&env, &budget, &mods, "se", &metric, se);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{},\"{}\",{},{},{},{}", r.env, r.budget, r.modalities, r.seed, r.metric, r.value);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::CSV_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: "missing report header".into() }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.into() };
            let (env, rest) = line.split_once(",\"").ok_or_else(|| bad("expected quoted budget"))?;
            let (budget, rest) = rest.split_once("\",").ok_or_else(|| bad("unterminated budget"))?;
            let f: Vec<&str> = rest.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected modalities,seed,metric,value"));
            }
            let value = f[3].parse().map_err(|_| bad("bad value"))?;
            rows.push(ReportRow {
                env: env.into(),
                budget: budget.into(),
                modalities: f[0].into(),
                seed: f[1].into(),
                metric: f[2].into(),
                value,
            });
        }
        Ok(EvalReport { rows })
    }

    pub fn value(&self, modalities: &str, seed: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.modalities == modalities && r.seed == seed && r.metric == metric).map(|r| r.value)
    }
}

pub fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.iter().any(|p| !(0.0..=0.8).contains(p)) {
        return config_err("perturbation levels must lie in [0, 0.8]");
    }
    Ok(())
}
