//! Tabular MDPs, gridworld layouts and the exact planning oracles.
//!
//! Rewards are state-only and delivered on entering a state: the step
//! `(s, a, s')` earns `reward[s']` unless `s` is already terminal. Terminal
//! states self-loop and earn nothing further.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const GRID_ACTIONS: usize = 5;

/// Discount used for all grid environments.
pub const GRID_GAMMA: f64 = 0.99;
/// Episode cap used for grid rollouts.
pub const GRID_MAX_STEPS: usize = 100;
/// Default value-iteration tolerance.
pub const VI_TOL: f64 = 1e-8;

const ROW_SUM_TOL: f64 = 1e-9;
const POLICY_EVAL_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Cliff,
    Sparse,
    Trap,
}

impl GridKind {
    pub const ALL: [GridKind; 3] = [GridKind::Cliff, GridKind::Sparse, GridKind::Trap];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Cliff => "grid_cliff",
            GridKind::Sparse => "grid_sparse",
            GridKind::Trap => "grid_trap",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches("grid_") {
            "cliff" => Ok(GridKind::Cliff),
            "sparse" => Ok(GridKind::Sparse),
            "trap" => Ok(GridKind::Trap),
            other => config_err(format!("unknown grid environment `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Start,
    Goal,
    Cliff,
    Trap,
    Empty,
}

impl Cell {
    fn symbol(self) -> char {
        match self {
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Cliff => 'C',
            Cell::Trap => 'T',
            Cell::Empty => '.',
        }
    }
}

/// Cell map of a square grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub size: usize,
    pub cells: Vec<Cell>,
}

impl GridLayout {
    /// One character per cell (`S`, `G`, `C`, `T`, `.`), one line per row.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.size * (self.size + 1));
        for row in self.cells.chunks(self.size) {
            out.extend(row.iter().map(|c| c.symbol()));
            out.push('\n');
        }
        out
    }
}

/// One transition of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Identifier within a feedback dataset; 0 for free-standing rollouts.
    pub id: u64,
    pub steps: Vec<Step>,
    /// Set when the rollout hit its step cap before reaching a terminal state.
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Consecutive steps chain and the trajectory is nonempty.
    pub fn is_chained(&self) -> bool {
        !self.steps.is_empty() && self.steps.windows(2).all(|w| w[0].next_state == w[1].state)
    }
}

/// Action values, `[n_states x n_actions]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Array2<f64>,
}

impl QTable {
    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.values.ncols()
    }

    pub fn state_value(&self, s: usize) -> f64 {
        self.values.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lowest-index action whose value is within a small relative band of the
    /// row maximum. The band absorbs value-iteration error so that exact
    /// ties do not flip under rescaling of the reward.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = self.values.row(s);
        let best = self.state_value(s);
        let band = 1e-6 * best.abs().max(1.0);
        row.iter().position(|&q| q >= best - band).unwrap_or(0)
    }

    pub fn greedy_policy(&self) -> Policy {
        let mut probs = Array2::zeros(self.values.raw_dim());
        for s in 0..self.n_states() {
            probs[[s, self.greedy_action(s)]] = 1.0;
        }
        Policy { probs }
    }
}

/// Stochastic policy, `[n_states x n_actions]`, rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub probs: Array2<f64>,
}

impl Policy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    /// Deterministic policy from one action per state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Policy { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    /// Most probable action in `s`, lowest index on ties.
    pub fn mode(&self, s: usize) -> usize {
        let row = self.probs.row(s);
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter().position(|&p| p == best).unwrap_or(0)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.probs.row(s).iter().cloned(), rng)
    }
}

/// Draws an index from a probability vector by inversion.
pub fn sample_categorical<R, I>(probs: I, rng: &mut R) -> usize
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = f64>,
{
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Array3<f64>,
    reward: Array1<f64>,
    gamma: f64,
    terminal: Vec<bool>,
    start_state: usize,
    // sparse view of `transition`, indexed by s * n_actions + a
    successors: Vec<Vec<(usize, f64)>>,
    layout: Option<GridLayout>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array1<f64>,
        gamma: f64,
        terminal: Vec<bool>,
        start_state: usize,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("MDP needs at least one state and one action".into()));
        }
        if n_next != n_states || reward.len() != n_states || terminal.len() != n_states {
            return Err(Error::Shape(format!(
                "transition {:?}, reward {}, terminal {} disagree",
                transition.dim(),
                reward.len(),
                terminal.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return config_err(format!("discount must lie in [0, 1), got {gamma}"));
        }
        if start_state >= n_states {
            return config_err(format!("start state {start_state} out of range"));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("reward table has non-finite entries".into()));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                if row.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                    return Err(Error::Data(format!("row ({s}, {a}) has entries outside [0, 1]")));
                }
                let total: f64 = row.sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Data(format!("row ({s}, {a}) sums to {total}")));
                }
                if terminal[s] && row[s] != 1.0 {
                    return Err(Error::Data(format!("terminal state {s} must self-loop")));
                }
            }
        }
        let successors = build_successors(&transition);
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            terminal,
            start_state,
            successors,
            layout: None,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Array1<f64> {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn layout(&self) -> Option<&GridLayout> {
        self.layout.as_ref()
    }

    /// Nonzero successors of `(s, a)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions + a]
    }

    /// Reward earned by a single step under `reward`.
    pub fn step_reward(&self, step: &Step, reward: &[f64]) -> f64 {
        if self.terminal[step.state] {
            0.0
        } else {
            reward[step.next_state]
        }
    }

    /// Undiscounted sum of step rewards under the ground-truth reward.
    pub fn steps_return(&self, steps: &[Step]) -> f64 {
        let reward = self.reward.as_slice().expect("contiguous reward");
        steps.iter().map(|st| self.step_reward(st, reward)).sum()
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return config_err(format!("discount must lie in [0, 1), got {gamma}"));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    fn with_transition(&self, transition: Array3<f64>) -> Self {
        let successors = build_successors(&transition);
        TabularMdp { transition, successors, ..self.clone() }
    }
}

fn build_successors(transition: &Array3<f64>) -> Vec<Vec<(usize, f64)>> {
    let (n_states, n_actions, _) = transition.dim();
    let mut out = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            out.push(
                transition
                    .slice(ndarray::s![s, a, ..])
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(n, &p)| (n, p))
                    .collect(),
            );
        }
    }
    out
}

/// Builds one of the three `size x size` gridworlds.
///
/// Layouts (row, column), with the goal always at `(size-1, size-1)`:
/// - sparse: start `(0, 0)`, +1 at the goal, 0 elsewhere;
/// - cliff: start `(size-1, 0)`, -1 on `(size-1, 1..=size-2)`;
/// - trap: start `(0, 0)`, -1 on the 2x2 block at rows/cols `size/2-1 ..= size/2`
///   (cells that coincide with the start or goal are left out).
///
/// Goal, cliff and trap cells are terminal. Moves are deterministic and a
/// move off the grid keeps the agent in place.
pub fn build_grid_env(kind: GridKind, size: usize) -> Result<TabularMdp> {
    if size < 3 {
        return config_err(format!("grid size must be at least 3, got {size}"));
    }
    let n = size * size;
    let idx = |r: usize, c: usize| r * size + c;
    let goal = idx(size - 1, size - 1);
    let start = match kind {
        GridKind::Cliff => idx(size - 1, 0),
        GridKind::Sparse | GridKind::Trap => idx(0, 0),
    };

    let mut cells = vec![Cell::Empty; n];
    match kind {
        GridKind::Sparse => {}
        GridKind::Cliff => {
            for c in 1..=size - 2 {
                cells[idx(size - 1, c)] = Cell::Cliff;
            }
        }
        GridKind::Trap => {
            let lo = size / 2 - 1;
            for r in lo..=lo + 1 {
                for c in lo..=lo + 1 {
                    let s = idx(r, c);
                    if s != start && s != goal {
                        cells[s] = Cell::Trap;
                    }
                }
            }
        }
    }
    cells[start] = Cell::Start;
    cells[goal] = Cell::Goal;

    let mut reward = Array1::zeros(n);
    let mut terminal = vec![false; n];
    for (s, cell) in cells.iter().enumerate() {
        match cell {
            Cell::Goal => {
                reward[s] = 1.0;
                terminal[s] = true;
            }
            Cell::Cliff | Cell::Trap => {
                reward[s] = -1.0;
                terminal[s] = true;
            }
            Cell::Start | Cell::Empty => {}
        }
    }

    let mut transition = Array3::zeros((n, GRID_ACTIONS, n));
    for r in 0..size {
        for c in 0..size {
            let s = idx(r, c);
            for a in 0..GRID_ACTIONS {
                let next = if terminal[s] {
                    s
                } else {
                    match a {
                        UP if r > 0 => idx(r - 1, c),
                        DOWN if r + 1 < size => idx(r + 1, c),
                        LEFT if c > 0 => idx(r, c - 1),
                        RIGHT if c + 1 < size => idx(r, c + 1),
                        _ => s,
                    }
                };
                transition[[s, a, next]] = 1.0;
            }
        }
    }

    let mut mdp = TabularMdp::new(transition, reward, GRID_GAMMA, terminal, start)?;
    mdp.layout = Some(GridLayout { size, cells });
    Ok(mdp)
}

/// Mixes every action's transition row with the rows of the other actions:
/// the intended action executes with probability `1 - p_rand`, each other
/// action with `p_rand / (|A| - 1)`.
pub fn perturb_random_action(mdp: &TabularMdp, p_rand: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&p_rand) {
        return config_err(format!("random-action probability must lie in [0, 1], got {p_rand}"));
    }
    let n_actions = mdp.n_actions;
    if p_rand == 0.0 || n_actions == 1 {
        return Ok(mdp.clone());
    }
    let other = p_rand / (n_actions - 1) as f64;
    let base = &mdp.transition;
    let mut mixed = Array3::zeros(base.raw_dim());
    for s in 0..mdp.n_states {
        for a in 0..n_actions {
            for b in 0..n_actions {
                let w = if a == b { 1.0 - p_rand } else { other };
                for &(next, p) in mdp.successors(s, b) {
                    mixed[[s, a, next]] += w * p;
                }
            }
        }
    }
    Ok(mdp.with_transition(mixed))
}

fn reward_slice<'a>(mdp: &'a TabularMdp, reward_override: Option<&'a [f64]>) -> Result<&'a [f64]> {
    let reward = match reward_override {
        Some(r) => r,
        None => mdp.reward.as_slice().expect("contiguous reward"),
    };
    if reward.len() != mdp.n_states {
        return Err(Error::Shape(format!(
            "reward table has {} entries for {} states",
            reward.len(),
            mdp.n_states
        )));
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("reward table has non-finite entries".into()));
    }
    Ok(reward)
}

/// Optimal action values by Bellman-optimality iteration.
///
/// Stops once the sup-norm Bellman residual of the returned table is at
/// most `tol`.
pub fn value_iteration(mdp: &TabularMdp, reward_override: Option<&[f64]>, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return config_err(format!("value-iteration tolerance must be positive, got {tol}"));
    }
    let reward = reward_slice(mdp, reward_override)?;
    let (ns, na, gamma) = (mdp.n_states, mdp.n_actions, mdp.gamma);

    let mut q = Array2::<f64>::zeros((ns, na));
    let mut v = vec![0.0; ns];
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..na {
                let mut acc = 0.0;
                for &(next, p) in mdp.successors(s, a) {
                    let cont = if mdp.terminal[next] { 0.0 } else { v[next] };
                    acc += p * (reward[next] + gamma * cont);
                }
                delta = delta.max((acc - q[[s, a]]).abs());
                q[[s, a]] = acc;
            }
        }
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        // residual(Q_{k+1}) <= gamma * ||Q_{k+1} - Q_k||
        if gamma * delta <= tol {
            return Ok(QTable { values: q });
        }
    }
    Err(Error::Numeric("value iteration did not converge".into()))
}

/// Sup-norm Bellman-optimality residual of `q`.
pub fn bellman_residual(mdp: &TabularMdp, q: &QTable, reward_override: Option<&[f64]>) -> Result<f64> {
    let reward = reward_slice(mdp, reward_override)?;
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let target = if mdp.terminal[s] {
                0.0
            } else {
                mdp.successors(s, a)
                    .iter()
                    .map(|&(n, p)| {
                        let cont = if mdp.terminal[n] { 0.0 } else { q.state_value(n) };
                        p * (reward[n] + mdp.gamma * cont)
                    })
                    .sum()
            };
            worst = worst.max((target - q.values[[s, a]]).abs());
        }
    }
    Ok(worst)
}

/// Row-wise softmax of `beta * Q` with max subtraction.
pub fn boltzmann_policy(q: &QTable, beta: f64) -> Policy {
    let mut probs = Array2::zeros(q.values.raw_dim());
    for (s, row) in q.values.rows().into_iter().enumerate() {
        let scaled: Vec<f64> = row.iter().map(|&x| beta * x).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (a, e) in exps.into_iter().enumerate() {
            probs[[s, a]] = e / z;
        }
    }
    Policy { probs }
}

/// Samples one episode from the start state.
///
/// The episode ends on entering a terminal state or after `max_steps`
/// steps. A terminal start yields a single self-loop step.
pub fn rollout<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &Policy, max_steps: usize, rng: &mut R) -> Trajectory {
    let mut steps = Vec::new();
    let mut state = mdp.start_state;
    let mut truncated_at = None;
    if mdp.terminal[state] {
        let action = policy.sample_action(state, rng);
        steps.push(Step { state, action, next_state: state });
        return Trajectory { id: 0, steps, truncated_at };
    }
    for t in 0..max_steps.max(1) {
        let action = policy.sample_action(state, rng);
        let succ = mdp.successors(state, action);
        let next_state = if succ.len() == 1 {
            succ[0].0
        } else {
            succ[sample_categorical(succ.iter().map(|&(_, p)| p), rng)].0
        };
        steps.push(Step { state, action, next_state });
        state = next_state;
        if mdp.terminal[state] {
            break;
        }
        if t + 1 == max_steps.max(1) {
            truncated_at = Some(t + 1);
        }
    }
    Trajectory { id: 0, steps, truncated_at }
}

/// Per-state discounted values of `policy` by iterative policy evaluation.
pub fn policy_state_values(mdp: &TabularMdp, policy: &Policy, reward_override: Option<&[f64]>) -> Result<Vec<f64>> {
    let reward = reward_slice(mdp, reward_override)?;
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(Error::Shape("policy shape does not match the MDP".into()));
    }
    debug_assert!(policy
        .probs
        .rows()
        .into_iter()
        .all(|r| (r.sum() - 1.0).abs() < 1e-9));
    let (ns, na, gamma) = (mdp.n_states, mdp.n_actions, mdp.gamma);

    // expected immediate reward and next-state kernel under the policy
    let mut r_pi = vec![0.0; ns];
    let mut kernel: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
    for s in 0..ns {
        if mdp.terminal[s] {
            continue;
        }
        let mut dense: Vec<(usize, f64)> = Vec::new();
        for a in 0..na {
            let pa = policy.probs[[s, a]];
            if pa == 0.0 {
                continue;
            }
            for &(n, p) in mdp.successors(s, a) {
                r_pi[s] += pa * p * reward[n];
                if !mdp.terminal[n] {
                    match dense.iter_mut().find(|(m, _)| *m == n) {
                        Some(e) => e.1 += pa * p,
                        None => dense.push((n, pa * p)),
                    }
                }
            }
        }
        kernel[s] = dense;
    }

    let mut v = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let val = r_pi[s] + gamma * kernel[s].iter().map(|&(n, p)| p * v[n]).sum::<f64>();
            delta = delta.max((val - v[s]).abs());
            next[s] = val;
        }
        std::mem::swap(&mut v, &mut next);
        if gamma * delta <= POLICY_EVAL_TOL {
            return Ok(v);
        }
    }
    Err(Error::Numeric("policy evaluation did not converge".into()))
}

/// Expected discounted return of `policy` from the start state.
pub fn policy_value(mdp: &TabularMdp, policy: &Policy, reward_override: Option<&[f64]>) -> Result<f64> {
    Ok(policy_state_values(mdp, policy, reward_override)?[mdp.start_state])
}
