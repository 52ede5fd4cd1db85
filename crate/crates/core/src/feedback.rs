//! Simulated human feedback: preferences, demonstrations, ratings and stops.
//!
//! All four modalities are grounded in segments of trajectories from one
//! shared pool of rollouts. A [`FeedbackDataset`] keeps the pool, the typed
//! observations and the simulator constants that the likelihoods need at
//! training time, and round-trips through a line-oriented text format
//! (see [`FeedbackDataset::to_text`]).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::mdp::{boltzmann_policy, rollout, QTable, Step, TabularMdp, Trajectory};
use crate::rng::{self, streams};

pub const FORMAT_HEADER: &str = "mavrl-feedback 1";

/// Contiguous slice of a trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub steps: Vec<Step>,
    pub source_traj: u64,
    pub start_index: usize,
    /// Nominal segment length `L`; `steps.len() <= length`.
    pub length: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Ground-truth return divided by the nominal length.
    pub fn normalized_return(&self, mdp: &TabularMdp) -> f64 {
        mdp.steps_return(&self.steps) / self.length as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceObs {
    pub seg_a: Segment,
    pub seg_b: Segment,
    /// `true` when `seg_a` is preferred.
    pub a_preferred: bool,
}

impl PreferenceObs {
    pub fn winner_loser(&self) -> (&Segment, &Segment) {
        if self.a_preferred {
            (&self.seg_a, &self.seg_b)
        } else {
            (&self.seg_b, &self.seg_a)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoObs {
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingObs {
    pub segment: Segment,
    /// Category in `1..=K`.
    pub rating: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopObs {
    pub segment: Segment,
    /// 1-based step of the stop; `None` when right-censored.
    pub stop_time: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorParams {
    pub beta_traj: f64,
    pub beta_pref: f64,
    pub beta_demo: f64,
    pub segment_len: usize,
    pub categories: usize,
    /// Stop scaling constant `c` in `lambda = c / R_ref`.
    pub stop_scale: f64,
    /// Regret discount.
    pub regret_discount: f64,
    /// Percentile of per-segment maximum cumulative regret used as `R_ref`.
    pub ref_percentile: f64,
    /// Rollouts in the shared trajectory pool.
    pub n_trajectories: usize,
    pub max_steps: usize,
}

impl Default for SimulatorParams {
    /// Grid settings.
    fn default() -> Self {
        SimulatorParams {
            beta_traj: 0.0,
            beta_pref: 5.0,
            beta_demo: 10.0,
            segment_len: 10,
            categories: 5,
            stop_scale: 1.0,
            regret_discount: 0.1,
            ref_percentile: 50.0,
            n_trajectories: 200,
            max_steps: crate::mdp::GRID_MAX_STEPS,
        }
    }
}

impl SimulatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return config_err("rating categories must be at least 2");
        }
        if self.segment_len < 1 {
            return config_err("segment length must be at least 1");
        }
        if !(self.regret_discount > 0.0 && self.regret_discount <= 1.0) {
            return config_err("regret discount must lie in (0, 1]");
        }
        if !(self.stop_scale > 0.0) {
            return config_err("stop scale must be positive");
        }
        if !(0.0..=100.0).contains(&self.ref_percentile) {
            return config_err("reference percentile must lie in [0, 100]");
        }
        if self.max_steps < 1 {
            return config_err("max_steps must be at least 1");
        }
        for (name, b) in [("beta_traj", self.beta_traj), ("beta_pref", self.beta_pref), ("beta_demo", self.beta_demo)] {
            if !b.is_finite() {
                return config_err(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Observation counts per modality `(n_p, n_d, n_r, n_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeedbackBudget {
    pub preferences: usize,
    pub demonstrations: usize,
    pub ratings: usize,
    pub stops: usize,
}

impl FeedbackBudget {
    pub const fn new(preferences: usize, demonstrations: usize, ratings: usize, stops: usize) -> Self {
        FeedbackBudget { preferences, demonstrations, ratings, stops }
    }
}

impl std::fmt::Display for FeedbackBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.preferences, self.demonstrations, self.ratings, self.stops)
    }
}

/// Simulator constants carried into training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMeta {
    pub n_states: usize,
    pub n_actions: usize,
    pub segment_len: usize,
    pub categories: usize,
    pub beta_pref: f64,
    pub beta_demo: f64,
    pub stop_lambda: f64,
    pub stop_rho: f64,
    pub rating_cutpoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeedbackDataset {
    pub meta: DatasetMeta,
    /// Shared rollout pool the segments are cut from.
    pub trajectories: Vec<Trajectory>,
    pub preferences: Vec<PreferenceObs>,
    pub demos: Vec<DemoObs>,
    pub ratings: Vec<RatingObs>,
    pub stops: Vec<StopObs>,
}

/// TD tuple `(s, a, s', a')`; `next_action` is `None` when `s'` is terminal
/// and therefore has value zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub next_action: Option<usize>,
}

/// Rollouts of the Boltzmann policy over `q`, ids `0..n_traj`.
pub fn collect_trajectories<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    q: &QTable,
    beta_traj: f64,
    n_traj: usize,
    max_steps: usize,
    rng: &mut R,
) -> Vec<Trajectory> {
    let policy = boltzmann_policy(q, beta_traj);
    (0..n_traj)
        .map(|i| {
            let mut t = rollout(mdp, &policy, max_steps, rng);
            t.id = i as u64;
            t
        })
        .collect()
}

/// Cuts `n` random segments of nominal length `len`, uniformly over all
/// valid `(trajectory, start)` pairs. Trajectories shorter than `len`
/// contribute a single whole-trajectory segment.
pub fn sample_segments<R: Rng + ?Sized>(trajs: &[Trajectory], len: usize, n: usize, rng: &mut R) -> Result<Vec<Segment>> {
    if len == 0 {
        return config_err("segment length must be at least 1");
    }
    let counts: Vec<usize> = trajs
        .iter()
        .map(|t| if t.is_empty() { 0 } else { t.len().saturating_sub(len) + 1 })
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("cannot sample segments from an empty trajectory pool".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = rng.random_range(0..total);
        let mut ti = 0;
        while k >= counts[ti] {
            k -= counts[ti];
            ti += 1;
        }
        out.push(segment_of(&trajs[ti], k, len));
    }
    Ok(out)
}

fn segment_of(traj: &Trajectory, start: usize, len: usize) -> Segment {
    let end = (start + len).min(traj.len());
    Segment { steps: traj.steps[start..end].to_vec(), source_traj: traj.id, start_index: start, length: len }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bradley-Terry probability that `a` is preferred over `b`.
pub fn preference_probability(mdp: &TabularMdp, a: &Segment, b: &Segment, beta: f64) -> f64 {
    sigmoid(beta * (a.normalized_return(mdp) - b.normalized_return(mdp)))
}

/// Pairs uniformly drawn segments and labels each pair by a Bernoulli draw
/// from the Bradley-Terry model on normalized returns.
pub fn simulate_preferences<R: Rng + ?Sized>(
    segments: &[Segment],
    mdp: &TabularMdp,
    beta_pref: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<PreferenceObs>> {
    if segments.is_empty() {
        return Err(Error::Data("no segments to compare".into()));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.random_range(0..segments.len());
        let j = if segments.len() > 1 {
            let j = rng.random_range(0..segments.len() - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        } else {
            i
        };
        let (a, b) = (&segments[i], &segments[j]);
        let p = preference_probability(mdp, a, b, beta_pref);
        let u: f64 = rng.random();
        out.push(PreferenceObs { seg_a: a.clone(), seg_b: b.clone(), a_preferred: u < p });
    }
    Ok(out)
}

/// Rollouts of `softmax(beta_demo * Q*)`.
pub fn simulate_demonstrations<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    q: &QTable,
    beta_demo: f64,
    n_demo: usize,
    max_steps: usize,
    rng: &mut R,
) -> Vec<DemoObs> {
    collect_trajectories(mdp, q, beta_demo, n_demo, max_steps, rng)
        .into_iter()
        .map(|trajectory| DemoObs { trajectory })
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Category of `value` under ascending `cutpoints`: `k` such that
/// `cut[k-1] < value <= cut[k]`, with unbounded outer bins.
pub fn rating_category(value: f64, cutpoints: &[f64]) -> usize {
    cutpoints.iter().position(|&c| value <= c).unwrap_or(cutpoints.len()) + 1
}

/// Rates segments by quantile cutpoints of their normalized returns.
///
/// When every return is identical the cutpoints carry no information and
/// every segment receives the middle category `ceil(K / 2)`.
pub fn simulate_ratings(segments: &[Segment], mdp: &TabularMdp, categories: usize) -> Result<(Vec<RatingObs>, Vec<f64>)> {
    if categories < 2 {
        return config_err("rating categories must be at least 2");
    }
    if segments.len() < categories {
        return Err(Error::Data(format!("need at least {categories} segments to rate, got {}", segments.len())));
    }
    let returns: Vec<f64> = segments.iter().map(|s| s.normalized_return(mdp)).collect();
    rate_returns(segments, &returns, categories)
}

fn rate_returns(segments: &[Segment], returns: &[f64], categories: usize) -> Result<(Vec<RatingObs>, Vec<f64>)> {
    let cutpoints: Vec<f64> =
        (1..categories).map(|k| percentile(returns, 100.0 * k as f64 / categories as f64)).collect();
    let all_equal = returns.iter().all(|&r| r == returns[0]);
    let obs = segments
        .iter()
        .zip(returns)
        .map(|(seg, &r)| RatingObs {
            segment: seg.clone(),
            rating: if all_equal { categories.div_ceil(2) } else { rating_category(r, &cutpoints) },
        })
        .collect();
    Ok((obs, cutpoints))
}

/// Instantaneous regret of every step under `q`.
pub fn step_regrets(q: &QTable, steps: &[Step]) -> Vec<f64> {
    steps.iter().map(|st| q.state_value(st.state) - q.values[[st.state, st.action]]).collect()
}

/// Discounted cumulative regret `R_t = rho * R_{t-1} + delta_t`.
pub fn cumulative_regret(deltas: &[f64], rho: f64) -> Vec<f64> {
    let mut acc = 0.0;
    deltas
        .iter()
        .map(|&d| {
            acc = rho * acc + d;
            acc
        })
        .collect()
}

/// Stop hazards `h_t = 1 - exp(-lambda R_t)`.
pub fn stop_hazards(cum_regret: &[f64], lambda: f64) -> Vec<f64> {
    cum_regret.iter().map(|&r| -(-lambda * r).exp_m1()).collect()
}

/// Distribution of the stop time: `pmf[t-1] = P(stop at t)` for
/// `t = 1..=len` and the final censoring mass.
pub fn stop_time_pmf(hazards: &[f64]) -> (Vec<f64>, f64) {
    let mut survive = 1.0;
    let pmf = hazards
        .iter()
        .map(|&h| {
            let p = survive * h;
            survive *= 1.0 - h;
            p
        })
        .collect();
    (pmf, survive)
}

/// Sequential Bernoulli stop draw; `None` when the segment survives.
pub fn sample_stop_time<R: Rng + ?Sized>(hazards: &[f64], rng: &mut R) -> Option<usize> {
    for (t, &h) in hazards.iter().enumerate() {
        if h > 0.0 && rng.random::<f64>() < h {
            return Some(t + 1);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopSimulation {
    pub observations: Vec<StopObs>,
    /// Calibrated hazard sensitivity; zero when no segment carried regret.
    pub lambda: f64,
    pub reference_regret: f64,
}

/// Stop feedback from a cumulative-regret hazard calibrated on the batch:
/// `lambda = c / R_ref`, with `R_ref` the configured percentile of the
/// per-segment maximum cumulative regret.
pub fn simulate_stops<R: Rng + ?Sized>(
    segments: &[Segment],
    q: &QTable,
    params: &SimulatorParams,
    rng: &mut R,
) -> Result<StopSimulation> {
    params.validate()?;
    let cum: Vec<Vec<f64>> =
        segments.iter().map(|s| cumulative_regret(&step_regrets(q, &s.steps), params.regret_discount)).collect();
    if cum.is_empty() {
        return Ok(StopSimulation { observations: Vec::new(), lambda: 0.0, reference_regret: 0.0 });
    }
    let peaks: Vec<f64> = cum.iter().map(|c| c.iter().cloned().fold(0.0, f64::max)).collect();
    let reference_regret = percentile(&peaks, params.ref_percentile);
    if !(reference_regret > 0.0) {
        log::warn!("reference regret is zero; every stop observation is censored");
        let observations = segments.iter().map(|s| StopObs { segment: s.clone(), stop_time: None }).collect();
        return Ok(StopSimulation { observations, lambda: 0.0, reference_regret });
    }
    let lambda = params.stop_scale / reference_regret;
    let observations = segments
        .iter()
        .zip(&cum)
        .map(|(s, c)| StopObs { segment: s.clone(), stop_time: sample_stop_time(&stop_hazards(c, lambda), rng) })
        .collect();
    Ok(StopSimulation { observations, lambda, reference_regret })
}

impl FeedbackDataset {
    /// Simulates every modality with a positive budget.
    ///
    /// Each modality draws from its own random stream derived from `seed`,
    /// so changing one budget leaves the others' observations untouched.
    pub fn simulate(
        mdp: &TabularMdp,
        q_star: &QTable,
        params: &SimulatorParams,
        budget: FeedbackBudget,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let trajectories = collect_trajectories(
            mdp,
            q_star,
            params.beta_traj,
            params.n_trajectories,
            params.max_steps,
            &mut rng::derive(seed, streams::TRAJECTORIES),
        );
        let mut meta = DatasetMeta {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            segment_len: params.segment_len,
            categories: params.categories,
            beta_pref: params.beta_pref,
            beta_demo: params.beta_demo,
            stop_lambda: 0.0,
            stop_rho: params.regret_discount,
            rating_cutpoints: Vec::new(),
        };
        let len = params.segment_len;

        let mut preferences = Vec::new();
        if budget.preferences > 0 {
            let mut r = rng::derive(seed, streams::PREFERENCES);
            let segs = sample_segments(&trajectories, len, 2 * budget.preferences, &mut r)?;
            preferences = simulate_preferences(&segs, mdp, params.beta_pref, budget.preferences, &mut r)?;
        }

        let mut demos = simulate_demonstrations(
            mdp,
            q_star,
            params.beta_demo,
            budget.demonstrations,
            params.max_steps,
            &mut rng::derive(seed, streams::DEMONSTRATIONS),
        );
        for (i, d) in demos.iter_mut().enumerate() {
            d.trajectory.id = (trajectories.len() + i) as u64;
        }

        let mut ratings = Vec::new();
        if budget.ratings > 0 {
            let segs = sample_segments(&trajectories, len, budget.ratings, &mut rng::derive(seed, streams::RATINGS))?;
            let (obs, cut) = simulate_ratings(&segs, mdp, params.categories)?;
            ratings = obs;
            meta.rating_cutpoints = cut;
        }

        let mut stops = Vec::new();
        if budget.stops > 0 {
            let mut r = rng::derive(seed, streams::STOPS);
            let segs = sample_segments(&trajectories, len, budget.stops, &mut r)?;
            let sim = simulate_stops(&segs, q_star, params, &mut r)?;
            meta.stop_lambda = sim.lambda;
            stops = sim.observations;
        }

        Ok(FeedbackDataset { meta, trajectories, preferences, demos, ratings, stops })
    }

    pub fn is_empty(&self) -> bool {
        self.preferences.is_empty() && self.demos.is_empty() && self.ratings.is_empty() && self.stops.is_empty()
    }

    /// Same dataset with only the selected modalities kept.
    pub fn restricted(&self, preferences: bool, demos: bool, ratings: bool, stops: bool) -> Self {
        let mut out = self.clone();
        if !preferences {
            out.preferences.clear();
        }
        if !demos {
            out.demos.clear();
        }
        if !ratings {
            out.ratings.clear();
        }
        if !stops {
            out.stops.clear();
        }
        out
    }

    fn all_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().chain(self.demos.iter().map(|d| &d.trajectory))
    }

    /// Serializes to the versioned line format:
    ///
    /// ```text
    /// mavrl-feedback 1
    /// meta <key> <values...>
    /// traj <id> <terminal|truncated:N> <s>,<a>,<s'> ...
    /// pref <traj> <start> <len> <traj> <start> <len> <a|b>
    /// demo <traj>
    /// rating <traj> <start> <len> <k>
    /// stop <traj> <start> <len> <tau|censored>
    /// ```
    ///
    /// Segments are stored as (trajectory id, start, nominal length) and
    /// rebuilt from the trajectory lines on parse. Floats are written in
    /// shortest round-trip form.
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "meta n_states {}", m.n_states);
        let _ = writeln!(out, "meta n_actions {}", m.n_actions);
        let _ = writeln!(out, "meta segment_len {}", m.segment_len);
        let _ = writeln!(out, "meta categories {}", m.categories);
        let _ = writeln!(out, "meta beta_pref {}", m.beta_pref);
        let _ = writeln!(out, "meta beta_demo {}", m.beta_demo);
        let _ = writeln!(out, "meta stop_lambda {}", m.stop_lambda);
        let _ = writeln!(out, "meta stop_rho {}", m.stop_rho);
        let cuts: Vec<String> = m.rating_cutpoints.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "meta cutpoints {}", cuts.join(" "));
        for t in self.all_trajectories() {
            let end = match t.truncated_at {
                None => "terminal".to_string(),
                Some(n) => format!("truncated:{n}"),
            };
            let steps: Vec<String> =
                t.steps.iter().map(|s| format!("{},{},{}", s.state, s.action, s.next_state)).collect();
            let _ = writeln!(out, "traj {} {} {}", t.id, end, steps.join(" "));
        }
        let seg = |s: &Segment| format!("{} {} {}", s.source_traj, s.start_index, s.length);
        for p in &self.preferences {
            let _ = writeln!(out, "pref {} {} {}", seg(&p.seg_a), seg(&p.seg_b), if p.a_preferred { "a" } else { "b" });
        }
        for d in &self.demos {
            let _ = writeln!(out, "demo {}", d.trajectory.id);
        }
        for r in &self.ratings {
            let _ = writeln!(out, "rating {} {}", seg(&r.segment), r.rating);
        }
        for s in &self.stops {
            let tau = s.stop_time.map_or_else(|| "censored".to_string(), |t| t.to_string());
            let _ = writeln!(out, "stop {} {}", seg(&s.segment), tau);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| {
            let l = l.trim();
            !l.is_empty() && !l.starts_with('#')
        });
        match lines.next() {
            Some((_, l)) if l.trim() == FORMAT_HEADER => {}
            Some((i, l)) => return Err(Error::Parse { line: i + 1, msg: format!("unsupported header `{l}`") }),
            None => return Err(Error::Parse { line: 0, msg: "empty input".into() }),
        }

        let mut ds = FeedbackDataset::default();
        let mut trajs: HashMap<u64, Trajectory> = HashMap::new();
        let mut order: Vec<u64> = Vec::new();
        let mut demo_ids: Vec<u64> = Vec::new();
        // segment-bearing lines are resolved after all trajectories are read
        let mut pending: Vec<(usize, Vec<String>)> = Vec::new();

        for (i, raw) in lines {
            let ln = i + 1;
            let perr = |msg: String| Error::Parse { line: ln, msg };
            let toks: Vec<&str> = raw.split_whitespace().collect();
            match toks[0] {
                "meta" => {
                    let key = toks.get(1).ok_or_else(|| perr("missing meta key".into()))?;
                    let vals = &toks[2..];
                    let one = || -> Result<&str> { vals.first().copied().ok_or_else(|| perr(format!("missing value for {key}"))) };
                    let m = &mut ds.meta;
                    match *key {
                        "n_states" => m.n_states = parse_num(one()?, ln)?,
                        "n_actions" => m.n_actions = parse_num(one()?, ln)?,
                        "segment_len" => m.segment_len = parse_num(one()?, ln)?,
                        "categories" => m.categories = parse_num(one()?, ln)?,
                        "beta_pref" => m.beta_pref = parse_num(one()?, ln)?,
                        "beta_demo" => m.beta_demo = parse_num(one()?, ln)?,
                        "stop_lambda" => m.stop_lambda = parse_num(one()?, ln)?,
                        "stop_rho" => m.stop_rho = parse_num(one()?, ln)?,
                        "cutpoints" => {
                            m.rating_cutpoints = vals.iter().map(|v| parse_num(v, ln)).collect::<Result<_>>()?
                        }
                        other => return Err(perr(format!("unknown meta key `{other}`"))),
                    }
                }
                "traj" => {
                    if toks.len() < 3 {
                        return Err(perr("traj needs an id and an end marker".into()));
                    }
                    let id: u64 = parse_num(toks[1], ln)?;
                    let truncated_at = match toks[2] {
                        "terminal" => None,
                        t => match t.strip_prefix("truncated:") {
                            Some(n) => Some(parse_num(n, ln)?),
                            None => return Err(perr(format!("bad end marker `{t}`"))),
                        },
                    };
                    let steps = toks[3..]
                        .iter()
                        .map(|tok| {
                            let parts: Vec<&str> = tok.split(',').collect();
                            if parts.len() != 3 {
                                return Err(perr(format!("bad step `{tok}`")));
                            }
                            Ok(Step {
                                state: parse_num(parts[0], ln)?,
                                action: parse_num(parts[1], ln)?,
                                next_state: parse_num(parts[2], ln)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let traj = Trajectory { id, steps, truncated_at };
                    if !traj.is_chained() {
                        return Err(perr(format!("trajectory {id} is empty or does not chain")));
                    }
                    if trajs.insert(id, traj).is_some() {
                        return Err(perr(format!("duplicate trajectory id {id}")));
                    }
                    order.push(id);
                }
                "demo" => {
                    let id = toks.get(1).ok_or_else(|| perr("demo needs a trajectory id".into()))?;
                    demo_ids.push(parse_num(id, ln)?);
                }
                "pref" | "rating" | "stop" => pending.push((ln, toks.iter().map(|s| s.to_string()).collect())),
                other => return Err(perr(format!("unknown record `{other}`"))),
            }
        }

        let segment = |toks: &[String], ln: usize| -> Result<Segment> {
            let id: u64 = parse_num(&toks[0], ln)?;
            let start: usize = parse_num(&toks[1], ln)?;
            let len: usize = parse_num(&toks[2], ln)?;
            let traj = trajs.get(&id).ok_or(Error::Parse { line: ln, msg: format!("unknown trajectory {id}") })?;
            if len == 0 || start >= traj.len() {
                return Err(Error::Parse { line: ln, msg: format!("segment {start}+{len} outside trajectory {id}") });
            }
            Ok(segment_of(traj, start, len))
        };
        for (ln, toks) in pending {
            let arity = |n: usize| -> Result<()> {
                if toks.len() == n {
                    Ok(())
                } else {
                    Err(Error::Parse { line: ln, msg: format!("`{}` expects {} fields", toks[0], n - 1) })
                }
            };
            match toks[0].as_str() {
                "pref" => {
                    arity(8)?;
                    let a_preferred = match toks[7].as_str() {
                        "a" => true,
                        "b" => false,
                        o => return Err(Error::Parse { line: ln, msg: format!("bad preference label `{o}`") }),
                    };
                    ds.preferences.push(PreferenceObs {
                        seg_a: segment(&toks[1..4], ln)?,
                        seg_b: segment(&toks[4..7], ln)?,
                        a_preferred,
                    });
                }
                "rating" => {
                    arity(5)?;
                    ds.ratings.push(RatingObs { segment: segment(&toks[1..4], ln)?, rating: parse_num(&toks[4], ln)? });
                }
                _ => {
                    arity(5)?;
                    let stop_time = match toks[4].as_str() {
                        "censored" => None,
                        t => Some(parse_num(t, ln)?),
                    };
                    ds.stops.push(StopObs { segment: segment(&toks[1..4], ln)?, stop_time });
                }
            }
        }

        let demo_set: HashSet<u64> = demo_ids.iter().cloned().collect();
        for id in &demo_ids {
            let trajectory = trajs.get(id).cloned().ok_or(Error::Parse { line: 0, msg: format!("unknown demo trajectory {id}") })?;
            ds.demos.push(DemoObs { trajectory });
        }
        ds.trajectories = order.iter().filter(|id| !demo_set.contains(id)).map(|id| trajs[id].clone()).collect();
        ds.validate()?;
        Ok(ds)
    }

    /// Checks observation ranges against the metadata.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let in_range = |st: &Step| st.state < m.n_states && st.next_state < m.n_states && st.action < m.n_actions;
        if !self.all_trajectories().all(|t| t.steps.iter().all(in_range)) {
            return Err(Error::Data("trajectory step outside the declared state/action space".into()));
        }
        if let Some(r) = self.ratings.iter().find(|r| r.rating < 1 || r.rating > m.categories) {
            return Err(Error::Data(format!("rating {} outside 1..={}", r.rating, m.categories)));
        }
        if let Some(s) = self.stops.iter().find(|s| matches!(s.stop_time, Some(t) if t < 1 || t > s.segment.len())) {
            return Err(Error::Data(format!("stop time {:?} outside its segment", s.stop_time)));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse { line, msg: format!("cannot parse `{tok}`") })
}

/// TD tuples from every segment and trajectory underlying the feedback.
///
/// Consecutive step pairs become `(s, a, s', a')`; the last step of a
/// segment has no successor action and is dropped, except when it enters a
/// terminal state (a trajectory that ended without truncation), in which
/// case it is kept with `next_action = None`. Tuples are deduplicated by
/// source position `(trajectory id, step index)` and returned in order of
/// first appearance.
pub fn extract_transitions(ds: &FeedbackDataset) -> Vec<Transition> {
    let by_id: HashMap<u64, &Trajectory> = ds.all_trajectories().map(|t| (t.id, t)).collect();
    let mut seen: HashSet<(u64, usize)> = HashSet::new();
    let mut out = Vec::new();

    let mut take = |traj_id: u64, start: usize, count: usize| {
        let Some(traj) = by_id.get(&traj_id) else { return };
        let end = (start + count).min(traj.len());
        for i in start..end {
            let st = traj.steps[i];
            let next_action = if i + 1 < end {
                Some(traj.steps[i + 1].action)
            } else if i + 1 == traj.len() && traj.truncated_at.is_none() {
                None
            } else {
                continue;
            };
            if seen.insert((traj_id, i)) {
                out.push(Transition { state: st.state, action: st.action, next_state: st.next_state, next_action });
            }
        }
    };

    for p in &ds.preferences {
        take(p.seg_a.source_traj, p.seg_a.start_index, p.seg_a.len());
        take(p.seg_b.source_traj, p.seg_b.start_index, p.seg_b.len());
    }
    for d in &ds.demos {
        take(d.trajectory.id, 0, d.trajectory.len());
    }
    for r in &ds.ratings {
        take(r.segment.source_traj, r.segment.start_index, r.segment.len());
    }
    for s in &ds.stops {
        take(s.segment.source_traj, s.segment.start_index, s.segment.len());
    }
    out
}
