//! Feedback likelihoods, the variational objective and the training loop.
//!
//! The reward encoder maps a one-hot state to `(mu, log sigma^2)` of the
//! reward earned on entering that state; the Q-network maps a one-hot state
//! to one value per action. Because the state space is finite, every step
//! evaluates both networks on all states at once and the loss terms
//! accumulate gradients into per-state head tables ([`HeadGrads`]), which
//! are then pushed back through the networks in one backward pass.
//!
//! The minimized loss is
//!
//! ```text
//! sum_m NLL_m + lambda_kl * KL(q || N(0, 1)) + lambda_td * TD
//! ```
//!
//! with `TD` the negative Gaussian log-density of the Bellman difference
//! `Q(s, a) - gamma * Q(s', a')` under the encoder's reward distribution.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::feedback::{
    extract_transitions, sigmoid, DatasetMeta, FeedbackDataset, PreferenceObs, RatingObs, Segment, StopObs, Transition,
};
use crate::mdp::Step;
use crate::nn::{reparameterize, AdamW, AdamWConfig, Checkpoint, Input, Mlp, LOGVAR_MAX, LOGVAR_MIN};
use crate::rng::{self, streams};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_kl: f64,
    pub lambda_td: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub gamma: f64,
    pub hidden: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Grid settings.
    fn default() -> Self {
        TrainConfig {
            lambda_kl: 1.0,
            lambda_td: 1.0,
            batch_size: 32,
            learning_rate: 5e-4,
            steps: 20_000,
            gamma: crate::mdp::GRID_GAMMA,
            hidden: 64,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_td >= 0.0) {
            return config_err("lambda_kl and lambda_td must be non-negative");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.hidden == 0 {
            return config_err("hidden width must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return config_err("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return config_err("gamma must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Likelihood constants shared with the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodParams {
    pub beta_pref: f64,
    pub beta_demo: f64,
    pub stop_lambda: f64,
    pub stop_rho: f64,
}

impl LikelihoodParams {
    pub fn from_meta(meta: &DatasetMeta) -> Self {
        LikelihoodParams {
            beta_pref: meta.beta_pref,
            beta_demo: meta.beta_demo,
            stop_lambda: meta.stop_lambda,
            stop_rho: meta.stop_rho,
        }
    }
}

/// Ordered-logit cutpoints `psi_1 < ... < psi_{K-1}`, stored as a free base
/// value plus softplus-transformed gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingHead {
    pub base: f64,
    pub raw_gaps: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl RatingHead {
    /// Unit-spaced cutpoints centred on zero.
    pub fn new(categories: usize) -> Self {
        let k = categories.max(2);
        RatingHead { base: -((k - 2) as f64) / 2.0, raw_gaps: vec![inverse_softplus(1.0); k - 2] }
    }

    pub fn categories(&self) -> usize {
        self.raw_gaps.len() + 2
    }

    pub fn cutpoints(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.raw_gaps.len() + 1);
        let mut c = self.base;
        out.push(c);
        for &g in &self.raw_gaps {
            c += softplus(g);
            out.push(c);
        }
        out
    }

    /// Chain rule from cutpoint gradients to `(base, raw_gaps)`.
    fn param_grads(&self, d_cut: &[f64]) -> (f64, Vec<f64>) {
        let d_base: f64 = d_cut.iter().sum();
        // psi_{j+2} onward depend on raw_gaps[j]
        let mut tail = 0.0;
        let mut d_gaps = vec![0.0; self.raw_gaps.len()];
        for j in (0..self.raw_gaps.len()).rev() {
            tail += d_cut[j + 1];
            d_gaps[j] = tail * sigmoid(self.raw_gaps[j]);
        }
        (d_base, d_gaps)
    }
}

/// Encoder and Q-network outputs for every state.
#[derive(Debug, Clone)]
pub struct Heads {
    pub mu: Vec<f64>,
    /// Log-variance after clamping to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Vec<f64>,
    /// `false` where the clamp is active and the gradient vanishes.
    pub logvar_free: Vec<bool>,
    pub q: Array2<f64>,
    pub cutpoints: Vec<f64>,
}

impl Heads {
    pub fn variance(&self, s: usize) -> f64 {
        self.logvar[s].exp()
    }
}

/// Loss gradients with respect to the head tables.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub q: Array2<f64>,
    pub cutpoints: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(heads: &Heads) -> Self {
        HeadGrads {
            mu: vec![0.0; heads.mu.len()],
            logvar: vec![0.0; heads.logvar.len()],
            q: Array2::zeros(heads.q.raw_dim()),
            cutpoints: vec![0.0; heads.cutpoints.len()],
        }
    }

    fn add_scaled(&mut self, other: &HeadGrads, w: f64) {
        self.mu.iter_mut().zip(&other.mu).for_each(|(a, b)| *a += w * b);
        self.logvar.iter_mut().zip(&other.logvar).for_each(|(a, b)| *a += w * b);
        self.q.scaled_add(w, &other.q);
        self.cutpoints.iter_mut().zip(&other.cutpoints).for_each(|(a, b)| *a += w * b);
    }
}

/// Reparameterized normalized return of a segment: sampled per-step
/// rewards summed and divided by the nominal length. Returns the value and
/// the `(state, d/dmu, d/dlogvar)` contributions of each sampled step.
fn sampled_return<I: Iterator<Item = f64>>(heads: &Heads, seg: &Segment, eps: &mut I, out: &mut Vec<(usize, f64, f64)>) -> f64 {
    out.clear();
    let scale = 1.0 / seg.length as f64;
    let mut total = 0.0;
    for st in &seg.steps {
        let s = st.next_state;
        let e = eps.next().expect("noise stream exhausted");
        let r = reparameterize(heads.mu[s], heads.logvar[s], e);
        total += r.value;
        out.push((s, r.d_mu * scale, r.d_logvar * scale));
    }
    total * scale
}

fn push_return_grad(grads: &mut HeadGrads, parts: &[(usize, f64, f64)], g: f64) {
    for &(s, dm, dl) in parts {
        grads.mu[s] += g * dm;
        grads.logvar[s] += g * dl;
    }
}

/// Mean Bradley-Terry negative log-likelihood,
/// `-log sigma(beta (R_winner - R_loser))`, over sampled normalized returns.
pub fn preference_nll<I: Iterator<Item = f64>>(
    heads: &Heads,
    batch: &[&PreferenceObs],
    beta: f64,
    eps: &mut I,
    grads: &mut HeadGrads,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    for obs in batch {
        let ra = sampled_return(heads, &obs.seg_a, eps, &mut pa);
        let rb = sampled_return(heads, &obs.seg_b, eps, &mut pb);
        let sign = if obs.a_preferred { 1.0 } else { -1.0 };
        let margin = beta * sign * (ra - rb);
        // -log sigma(m) = softplus(-m)
        loss += softplus(-margin);
        let d_margin = -sigmoid(-margin) / n;
        push_return_grad(grads, &pa, d_margin * beta * sign);
        push_return_grad(grads, &pb, -d_margin * beta * sign);
    }
    loss / n
}

/// Mean per-step cross-entropy of demonstrated actions under
/// `softmax(beta * Q(s, .))`.
pub fn demo_nll(heads: &Heads, steps: &[Step], beta: f64, grads: &mut HeadGrads) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    let n = steps.len() as f64;
    let mut loss = 0.0;
    for st in steps {
        let row = heads.q.row(st.state);
        let max = row.iter().map(|&q| beta * q).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&q| (beta * q - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - beta * row[st.action];
        for (b, &q) in row.iter().enumerate() {
            let p = (beta * q - log_z).exp();
            let ind = if b == st.action { 1.0 } else { 0.0 };
            grads.q[[st.state, b]] += beta * (p - ind) / n;
        }
    }
    loss / n
}

pub fn logistic_cdf(x: f64) -> f64 {
    sigmoid(x)
}

fn logistic_pdf(x: f64) -> f64 {
    let f = sigmoid(x);
    f * (1.0 - f)
}

/// `F(upper) - F(lower)` without cancellation in the upper tail.
fn cdf_band(lower: f64, upper: f64) -> f64 {
    if lower > 0.0 {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

/// Ordered-logit probability of each category `1..=K` at latent value `r`.
pub fn rating_probabilities(r: f64, cutpoints: &[f64]) -> Vec<f64> {
    let k = cutpoints.len() + 1;
    (1..=k)
        .map(|y| {
            let upper = if y == k { f64::INFINITY } else { cutpoints[y - 1] - r };
            let lower = if y == 1 { f64::NEG_INFINITY } else { cutpoints[y - 2] - r };
            cdf_band(lower, upper)
        })
        .collect()
}

/// Mean ordered-logit negative log-likelihood of the observed ratings at
/// the sampled normalized segment returns.
pub fn rating_nll<I: Iterator<Item = f64>>(heads: &Heads, batch: &[&RatingObs], eps: &mut I, grads: &mut HeadGrads) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let cut = &heads.cutpoints;
    let k = cut.len() + 1;
    let mut parts = Vec::new();
    let mut loss = 0.0;
    for obs in batch {
        let r = sampled_return(heads, &obs.segment, eps, &mut parts);
        let y = obs.rating;
        let upper = if y == k { f64::INFINITY } else { cut[y - 1] - r };
        let lower = if y == 1 { f64::NEG_INFINITY } else { cut[y - 2] - r };
        let p = cdf_band(lower, upper);
        if p < PROB_FLOOR {
            loss -= PROB_FLOOR.ln();
            continue;
        }
        loss -= p.ln();
        let f_up = if upper.is_finite() { logistic_pdf(upper) } else { 0.0 };
        let f_lo = if lower.is_finite() { logistic_pdf(lower) } else { 0.0 };
        let g = -1.0 / (p * n);
        // dp/dr = -f_up + f_lo
        push_return_grad(grads, &parts, g * (f_lo - f_up));
        if y < k {
            grads.cutpoints[y - 1] += g * f_up;
        }
        if y > 1 {
            grads.cutpoints[y - 2] -= g * f_lo;
        }
    }
    loss / n
}

/// Negative log-likelihood of one stop observation given per-step regrets.
///
/// Stopped at `tau`: `lambda * sum_{t<tau} R_t - log h_tau`; censored:
/// `lambda * sum_t R_t`. `h_tau` is floored at [`PROB_FLOOR`]. Also returns
/// the gradient with respect to each regret.
pub fn stop_nll_from_regrets(deltas: &[f64], stop_time: Option<usize>, lambda: f64, rho: f64) -> (f64, Vec<f64>) {
    let cum = crate::feedback::cumulative_regret(deltas, rho);
    let horizon = stop_time.unwrap_or(cum.len());
    let mut d_cum = vec![0.0; cum.len()];
    let mut loss = 0.0;
    let survived = if stop_time.is_some() { horizon - 1 } else { horizon };
    for t in 0..survived {
        loss += lambda * cum[t];
        d_cum[t] = lambda;
    }
    if let Some(tau) = stop_time {
        let x = lambda * cum[tau - 1];
        let h = -(-x).exp_m1();
        if h < PROB_FLOOR {
            loss -= PROB_FLOOR.ln();
        } else {
            loss -= h.ln();
            // d(-log h)/dR = -lambda / (e^{lambda R} - 1)
            d_cum[tau - 1] = -lambda / x.exp_m1();
        }
    }
    // back through R_t = rho R_{t-1} + delta_t
    let mut d_delta = vec![0.0; deltas.len()];
    let mut carry = 0.0;
    for t in (0..deltas.len()).rev() {
        carry = d_cum[t] + rho * carry;
        d_delta[t] = carry;
    }
    (loss, d_delta)
}

/// Mean stop negative log-likelihood with regrets
/// `max_b Q(s_t, b) - Q(s_t, a_t)` taken from the Q head.
pub fn stop_nll(heads: &Heads, batch: &[&StopObs], lambda: f64, rho: f64, grads: &mut HeadGrads) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for obs in batch {
        let steps = &obs.segment.steps;
        let mut deltas = Vec::with_capacity(steps.len());
        let mut best = Vec::with_capacity(steps.len());
        for st in steps {
            let row = heads.q.row(st.state);
            let (b, qmax) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &q)| if q > acc.1 { (i, q) } else { acc });
            deltas.push(qmax - row[st.action]);
            best.push(b);
        }
        let (l, d_delta) = stop_nll_from_regrets(&deltas, obs.stop_time, lambda, rho);
        loss += l;
        for ((st, &b), &g) in steps.iter().zip(&best).zip(&d_delta) {
            if b != st.action {
                grads.q[[st.state, b]] += g / n;
                grads.q[[st.state, st.action]] -= g / n;
            }
        }
    }
    loss / n
}

/// `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn gaussian_kl(mu: f64, logvar: f64) -> f64 {
    0.5 * (logvar.exp() + mu * mu - 1.0 - logvar)
}

/// Mean KL to the standard-normal prior over `states`.
pub fn kl_term(heads: &Heads, states: &[usize], grads: &mut HeadGrads) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let n = states.len() as f64;
    let mut total = 0.0;
    for &s in states {
        let (mu, lv) = (heads.mu[s], heads.logvar[s]);
        total += gaussian_kl(mu, lv);
        grads.mu[s] += mu / n;
        grads.logvar[s] += 0.5 * (lv.exp() - 1.0) / n;
    }
    total / n
}

/// Mean negative Gaussian log-density of the Bellman difference
/// `delta = Q(s, a) - gamma Q(s', a')` under `N(mu(s'), sigma^2(s'))`.
/// A terminal successor (`next_action = None`) contributes zero value.
pub fn td_loss(heads: &Heads, batch: &[Transition], gamma: f64, grads: &mut HeadGrads) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut total = 0.0;
    for tr in batch {
        let next_q = tr.next_action.map_or(0.0, |a| heads.q[[tr.next_state, a]]);
        let delta = heads.q[[tr.state, tr.action]] - gamma * next_q;
        let s = tr.next_state;
        let (mu, lv) = (heads.mu[s], heads.logvar[s]);
        let var = lv.exp();
        let resid = delta - mu;
        total += half_log_2pi + 0.5 * lv + resid * resid / (2.0 * var);
        let d_delta = resid / var / n;
        grads.q[[tr.state, tr.action]] += d_delta;
        if let Some(a) = tr.next_action {
            grads.q[[tr.next_state, a]] -= gamma * d_delta;
        }
        grads.mu[s] -= d_delta;
        grads.logvar[s] += (0.5 - resid * resid / (2.0 * var)) / n;
    }
    total / n
}

/// One mini-batch per modality plus the TD transitions.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub preferences: Vec<&'a PreferenceObs>,
    pub demo_steps: Vec<Step>,
    pub ratings: Vec<&'a RatingObs>,
    pub stops: Vec<&'a StopObs>,
    pub transitions: Vec<Transition>,
}

impl Batch<'_> {
    pub fn is_empty(&self) -> bool {
        self.preferences.is_empty()
            && self.demo_steps.is_empty()
            && self.ratings.is_empty()
            && self.stops.is_empty()
            && self.transitions.is_empty()
    }

    /// Number of reparameterized reward draws the batch consumes.
    pub fn reward_queries(&self) -> usize {
        let seg = |s: &Segment| s.steps.len();
        self.preferences.iter().map(|p| seg(&p.seg_a) + seg(&p.seg_b)).sum::<usize>()
            + self.ratings.iter().map(|r| seg(&r.segment)).sum::<usize>()
    }

    fn has_feedback(&self) -> bool {
        !(self.preferences.is_empty() && self.demo_steps.is_empty() && self.ratings.is_empty() && self.stops.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Preference,
    Demo,
    Rating,
    Stop,
    Kl,
    Td,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Preference, Term::Demo, Term::Rating, Term::Stop, Term::Kl, Term::Td];
}

/// Weight applied to each term when forming the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub preference: f64,
    pub demo: f64,
    pub rating: f64,
    pub stop: f64,
    pub kl: f64,
    pub td: f64,
}

impl TermWeights {
    pub fn objective(lambda_kl: f64, lambda_td: f64) -> Self {
        TermWeights { preference: 1.0, demo: 1.0, rating: 1.0, stop: 1.0, kl: lambda_kl, td: lambda_td }
    }

    /// Only `term`, with unit weight.
    pub fn only(term: Term) -> Self {
        let mut w = TermWeights { preference: 0.0, demo: 0.0, rating: 0.0, stop: 0.0, kl: 0.0, td: 0.0 };
        *w.get_mut(term) = 1.0;
        w
    }

    fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Preference => &mut self.preference,
            Term::Demo => &mut self.demo,
            Term::Rating => &mut self.rating,
            Term::Stop => &mut self.stop,
            Term::Kl => &mut self.kl,
            Term::Td => &mut self.td,
        }
    }
}

/// Per-term losses (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub preference: f64,
    pub demo: f64,
    pub rating: f64,
    pub stop: f64,
    pub kl: f64,
    pub td: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Preference => self.preference,
            Term::Demo => self.demo,
            Term::Rating => self.rating,
            Term::Stop => self.stop,
            Term::Kl => self.kl,
            Term::Td => self.td,
        }
    }
}

/// Objective constants for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub likelihood: LikelihoodParams,
    pub gamma: f64,
    pub weights: TermWeights,
}

/// Trained (or training) model: encoder, Q-network and rating cutpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MavrlModel {
    pub encoder: Mlp,
    pub qnet: Mlp,
    pub rating_head: RatingHead,
}

impl MavrlModel {
    pub fn new<R: Rng + ?Sized>(n_states: usize, n_actions: usize, hidden: usize, categories: usize, rng: &mut R) -> Self {
        MavrlModel {
            encoder: Mlp::new(n_states, hidden, 2, rng),
            qnet: Mlp::new(n_states, hidden, n_actions, rng),
            rating_head: RatingHead::new(categories),
        }
    }

    pub fn n_states(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.qnet.output_dim()
    }

    pub fn heads(&self) -> Heads {
        let n = self.n_states();
        let enc = self.encoder.forward_batch(Input::Identity(n)).expect("encoder shape");
        let q = self.qnet.forward_batch(Input::Identity(n)).expect("q-network shape");
        self.heads_from(enc.output(), q.output().clone())
    }

    fn heads_from(&self, enc_out: &Array2<f64>, q: Array2<f64>) -> Heads {
        let mu = enc_out.column(0).to_vec();
        let raw = enc_out.column(1);
        let logvar = raw.iter().map(|&v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        let logvar_free = raw.iter().map(|&v| (LOGVAR_MIN..=LOGVAR_MAX).contains(&v)).collect();
        Heads { mu, logvar, logvar_free, q, cutpoints: self.rating_head.cutpoints() }
    }

    /// Losses and the flat parameter gradient of the weighted total.
    ///
    /// `eps` supplies one standard-normal draw per reward query, in batch
    /// order (preference pairs, then ratings).
    pub fn evaluate(&self, batch: &Batch<'_>, eps: &[f64], objective: &Objective) -> Result<(LossBreakdown, Vec<f64>)> {
        if !batch.has_feedback() {
            return Err(Error::Data("every feedback batch is empty".into()));
        }
        if batch.reward_queries() > eps.len() {
            return Err(Error::Shape(format!("{} reward queries but {} noise draws", batch.reward_queries(), eps.len())));
        }
        let n = self.n_states();
        let enc = self.encoder.forward_batch(Input::Identity(n))?;
        let qf = self.qnet.forward_batch(Input::Identity(n))?;
        let heads = self.heads_from(enc.output(), qf.output().clone());
        let lik = &objective.likelihood;
        let w = objective.weights;

        let mut noise = eps.iter().cloned();
        let mut total = HeadGrads::zeros_like(&heads);
        let mut term = |f: &mut dyn FnMut(&mut HeadGrads) -> f64, weight: f64| -> f64 {
            let mut g = HeadGrads::zeros_like(&heads);
            let v = f(&mut g);
            if weight != 0.0 {
                total.add_scaled(&g, weight);
            }
            v
        };
        let mut out = LossBreakdown {
            preference: term(&mut |g| preference_nll(&heads, &batch.preferences, lik.beta_pref, &mut noise, g), w.preference),
            ..Default::default()
        };
        out.demo = term(&mut |g| demo_nll(&heads, &batch.demo_steps, lik.beta_demo, g), w.demo);
        out.rating = term(&mut |g| rating_nll(&heads, &batch.ratings, &mut noise, g), w.rating);
        out.stop = term(&mut |g| stop_nll(&heads, &batch.stops, lik.stop_lambda, lik.stop_rho, g), w.stop);
        // the prior covers the whole tabular reward, not just visited states
        let states: Vec<usize> = (0..n).collect();
        out.kl = term(&mut |g| kl_term(&heads, &states, g), w.kl);
        out.td = term(&mut |g| td_loss(&heads, &batch.transitions, objective.gamma, g), w.td);
        out.total = w.preference * out.preference
            + w.demo * out.demo
            + w.rating * out.rating
            + w.stop * out.stop
            + w.kl * out.kl
            + w.td * out.td;
        if !out.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {out:?}")));
        }

        let mut enc_grad = Array2::zeros(enc.output().raw_dim());
        for s in 0..n {
            enc_grad[[s, 0]] = total.mu[s];
            enc_grad[[s, 1]] = if heads.logvar_free[s] { total.logvar[s] } else { 0.0 };
        }
        let (g_enc, _) = self.encoder.backward(Input::Identity(n), &enc, enc_grad.view())?;
        let (g_q, _) = self.qnet.backward(Input::Identity(n), &qf, total.q.view())?;
        let (d_base, d_gaps) = self.rating_head.param_grads(&total.cutpoints);

        let mut flat = Vec::with_capacity(self.n_params());
        g_enc.flatten_into(&mut flat);
        g_q.flatten_into(&mut flat);
        flat.push(d_base);
        flat.extend(d_gaps);
        Ok((out, flat))
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.qnet.n_params() + 1 + self.rating_head.raw_gaps.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.encoder.flatten_into(&mut out);
        self.qnet.flatten_into(&mut out);
        out.push(self.rating_head.base);
        out.extend(&self.rating_head.raw_gaps);
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_params(), "parameter vector length");
        let mut i = self.encoder.assign_from(values);
        i += self.qnet.assign_from(&values[i..]);
        self.rating_head.base = values[i];
        let gaps = &values[i + 1..];
        self.rating_head.raw_gaps.copy_from_slice(gaps);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        self.encoder.write_tensors("encoder", &mut ckpt);
        self.qnet.write_tensors("qnet", &mut ckpt);
        let mut head = vec![self.rating_head.base];
        head.extend(&self.rating_head.raw_gaps);
        ckpt.push("rating_head".into(), vec![head.len()], head);
        ckpt
    }

    /// Rebuilds a model from a checkpoint; shapes are read from the tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dims = |name: &str| -> Result<Vec<usize>> {
            ckpt.tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, _)| s.clone())
                .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))
        };
        let e0 = dims("encoder.0.weight")?;
        let q2 = dims("qnet.2.weight")?;
        let head = dims("rating_head")?;
        if e0.len() != 2 || q2.len() != 2 || head.len() != 1 || head[0] < 1 {
            return Err(Error::Shape("unexpected tensor ranks in checkpoint".into()));
        }
        let (hidden, n_states) = (e0[0], e0[1]);
        let mut model = MavrlModel {
            encoder: Mlp::zeros(n_states, hidden, 2),
            qnet: Mlp::zeros(n_states, hidden, q2[0]),
            rating_head: RatingHead::new(head[0] + 1),
        };
        model.encoder.read_tensors("encoder", ckpt)?;
        model.qnet.read_tensors("qnet", ckpt)?;
        let h = ckpt.get("rating_head", &head)?;
        model.rating_head.base = h[0];
        model.rating_head.raw_gaps.copy_from_slice(&h[1..]);
        Ok(model)
    }
}

/// Loss curve of a training run, one row per optimizer step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub rows: Vec<LossBreakdown>,
}

impl LossCurve {
    pub const CSV_HEADER: &'static str = "step,preference,demo,rating,stop,kl,td,total";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{},{},{},{}", r.preference, r.demo, r.rating, r.stop, r.kl, r.td, r.total);
        }
        out
    }

    /// Mean total loss over `rows[range]`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.rows[range];
        slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
    }
}

fn sample_refs<'a, T, R: Rng + ?Sized>(items: &'a [T], n: usize, rng: &mut R) -> Vec<&'a T> {
    if items.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| &items[rng.random_range(0..items.len())]).collect()
}

/// Runs the training loop: each step draws a mini-batch of `batch_size`
/// from every nonempty modality and from the TD transition pool, samples
/// one noise draw per reward query, and takes one AdamW step on the encoder,
/// the Q-network and the rating cutpoints jointly.
pub fn train(dataset: &FeedbackDataset, config: &TrainConfig) -> Result<(MavrlModel, LossCurve)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("all feedback datasets are empty".into()));
    }
    dataset.validate()?;
    let meta = &dataset.meta;
    if meta.n_states == 0 || meta.n_actions == 0 {
        return Err(Error::Data("dataset metadata lacks state/action counts".into()));
    }
    if !dataset.ratings.is_empty() && meta.categories < 2 {
        return Err(Error::Data("ratings present but fewer than two categories declared".into()));
    }

    let mut model = MavrlModel::new(
        meta.n_states,
        meta.n_actions,
        config.hidden,
        meta.categories.max(2),
        &mut rng::derive(config.seed, streams::INIT),
    );
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
            ..Default::default()
        },
        model.n_params(),
    );
    let objective = Objective {
        likelihood: LikelihoodParams::from_meta(meta),
        gamma: config.gamma,
        weights: TermWeights::objective(config.lambda_kl, config.lambda_td),
    };

    let pool = extract_transitions(dataset);
    let demo_steps: Vec<Step> = dataset.demos.iter().flat_map(|d| d.trajectory.steps.iter().cloned()).collect();
    let mut rng = rng::derive(config.seed, streams::TRAINING);
    let mut curve = LossCurve { rows: Vec::with_capacity(config.steps) };
    let mut params = model.params();
    let mut eps = Vec::new();
    let bs = config.batch_size;

    for step in 0..config.steps {
        let batch = Batch {
            preferences: sample_refs(&dataset.preferences, bs, &mut rng),
            demo_steps: sample_refs(&demo_steps, bs, &mut rng).into_iter().cloned().collect(),
            ratings: sample_refs(&dataset.ratings, bs, &mut rng),
            stops: sample_refs(&dataset.stops, bs, &mut rng),
            transitions: sample_refs(&pool, bs, &mut rng).into_iter().cloned().collect(),
        };
        eps.clear();
        eps.extend((0..batch.reward_queries()).map(|_| rng.sample::<f64, _>(StandardNormal)));

        let (losses, grads) = model.evaluate(&batch, &eps, &objective).map_err(|e| Error::Diverged { step, msg: e.to_string() })?;
        opt.step(&mut params, &grads).map_err(|e| Error::Diverged { step, msg: e.to_string() })?;
        model.set_params(&params);
        if !model.rating_head.cutpoints().windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Diverged { step, msg: "rating cutpoints lost their order".into() });
        }
        curve.rows.push(losses);
    }
    Ok((model, curve))
}

/// Checks the per-axis shape of the head tables (used by callers that
/// build [`Heads`] by hand).
pub fn check_heads(heads: &Heads) -> Result<()> {
    let n = heads.mu.len();
    if heads.logvar.len() != n || heads.logvar_free.len() != n || heads.q.len_of(Axis(0)) != n {
        return Err(Error::Shape("head tables disagree on the number of states".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn heads(mu: Vec<f64>, logvar: Vec<f64>, q: Array2<f64>, cut: Vec<f64>) -> Heads {
        let n = mu.len();
        Heads { mu, logvar, logvar_free: vec![true; n], q, cutpoints: cut }
    }

    fn seg(steps: &[(usize, usize, usize)], len: usize) -> Segment {
        Segment {
            steps: steps.iter().map(|&(s, a, n)| Step { state: s, action: a, next_state: n }).collect(),
            source_traj: 0,
            start_index: 0,
            length: len,
        }
    }

    #[test]
    fn identical_segments_cost_log_two() {
        let h = heads(vec![0.3, -0.2], vec![0.0, 0.0], Array2::zeros((2, 1)), vec![]);
        let s = seg(&[(0, 0, 1), (1, 0, 0)], 2);
        let obs = PreferenceObs { seg_a: s.clone(), seg_b: s, a_preferred: true };
        let mut g = HeadGrads::zeros_like(&h);
        // identical noise on both sides gives identical returns
        let l = preference_nll(&h, &[&obs], 5.0, &mut [0.4, -1.0, 0.4, -1.0].into_iter(), &mut g);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dominant_winner_costs_nothing() {
        let h = heads(vec![0.0, 1e3], vec![LOGVAR_MIN; 2], Array2::zeros((2, 1)), vec![]);
        let win = seg(&[(0, 0, 1)], 1);
        let lose = seg(&[(1, 0, 0)], 1);
        let obs = PreferenceObs { seg_a: win, seg_b: lose, a_preferred: true };
        let mut g = HeadGrads::zeros_like(&h);
        assert!(preference_nll(&h, &[&obs], 5.0, &mut [0.0, 0.0].into_iter(), &mut g) < 1e-12);
    }

    #[test]
    fn preference_two_state_toy() {
        // a enters state 1 (mu 0.8), b enters state 0 (mu -0.4); L = 2; eps = 0
        let h = heads(vec![-0.4, 0.8], vec![0.0, 0.0], Array2::zeros((2, 1)), vec![]);
        let a = seg(&[(0, 0, 1)], 2);
        let b = seg(&[(1, 0, 0)], 2);
        let obs = PreferenceObs { seg_a: a, seg_b: b, a_preferred: false };
        let mut g = HeadGrads::zeros_like(&h);
        let l = preference_nll(&h, &[&obs], 5.0, &mut [0.0, 0.0].into_iter(), &mut g);
        // winner b: R = -0.2, loser a: R = 0.4
        let want = -(1.0 / (1.0 + (-(5.0 * (-0.2 - 0.4f64))).exp())).ln();
        assert!((l - want).abs() < 1e-10);
    }

    #[test]
    fn demo_closed_forms() {
        let h = heads(vec![0.0; 2], vec![0.0; 2], array![[1.0, 0.0], [0.0, 0.0]], vec![]);
        let mut g = HeadGrads::zeros_like(&h);
        let l = demo_nll(&h, &[Step { state: 0, action: 0, next_state: 1 }], 1.0, &mut g);
        assert!((l - 0.31326).abs() < 1e-5);

        let uni = heads(vec![0.0; 1], vec![0.0; 1], array![[0.2, 0.2, 0.2, 0.2, 0.2]], vec![]);
        let mut g = HeadGrads::zeros_like(&uni);
        let l = demo_nll(&uni, &[Step { state: 0, action: 3, next_state: 0 }], 10.0, &mut g);
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let sharp = heads(vec![0.0; 1], vec![0.0; 1], array![[1e6, 0.0]], vec![]);
        let mut g = HeadGrads::zeros_like(&sharp);
        assert!(demo_nll(&sharp, &[Step { state: 0, action: 0, next_state: 0 }], 1.0, &mut g) < 1e-12);
    }

    #[test]
    fn rating_probabilities_closed_form() {
        let p = rating_probabilities(0.5, &[0.0, 1.0]);
        // F(0.5) - F(-0.5)
        assert!((p[1] - 0.244_918_662).abs() < 1e-9);
        let wide = rating_probabilities(0.5, &[-0.5, 1.5]);
        assert!((wide[1] - 0.462_117_157).abs() < 1e-9);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let low = rating_probabilities(-1e3, &[0.0, 1.0, 2.0]);
        assert!((low[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stop_nll_closed_forms() {
        let (l, _) = stop_nll_from_regrets(&[0.0, 0.0, 0.0], None, 1.0, 0.1);
        assert_eq!(l, 0.0);
        let (l, _) = stop_nll_from_regrets(&[0.0, 0.0, 0.0], Some(2), 1.0, 0.1);
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
        let (l, _) = stop_nll_from_regrets(&[0.0, 1.0, 0.0], Some(2), 1.0, 0.1);
        assert!((l - 0.45868).abs() < 1e-5);
    }

    #[test]
    fn stop_outcomes_sum_to_one() {
        let deltas = [0.3, 0.0, 1.2, 0.05, 0.7, 0.0, 0.2, 0.9, 0.1, 0.4];
        let mut mass: f64 = (1..=10).map(|t| (-stop_nll_from_regrets(&deltas, Some(t), 1.3, 0.1).0).exp()).sum();
        mass += (-stop_nll_from_regrets(&deltas, None, 1.3, 0.1).0).exp();
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_forms() {
        let h = heads(vec![0.0, 2.0, 0.5], vec![0.0, 0.0, 0.25f64.ln()], Array2::zeros((3, 1)), vec![]);
        let mut g = HeadGrads::zeros_like(&h);
        assert_eq!(kl_term(&h, &[0], &mut g), 0.0);
        assert!((kl_term(&h, &[1], &mut g) - 2.0).abs() < 1e-15);
        assert!((kl_term(&h, &[2], &mut g) - 0.44315).abs() < 1e-5);
    }

    #[test]
    fn td_closed_forms() {
        let h = heads(vec![0.0, 0.7], vec![0.0, 0.0], array![[0.7], [0.3]], vec![]);
        let tr = Transition { state: 0, action: 0, next_state: 1, next_action: Some(0) };
        let mut g = HeadGrads::zeros_like(&h);
        assert!((td_loss(&h, &[tr], 0.0, &mut g) - 0.918_938_533).abs() < 1e-9);

        let h = heads(vec![0.0, 0.0], vec![0.0, 0.0], array![[1.0], [0.0]], vec![]);
        let mut g = HeadGrads::zeros_like(&h);
        assert!((td_loss(&h, &[tr], 0.9, &mut g) - 1.418_938_533).abs() < 1e-9);
    }

    #[test]
    fn rating_head_cutpoints_increase() {
        let mut head = RatingHead::new(5);
        for (c, want) in head.cutpoints().iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!((c - want).abs() < 1e-12);
        }
        head.raw_gaps = vec![-20.0, 3.0, -5.0];
        assert!(head.cutpoints().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(RatingHead::new(2).cutpoints().len(), 1);
    }

    fn fd_fixture(seed: u64) -> (MavrlModel, FeedbackDataset, Vec<Transition>) {
        use crate::feedback::{FeedbackBudget, SimulatorParams};
        use crate::mdp::{build_grid_env, value_iteration, GridKind, VI_TOL};
        let mdp = build_grid_env(GridKind::Cliff, 3).unwrap();
        let q = value_iteration(&mdp, None, VI_TOL).unwrap();
        let params = SimulatorParams { n_trajectories: 20, segment_len: 4, ..Default::default() };
        let ds = FeedbackDataset::simulate(&mdp, &q, &params, FeedbackBudget::new(3, 1, 5, 3), seed).unwrap();
        let pool = extract_transitions(&ds);
        let mut rng = rng::derive(seed, 99);
        let mut model = MavrlModel::new(9, 5, 8, ds.meta.categories, &mut rng);
        // move the cutpoints and Q rows off their symmetric start
        let mut p = model.params();
        for v in p.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
        model.set_params(&p);
        (model, ds, pool)
    }

    #[test]
    fn every_term_matches_finite_differences() {
        for seed in 0..3 {
            let (model, ds, pool) = fd_fixture(seed);
            let demo_steps: Vec<Step> = ds.demos.iter().flat_map(|d| d.trajectory.steps.clone()).collect();
            let batch = Batch {
                preferences: ds.preferences.iter().collect(),
                demo_steps,
                ratings: ds.ratings.iter().collect(),
                stops: ds.stops.iter().collect(),
                transitions: pool.clone(),
            };
            let mut rng = rng::derive(seed, 100);
            let eps: Vec<f64> = (0..batch.reward_queries()).map(|_| rng.sample(StandardNormal)).collect();
            for term in Term::ALL {
                let objective = Objective {
                    likelihood: LikelihoodParams::from_meta(&ds.meta),
                    gamma: 0.9,
                    weights: TermWeights::only(term),
                };
                let (_, grad) = model.evaluate(&batch, &eps, &objective).unwrap();
                let base = model.params();
                let h = 1e-5;
                for i in 0..base.len() {
                    let mut probe = model.clone();
                    let mut p = base.clone();
                    p[i] += h;
                    probe.set_params(&p);
                    let up = probe.evaluate(&batch, &eps, &objective).unwrap().0.total;
                    p[i] -= 2.0 * h;
                    probe.set_params(&p);
                    let down = probe.evaluate(&batch, &eps, &objective).unwrap().0.total;
                    let fd = (up - down) / (2.0 * h);
                    let scale = grad[i].abs().max(fd.abs());
                    assert!((grad[i] - fd).abs() <= 1e-4 * scale + 1e-8, "{term:?} seed {seed} param {i}: {} vs {fd}", grad[i]);
                }
            }
        }
    }
}
