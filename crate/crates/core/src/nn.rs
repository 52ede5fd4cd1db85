//! Small dense networks with hand-derived backprop, Gaussian
//! reparameterization, AdamW and a plain-text checkpoint format.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out x in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = || (rng.random::<f64>() * 2.0 - 1.0) * bound;
        let weight = Array2::from_shape_fn((output, input), |_| draw());
        let bias = Array1::from_shape_fn(output, |_| draw());
        Linear { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Batch input to an [`Mlp`]: dense rows, or the identity matrix (one
/// one-hot row per input index), which skips the first matmul.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Dense(ArrayView2<'a, f64>),
    Identity(usize),
}

impl Input<'_> {
    fn rows(&self) -> usize {
        match self {
            Input::Dense(x) => x.nrows(),
            Input::Identity(n) => *n,
        }
    }

    fn cols(&self) -> usize {
        match self {
            Input::Dense(x) => x.ncols(),
            Input::Identity(n) => *n,
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Pre-activations of every layer; the last entry is the output.
    pre: Vec<Array2<f64>>,
    /// Post-activations of the hidden layers.
    post: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

/// `linear -> LeakyReLU -> ... -> linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub negative_slope: f64,
}

impl Mlp {
    /// Two hidden layers of width `hidden`.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            layers: vec![
                Linear::init(input, hidden, rng),
                Linear::init(hidden, hidden, rng),
                Linear::init(hidden, output, rng),
            ],
            negative_slope: LEAKY_SLOPE,
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            layers: vec![Linear::zeros(input, hidden), Linear::zeros(hidden, hidden), Linear::zeros(hidden, output)],
            negative_slope: LEAKY_SLOPE,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        let slope = self.negative_slope;
        z.mapv(|v| if v > 0.0 { v } else { slope * v })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} entries, network expects {}", input.len(), self.input_dim())));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(Input::Dense(x))?.output().row(0).to_vec())
    }

    pub fn forward_batch(&self, input: Input<'_>) -> Result<MlpTrace> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, network expects {}", input.cols(), self.input_dim())));
        }
        let first = &self.layers[0];
        let mut z = match input {
            Input::Dense(x) => x.dot(&first.weight.t()),
            Input::Identity(_) => first.weight.t().to_owned(),
        };
        z += &first.bias;
        let mut pre = vec![z];
        let mut post = Vec::with_capacity(self.layers.len() - 1);
        for layer in &self.layers[1..] {
            let a = self.activate(pre.last().expect("nonempty"));
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            post.push(a);
            pre.push(z);
        }
        Ok(MlpTrace { pre, post })
    }

    /// Parameter gradients (and the input gradient, for dense inputs) given
    /// the loss gradient with respect to the outputs of `trace`.
    pub fn backward(&self, input: Input<'_>, trace: &MlpTrace, grad_output: ArrayView2<'_, f64>) -> Result<(Mlp, Option<Array2<f64>>)> {
        if grad_output.dim() != trace.output().dim() || input.rows() != grad_output.nrows() {
            return Err(Error::Shape("output gradient does not match the forward pass".into()));
        }
        if grad_output.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite output gradient".into()));
        }
        let slope = self.negative_slope;
        let mut grads: Vec<Linear> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let weight = if l == 0 {
                match input {
                    Input::Dense(x) => delta.t().dot(&x),
                    Input::Identity(_) => delta.t().to_owned(),
                }
            } else {
                delta.t().dot(&trace.post[l - 1])
            };
            let bias = delta.sum_axis(Axis(0));
            grads.push(Linear { weight, bias });
            if l > 0 {
                let mut back = delta.dot(&layer.weight);
                ndarray::Zip::from(&mut back).and(&trace.pre[l - 1]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g *= slope;
                    }
                });
                delta = back;
            } else {
                delta = match input {
                    Input::Dense(_) => delta.dot(&layer.weight),
                    Input::Identity(_) => Array2::zeros((0, 0)),
                };
            }
        }
        grads.reverse();
        let input_grad = matches!(input, Input::Dense(_)).then_some(delta);
        Ok((Mlp { layers: grads, negative_slope: slope }, input_grad))
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Appends all parameters (weights row-major, then bias, per layer).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Reads parameters in [`flatten_into`](Self::flatten_into) order and
    /// returns the number consumed.
    pub fn assign_from(&mut self, values: &[f64]) -> usize {
        let mut i = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = values[i];
                i += 1;
            }
        }
        i
    }

    pub fn write_tensors(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.push(format!("{prefix}.{i}.weight"), vec![l.weight.nrows(), l.weight.ncols()], l.weight.iter().cloned().collect());
            ckpt.push(format!("{prefix}.{i}.bias"), vec![l.bias.len()], l.bias.to_vec());
        }
    }

    pub fn read_tensors(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let w = ckpt.get(&format!("{prefix}.{i}.weight"), &[l.weight.nrows(), l.weight.ncols()])?;
            l.weight.iter_mut().zip(w).for_each(|(d, s)| *d = *s);
            let b = ckpt.get(&format!("{prefix}.{i}.bias"), &[l.bias.len()])?;
            l.bias.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
        }
        Ok(())
    }
}

/// A reparameterized Gaussian draw and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reparam {
    pub value: f64,
    pub d_mu: f64,
    pub d_logvar: f64,
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: f64, logvar: f64, eps: f64) -> Reparam {
    let sigma = (0.5 * logvar).exp();
    Reparam { value: mu + sigma * eps, d_mu: 1.0, d_logvar: 0.5 * eps * sigma }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// AdamW over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        AdamW { config, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to the global norm threshold, then applies one
    /// bias-corrected AdamW update with decoupled weight decay. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let norm = global_norm(grads);
        let scale = clip_scale(norm, self.config.clip_norm);
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            params[i] -= c.lr * c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(norm)
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Factor that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

pub const CHECKPOINT_HEADER: &str = "mavrl-checkpoint 1";

/// Named tensors in a flat text format:
///
/// ```text
/// mavrl-checkpoint 1
/// tensor <name> <rank> <dim0> <dim1> ...
/// <values, row-major, whitespace separated>
/// ```
///
/// Values are written in shortest round-trip form, so a save/load cycle is
/// bit-exact.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push((name, shape, values));
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (_, s, v) = self
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))?;
        if s != shape {
            return Err(Error::Shape(format!("tensor `{name}` has shape {s:?}, expected {shape:?}")));
        }
        Ok(v)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_HEADER}\n");
        for (name, shape, values) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {} {}", shape.len(), dims.join(" "));
            let row = *shape.last().unwrap_or(&1);
            for chunk in values.chunks(row.max(1)) {
                let vals: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: "not a checkpoint".into() }),
        }
        let mut ckpt = Checkpoint::default();
        let mut current: Option<(String, Vec<usize>, Vec<f64>, usize)> = None;
        for (i, line) in lines {
            let ln = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            if toks[0] == "tensor" {
                if let Some((n, s, v, want)) = current.take() {
                    finish_tensor(&mut ckpt, n, s, v, want, ln)?;
                }
                let bad = || Error::Parse { line: ln, msg: "malformed tensor header".into() };
                let name = toks.get(1).ok_or_else(bad)?.to_string();
                let rank: usize = toks.get(2).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                let shape: Vec<usize> =
                    toks[3..].iter().map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if shape.len() != rank {
                    return Err(bad());
                }
                let want = shape.iter().product();
                current = Some((name, shape, Vec::with_capacity(want), want));
            } else {
                let (_, _, values, _) =
                    current.as_mut().ok_or(Error::Parse { line: ln, msg: "values before any tensor header".into() })?;
                for t in toks {
                    values.push(t.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad value `{t}`") })?);
                }
            }
        }
        if let Some((n, s, v, want)) = current.take() {
            finish_tensor(&mut ckpt, n, s, v, want, text.lines().count())?;
        }
        Ok(ckpt)
    }
}

fn finish_tensor(ckpt: &mut Checkpoint, name: String, shape: Vec<usize>, values: Vec<f64>, want: usize, line: usize) -> Result<()> {
    if values.len() != want {
        return Err(Error::Parse { line, msg: format!("tensor `{name}` has {} values, expected {want}", values.len()) });
    }
    ckpt.push(name, shape, values);
    Ok(())
}
