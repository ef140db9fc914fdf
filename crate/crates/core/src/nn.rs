//! Feedforward Leaky-ReLU network with hand-written reverse mode and Adam.
//!
//! The network maps a covariate vector to a single real output `G(x)`.
//! Hidden layers are affine maps followed by Leaky ReLU; the last layer is
//! affine only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// `self * v`
    pub(crate) fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = dot(self.row(r), v);
        }
    }

    /// `self^T * v`
    pub(crate) fn tmul_vec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn leaky_relu(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        slope * z
    }
}

/// Derivative of Leaky ReLU; the kink at 0 takes the positive branch.
#[inline]
pub fn leaky_relu_grad(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    leaky_slope: f64,
}

/// Pre-activations and activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// `acts[0]` is the input, `acts[k]` the output of hidden layer `k`.
    pub acts: Vec<Vec<f64>>,
    /// Pre-activation of every layer, including the scalar output layer.
    pub pre: Vec<Vec<f64>>,
}

fn validate_dims(layer_dims: &[usize], leaky_slope: f64) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "layer_dims needs at least 2 entries, got {}",
            layer_dims.len()
        )));
    }
    if let Some(pos) = layer_dims.iter().position(|&d| d == 0) {
        return Err(Error::Config(format!(
            "layer_dims[{pos}] is zero; all dimensions must be positive"
        )));
    }
    if *layer_dims.last().unwrap() != 1 {
        return Err(Error::Config(format!(
            "output dimension must be 1, got {}",
            layer_dims.last().unwrap()
        )));
    }
    if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
        return Err(Error::Config(format!(
            "leaky slope must lie in (0, 1), got {leaky_slope}"
        )));
    }
    Ok(())
}

impl Network {
    /// Random network: weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(layer_dims: &[usize], leaky_slope: f64, seed: u64) -> Result<Self> {
        validate_dims(layer_dims, leaky_slope)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            weights.push(Matrix::from_row_major(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            leaky_slope,
        })
    }

    /// Assemble a network from explicit parameters, checking every shape.
    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>, leaky_slope: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(format!(
                "need one bias per weight matrix ({} weights, {} biases)",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_dims = vec![weights[0].cols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let prev = *layer_dims.last().unwrap();
            if w.cols() != prev {
                return Err(Error::Shape {
                    expected: prev,
                    got: w.cols(),
                });
            }
            if b.len() != w.rows() {
                return Err(Error::Shape {
                    expected: w.rows(),
                    got: b.len(),
                });
            }
            if w.as_slice().iter().chain(b).any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("layer {k} has non-finite parameters")));
            }
            layer_dims.push(w.rows());
        }
        validate_dims(&layer_dims, leaky_slope)?;
        Ok(Self {
            layer_dims,
            weights,
            biases,
            leaky_slope,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// All parameters flattened layer by layer: weights (row-major), then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let len = b.len();
            b.copy_from_slice(&params[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite covariate {v}")));
        }
        Ok(())
    }

    /// Network output `G(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let last = self.num_layers() - 1;
        let mut h = x.to_vec();
        let mut z = Vec::new();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            z.resize(w.rows(), 0.0);
            w.mul_vec(&h, &mut z);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            if k == last {
                return z[0];
            }
            h.clear();
            h.extend(z.iter().map(|&v| leaky_relu(v, self.leaky_slope)));
        }
        unreachable!("loop returns at the output layer")
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Trace {
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        acts.push(x.to_vec());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = vec![0.0; w.rows()];
            w.mul_vec(&acts[k], &mut z);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            if k < last {
                acts.push(z.iter().map(|&v| leaky_relu(v, self.leaky_slope)).collect());
            }
            pre.push(z);
        }
        Trace { acts, pre }
    }

    /// Gradients of `upstream * G(x)` with respect to parameters and input.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<(ParamGrads, Vec<f64>)> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let mut grads = ParamGrads::zeros_like(self);
        let mut input_grad = vec![0.0; self.input_dim()];
        self.backward_accumulate(&trace, upstream, &mut grads, Some(&mut input_grad));
        Ok((grads, input_grad))
    }

    /// Adds `upstream * dG/dθ` into `grads` and, if given, `upstream * dG/dx`
    /// into `input_grad`.
    pub(crate) fn backward_accumulate(
        &self,
        trace: &Trace,
        upstream: f64,
        grads: &mut ParamGrads,
        input_grad: Option<&mut [f64]>,
    ) {
        let n = self.num_layers();
        // adjoint of the current layer's pre-activation
        let mut delta = vec![upstream];
        let mut back = Vec::new();
        for k in (0..n).rev() {
            let input = &trace.acts[k];
            let gw = &mut grads.weights[k];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &a) in gw.row_mut(r).iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            for (g, &d) in grads.biases[k].iter_mut().zip(&delta) {
                *g += d;
            }
            back.resize(self.weights[k].cols(), 0.0);
            self.weights[k].tmul_vec(&delta, &mut back);
            if k == 0 {
                if let Some(ig) = input_grad {
                    for (g, &b) in ig.iter_mut().zip(&back) {
                        *g += b;
                    }
                }
                break;
            }
            let z_prev = &trace.pre[k - 1];
            delta.clear();
            delta.extend(
                back.iter()
                    .zip(z_prev)
                    .map(|(&b, &z)| b * leaky_relu_grad(z, self.leaky_slope)),
            );
        }
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn is_congruent(&self, net: &Network) -> bool {
        self.weights.len() == net.weights.len()
            && self
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && self
                .biases
                .iter()
                .zip(&net.biases)
                .all(|(g, b)| g.len() == b.len())
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice())
            .chain(self.biases.iter().flatten())
            .all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .iter_mut()
            .flat_map(|w| w.as_mut_slice().iter_mut())
            .chain(self.biases.iter_mut().flatten())
            .for_each(|v| *v *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += factor * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl AdamState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamGrads::zeros_like(net),
            v: ParamGrads::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update. Nothing is modified when the gradient
    /// is rejected.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        if !grads.is_congruent(net) || !self.m.is_congruent(net) {
            return Err(Error::Shape {
                expected: net.param_count(),
                got: grads.flat().len(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                reason: "non-finite gradient".into(),
                last_good: None,
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let corr1 = 1.0 - beta1.powi(t);
        let corr2 = 1.0 - beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for k in 0..net.num_layers() {
            update(
                net.weights_mut()[k].as_mut_slice(),
                grads.weights[k].as_slice(),
                self.m.weights[k].as_mut_slice(),
                self.v.weights[k].as_mut_slice(),
            );
            update(
                &mut net.biases_mut()[k],
                &grads.biases[k],
                &mut self.m.biases[k],
                &mut self.v.biases[k],
            );
        }
        Ok(())
    }
}
