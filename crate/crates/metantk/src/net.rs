//! Fully-connected network engine.
//!
//! Gaussian-initialized feed-forward nets with the layer recursion
//! `h = z W + b`, `z = phi(h)`, forward passes with activation-pattern
//! capture, exact per-sample parameter Jacobians, and the Hessian-vector
//! products needed to differentiate through unrolled adaptation steps.
//!
//! Weights are drawn N(0, sigma_w^2 / fan_in) and biases N(0, sigma_b^2).
//! Batches are row-major (one sample per row), so a weight matrix is stored
//! fan_in x fan_out.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Erf,
    Identity,
}

impl Activation {
    #[inline]
    pub fn phi(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Erf => libm::erf(x),
            Activation::Identity => x,
        }
    }

    /// Derivative; the ReLU subgradient at exactly zero is 0.
    #[inline]
    pub fn dphi(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp(),
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn ddphi(self, x: f64) -> f64 {
        match self {
            Activation::ReLU | Activation::Identity => 0.0,
            Activation::Erf => -2.0 * x * std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::ReLU => "relu",
            Activation::Erf => "erf",
            Activation::Identity => "identity",
        }
    }
}

/// Architecture description: dimensions, activation, init scales.
///
/// `bias` is on by default; the bias-free variant exists so that hand-checked
/// single-parameter fixtures (f(x) = w x) are expressible exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub bias: bool,
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        sigma_w: f64,
        sigma_b: f64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("network dimensions must be >= 1".into()));
        }
        if !(sigma_w >= 0.0) || !(sigma_b >= 0.0) {
            return Err(Error::InvalidConfig("init scales must be >= 0".into()));
        }
        Ok(NetworkSpec {
            input_dim,
            hidden_widths,
            output_dim,
            activation,
            sigma_w,
            sigma_b,
            bias: true,
        })
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// (fan_in, fan_out) per layer, readout included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden_widths.iter().sum()
    }

    /// Width normalizer for empirical kernels: the narrowest hidden layer,
    /// or 1 for a network with no hidden layer.
    pub fn width_norm(&self) -> f64 {
        self.hidden_widths.iter().copied().min().unwrap_or(1) as f64
    }

    pub fn layout(&self) -> Layout {
        let mut entries = Vec::new();
        let mut off = 0usize;
        for (fan_in, fan_out) in self.layer_dims() {
            let w_off = off;
            off += fan_in * fan_out;
            let b_off = off;
            if self.bias {
                off += fan_out;
            }
            entries.push(LayoutEntry { w_off, b_off, fan_in, fan_out });
        }
        Layout { entries, total: off, bias: self.bias }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    pub w_off: usize,
    pub b_off: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
    pub bias: bool,
}

/// Flattened trainable parameters plus the (layer -> slice) map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = spec.layout();
        ParamVector { data: vec![0.0; layout.total], layout }
    }

    pub fn from_data(spec: &NetworkSpec, data: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if data.len() != layout.total {
            return Err(Error::DimMismatch {
                context: "ParamVector",
                expected: layout.total,
                got: data.len(),
            });
        }
        Ok(ParamVector { data, layout })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn w(&self, layer: usize) -> &[f64] {
        let e = self.layout.entries[layer];
        &self.data[e.w_off..e.w_off + e.fan_in * e.fan_out]
    }

    pub fn w_mut(&mut self, layer: usize) -> &mut [f64] {
        let e = self.layout.entries[layer];
        &mut self.data[e.w_off..e.w_off + e.fan_in * e.fan_out]
    }

    pub fn b(&self, layer: usize) -> &[f64] {
        let e = self.layout.entries[layer];
        if self.layout.bias {
            &self.data[e.b_off..e.b_off + e.fan_out]
        } else {
            &[]
        }
    }

    pub fn b_mut(&mut self, layer: usize) -> &mut [f64] {
        let e = self.layout.entries[layer];
        if self.layout.bias {
            &mut self.data[e.b_off..e.b_off + e.fan_out]
        } else {
            &mut []
        }
    }

    /// Euclidean distance to another parameter vector.
    pub fn dist(&self, other: &ParamVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Gaussian init: weights N(0, sigma_w^2 / fan_in), biases N(0, sigma_b^2).
/// Deterministic given (spec, seed); the stream is consumed layer by layer.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut params = ParamVector::zeros(spec);
    let mut rng = Rng::new(seed);
    let dims = spec.layer_dims();
    for (layer, (fan_in, _)) in dims.iter().enumerate() {
        let w_std = spec.sigma_w / (*fan_in as f64).sqrt();
        rng.fill_normal(params.w_mut(layer), w_std);
        if spec.bias {
            let b_std = spec.sigma_b;
            rng.fill_normal(params.b_mut(layer), b_std);
        }
    }
    params
}

/// Per-sample sign pattern of the hidden pre-activations, packed into words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    nbits: usize,
    words: Vec<u64>,
}

impl ActivationPattern {
    pub fn with_capacity(nbits: usize) -> Self {
        ActivationPattern { nbits: 0, words: Vec::with_capacity(nbits.div_ceil(64)) }
    }

    #[inline]
    pub fn push(&mut self, bit: bool) {
        let word = self.nbits / 64;
        if word == self.words.len() {
            self.words.push(0);
        }
        if bit {
            self.words[word] |= 1u64 << (self.nbits % 64);
        }
        self.nbits += 1;
    }

    pub fn len(&self) -> usize {
        self.nbits
    }

    pub fn is_empty(&self) -> bool {
        self.nbits == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }
}

/// Forward tape: zs[l] is the input to layer l (zs[0] = X), hs[l] its
/// pre-activation. hs[last] is the network output.
#[derive(Debug, Clone)]
pub struct Tape {
    pub zs: Vec<Mat>,
    pub hs: Vec<Mat>,
}

impl Tape {
    pub fn output(&self) -> &Mat {
        self.hs.last().expect("tape has at least one layer")
    }
}

// x (n x fan_in) * W (fan_in x fan_out), W given as a flat slice
fn mm_w(x: &Mat, w: &[f64], fan_in: usize, fan_out: usize) -> Mat {
    debug_assert_eq!(x.cols(), fan_in);
    debug_assert_eq!(w.len(), fan_in * fan_out);
    let mut out = Mat::zeros(x.rows(), fan_out);
    for s in 0..x.rows() {
        let xr = x.row(s);
        let or = out.row_mut(s);
        for (mu, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[mu * fan_out..(mu + 1) * fan_out];
            for (o, &wv) in or.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

// d (n x fan_out) * W^T -> (n x fan_in)
fn mm_wt(d: &Mat, w: &[f64], fan_in: usize, fan_out: usize) -> Mat {
    debug_assert_eq!(d.cols(), fan_out);
    let mut out = Mat::zeros(d.rows(), fan_in);
    for s in 0..d.rows() {
        let dr = d.row(s);
        let or = out.row_mut(s);
        for (mu, ov) in or.iter_mut().enumerate() {
            let wrow = &w[mu * fan_out..(mu + 1) * fan_out];
            let mut acc = 0.0;
            for (dv, wv) in dr.iter().zip(wrow) {
                acc += dv * wv;
            }
            *ov = acc;
        }
    }
    out
}

// out[mu*fan_out + nu] += sum_s z[s][mu] * d[s][nu]
fn accumulate_outer(z: &Mat, d: &Mat, out: &mut [f64]) {
    let fan_in = z.cols();
    let fan_out = d.cols();
    debug_assert_eq!(out.len(), fan_in * fan_out);
    for s in 0..z.rows() {
        let zr = z.row(s);
        let dr = d.row(s);
        for (mu, &zv) in zr.iter().enumerate() {
            if zv == 0.0 {
                continue;
            }
            let orow = &mut out[mu * fan_out..(mu + 1) * fan_out];
            for (o, &dv) in orow.iter_mut().zip(dr) {
                *o += zv * dv;
            }
        }
    }
}

pub fn forward_tape(spec: &NetworkSpec, params: &ParamVector, x: &Mat) -> Result<Tape> {
    if x.cols() != spec.input_dim {
        return Err(Error::DimMismatch {
            context: "forward input",
            expected: spec.input_dim,
            got: x.cols(),
        });
    }
    let dims = spec.layer_dims();
    let depth = spec.depth();
    let mut zs = Vec::with_capacity(depth + 1);
    let mut hs = Vec::with_capacity(depth + 1);
    zs.push(x.clone());
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let mut h = mm_w(&zs[layer], params.w(layer), fan_in, fan_out);
        if spec.bias {
            h.add_row_broadcast(params.b(layer));
        }
        if layer < depth {
            let act = spec.activation;
            zs.push(h.map(|v| act.phi(v)));
        }
        hs.push(h);
    }
    Ok(Tape { zs, hs })
}

/// Forward pass. With `capture_patterns`, also returns the per-sample hidden
/// sign patterns (one bit per hidden unit, layer by layer).
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &Mat,
    capture_patterns: bool,
) -> Result<(Mat, Option<Vec<ActivationPattern>>)> {
    let tape = forward_tape(spec, params, x)?;
    let patterns = if capture_patterns {
        let nbits = spec.hidden_units();
        let mut pats = Vec::with_capacity(x.rows());
        for s in 0..x.rows() {
            let mut p = ActivationPattern::with_capacity(nbits);
            for h in tape.hs.iter().take(spec.depth()) {
                for &v in h.row(s) {
                    p.push(v > 0.0);
                }
            }
            pats.push(p);
        }
        Some(pats)
    } else {
        None
    };
    Ok((tape.hs.last().unwrap().clone(), patterns))
}

pub fn predict(spec: &NetworkSpec, params: &ParamVector, x: &Mat) -> Result<Mat> {
    let mut tape = forward_tape(spec, params, x)?;
    Ok(tape.hs.pop().expect("tape has layers"))
}

/// Features seen by the readout layer: the last hidden post-activation, or
/// the raw input when there is no hidden layer.
pub fn readout_features(spec: &NetworkSpec, params: &ParamVector, x: &Mat) -> Result<Mat> {
    let mut tape = forward_tape(spec, params, x)?;
    Ok(tape.zs.pop().expect("tape has layers"))
}

fn backward_row(
    spec: &NetworkSpec,
    params: &ParamVector,
    tape: &Tape,
    sample: usize,
    out_idx: usize,
    row: &mut [f64],
) {
    let dims = spec.layer_dims();
    let layout = params.layout();
    let act = spec.activation;
    let mut delta = vec![0.0; spec.output_dim];
    delta[out_idx] = 1.0;
    for layer in (0..dims.len()).rev() {
        let e = layout.entries[layer];
        let z_in = tape.zs[layer].row(sample);
        for (mu, &zv) in z_in.iter().enumerate() {
            if zv == 0.0 {
                continue;
            }
            let dst = &mut row[e.w_off + mu * e.fan_out..e.w_off + (mu + 1) * e.fan_out];
            for (d, &dv) in dst.iter_mut().zip(&delta) {
                *d += zv * dv;
            }
        }
        if spec.bias {
            row[e.b_off..e.b_off + e.fan_out].copy_from_slice(&delta);
        }
        if layer > 0 {
            let w = params.w(layer);
            let h_prev = tape.hs[layer - 1].row(sample);
            let mut new_delta = vec![0.0; e.fan_in];
            for (mu, nd) in new_delta.iter_mut().enumerate() {
                let wrow = &w[mu * e.fan_out..(mu + 1) * e.fan_out];
                let mut acc = 0.0;
                for (dv, wv) in delta.iter().zip(wrow) {
                    acc += dv * wv;
                }
                *nd = acc * act.dphi(h_prev[mu]);
            }
            delta = new_delta;
        }
    }
}

/// Exact per-sample parameter Jacobian. Row `s * k + o` holds
/// d f_o(x_s) / d theta, reverse-mode, one backward pass per row.
pub fn per_sample_jacobian(spec: &NetworkSpec, params: &ParamVector, x: &Mat) -> Result<Mat> {
    let tape = forward_tape(spec, params, x)?;
    let k = spec.output_dim;
    let d = params.len();
    let mut jac = Mat::zeros(x.rows() * k, d);
    jac.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(row_idx, row)| {
            let (sample, out_idx) = (row_idx / k, row_idx % k);
            backward_row(spec, params, &tape, sample, out_idx, row);
        });
    Ok(jac)
}

/// Central-difference Jacobian, the oracle against the reverse-mode path.
pub fn finite_diff_jacobian(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &Mat,
    step: f64,
) -> Result<Mat> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    let k = spec.output_dim;
    let d = params.len();
    let mut jac = Mat::zeros(x.rows() * k, d);
    let mut theta = params.clone();
    for j in 0..d {
        let orig = theta.data[j];
        theta.data[j] = orig + step;
        let plus = predict(spec, &theta, x)?;
        theta.data[j] = orig - step;
        let minus = predict(spec, &theta, x)?;
        theta.data[j] = orig;
        for s in 0..x.rows() {
            for o in 0..k {
                jac.set(s * k + o, j, (plus.get(s, o) - minus.get(s, o)) / (2.0 * step));
            }
        }
    }
    Ok(jac)
}

/// Gradient of the batch square loss 0.5 * ||f(X) - Y||^2 given the residual
/// matrix f(X) - Y. One batched backward pass.
pub fn grad_from_residuals(
    spec: &NetworkSpec,
    params: &ParamVector,
    tape: &Tape,
    residuals: &Mat,
) -> Vec<f64> {
    let dims = spec.layer_dims();
    let layout = params.layout();
    let act = spec.activation;
    let mut grad = vec![0.0; params.len()];
    let mut delta = residuals.clone();
    for layer in (0..dims.len()).rev() {
        let e = layout.entries[layer];
        accumulate_outer(&tape.zs[layer], &delta, &mut grad[e.w_off..e.w_off + e.fan_in * e.fan_out]);
        if spec.bias {
            let sums = delta.col_sums();
            grad[e.b_off..e.b_off + e.fan_out].copy_from_slice(&sums);
        }
        if layer > 0 {
            let s = mm_wt(&delta, params.w(layer), e.fan_in, e.fan_out);
            let h_prev = &tape.hs[layer - 1];
            delta = Mat::from_fn(s.rows(), s.cols(), |r, c| {
                s.get(r, c) * act.dphi(h_prev.get(r, c))
            });
        }
    }
    grad
}

pub fn support_loss_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &Mat,
    y: &Mat,
) -> Result<Vec<f64>> {
    let tape = forward_tape(spec, params, x)?;
    let residuals = tape.output().sub(y);
    Ok(grad_from_residuals(spec, params, &tape, &residuals))
}

/// Exact Hessian-vector product of the support square loss:
/// (d^2/dtheta^2 of 0.5 ||f(X) - Y||^2) v, by forward-mode differentiation of
/// the gradient computation. Includes the curvature (phi'') terms, so it is
/// exact for Erf as well as for piecewise-linear activations.
pub fn hvp_support_loss(
    spec: &NetworkSpec,
    params: &ParamVector,
    tape: &Tape,
    y: &Mat,
    v: &[f64],
) -> Vec<f64> {
    let dims = spec.layer_dims();
    let layout = params.layout();
    let act = spec.activation;
    let n = tape.zs[0].rows();
    debug_assert_eq!(v.len(), params.len());

    let vw = |layer: usize| {
        let e = layout.entries[layer];
        &v[e.w_off..e.w_off + e.fan_in * e.fan_out]
    };

    // forward tangents
    let mut tzs: Vec<Mat> = Vec::with_capacity(dims.len() + 1);
    let mut ths: Vec<Mat> = Vec::with_capacity(dims.len());
    tzs.push(Mat::zeros(n, spec.input_dim));
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let e = layout.entries[layer];
        let mut th = mm_w(&tape.zs[layer], vw(layer), fan_in, fan_out);
        th.add_assign(&mm_w(&tzs[layer], params.w(layer), fan_in, fan_out));
        if spec.bias {
            th.add_row_broadcast(&v[e.b_off..e.b_off + e.fan_out]);
        }
        if layer < spec.depth() {
            let h = &tape.hs[layer];
            tzs.push(Mat::from_fn(n, fan_out, |r, c| act.dphi(h.get(r, c)) * th.get(r, c)));
        }
        ths.push(th);
    }

    // backward cotangents and their tangents
    let residuals = tape.output().sub(y);
    let mut delta = residuals;
    let mut tdelta = ths[spec.depth()].clone();
    let mut out = vec![0.0; params.len()];
    for layer in (0..dims.len()).rev() {
        let e = layout.entries[layer];
        let gw = &mut out[e.w_off..e.w_off + e.fan_in * e.fan_out];
        accumulate_outer(&tzs[layer], &delta, gw);
        accumulate_outer(&tape.zs[layer], &tdelta, gw);
        if spec.bias {
            let sums = tdelta.col_sums();
            out[e.b_off..e.b_off + e.fan_out].copy_from_slice(&sums);
        }
        if layer > 0 {
            let s = mm_wt(&delta, params.w(layer), e.fan_in, e.fan_out);
            let mut ts = mm_wt(&tdelta, params.w(layer), e.fan_in, e.fan_out);
            ts.add_assign(&mm_wt(&delta, vw(layer), e.fan_in, e.fan_out));
            let h_prev = &tape.hs[layer - 1];
            let th_prev = &ths[layer - 1];
            let new_delta = Mat::from_fn(n, e.fan_in, |r, c| {
                s.get(r, c) * act.dphi(h_prev.get(r, c))
            });
            let new_tdelta = Mat::from_fn(n, e.fan_in, |r, c| {
                ts.get(r, c) * act.dphi(h_prev.get(r, c))
                    + s.get(r, c) * act.ddphi(h_prev.get(r, c)) * th_prev.get(r, c)
            });
            delta = new_delta;
            tdelta = new_tdelta;
        }
    }
    out
}
