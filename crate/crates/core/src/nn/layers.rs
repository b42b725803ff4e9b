//! Primitive layers with explicit backward passes. Backward functions
//! accumulate parameter gradients into a structure of the same type.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Uniform visitation of every learnable scalar, in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(Error::Shape(format!("expected {n} parameters, got {}", values.len())));
        }
        let mut at = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&values[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    fn fill(&mut self, v: f64) {
        self.visit_mut(&mut |s| s.fill(v));
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl Linear {
    /// Weights and bias uniform in `+-1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let a = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-a..a));
        let b = bias.then(|| Array1::from_shape_fn(fan_out, |_| rng.gen_range(-a..a)));
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: bias.then(|| Array1::zeros(fan_out)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out(), self.b.is_some())
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn check_input(&self, x: &Array2<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.fan_in() {
            return Err(Error::Shape(format!(
                "{what}: input has {} features, weight expects {}",
                x.ncols(),
                self.fan_in()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Returns `dx`; adds `dW`, `db` into `grad`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        if let Some(gb) = &mut grad.b {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.w));
        if let Some(b) = &self.b {
            f(slice1(b));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.w));
        if let Some(b) = &mut self.b {
            f(slice1_mut(b));
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token normalization over channels with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    /// Scale in `1 +- 0.5`, shift in `+-0.5`.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            gamma: Array1::from_shape_fn(dim, |_| 1.0 + rng.gen_range(-0.5..0.5)),
            beta: Array1::from_shape_fn(dim, |_| rng.gen_range(-0.5..0.5)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / c;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / c;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let c = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let m1 = dxhat.sum_axis(Axis(1)) / c;
        let m2 = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / c;
        let mut dx = dxhat - m1.view().insert_axis(Axis(1)) - &cache.xhat * &m2.view().insert_axis(Axis(1));
        dx *= &cache.inv_std.view().insert_axis(Axis(1));
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice1(&self.gamma));
        f(slice1(&self.beta));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice1_mut(&mut self.gamma));
        f(slice1_mut(&mut self.beta));
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Gradient of the row-wise softmax given its output `a`.
pub fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let dot = (a * da).sum_axis(Axis(1));
    a * &(da - &dot.view().insert_axis(Axis(1)))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
