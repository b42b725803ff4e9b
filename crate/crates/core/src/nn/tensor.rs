use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    /// Values uniform in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Shape(format!(
                "expected a rank-3 H x W x C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get3(&self, r: usize, c: usize, ch: usize) -> f64 {
        let (_, w, cs) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(r * w + c) * cs + ch]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Rank-3 `H x W x C` viewed as an `(H*W) x C` token matrix.
    pub(crate) fn to_tokens(&self) -> Result<Array2<f64>> {
        let (h, w, c) = self.hwc()?;
        Ok(Array2::from_shape_vec((h * w, c), self.data.clone()).expect("shape checked"))
    }

    pub(crate) fn from_tokens(h: usize, w: usize, m: Array2<f64>) -> Self {
        let c = m.ncols();
        let data = m.as_standard_layout().iter().copied().collect();
        Self {
            shape: vec![h, w, c],
            data,
        }
    }

    pub(crate) fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.as_standard_layout().iter().copied().collect(),
        }
    }
}
