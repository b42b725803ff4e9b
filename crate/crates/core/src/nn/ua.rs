//! Unmasking Attention block.
//!
//! ```text
//! X'   = X + Attn(LN(X))
//! q'   = softmax(q K'^T / sqrt(C)) V'     q = GAP(X') W_q + b_q, K' = X' W_k, V' = X' W_v + b_v
//! X''  = sigmoid(q') * X'                 (1 x C gate broadcast over positions)
//! out  = X'' + MLP(LN(X''))
//! ```
//!
//! Key projections carry no bias: a key bias shifts every score of a query
//! by the same amount and cancels in the softmax.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{
    gelu, gelu_grad, sigmoid, softmax_rows, softmax_rows_backward, LayerNorm, LayerNormCache, Linear, Params,
};
use crate::nn::tensor::Tensor;

/// Per-channel spatial mean of an `H x W x C` tensor, shaped `1 x 1 x C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let tokens = x.to_tokens()?;
    let g = tokens.mean_axis(Axis(0)).expect("nonempty");
    Tensor::new(vec![1, 1, g.len()], g.to_vec())
}

/// Gradient of [`global_avg_pool`] for an upstream `1 x 1 x C` gradient.
pub fn global_avg_pool_backward(input_shape: (usize, usize, usize), dy: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input_shape;
    if dy.shape() != [1, 1, c] {
        return Err(Error::Shape(format!("GAP gradient shape {:?}", dy.shape())));
    }
    let n = (h * w) as f64;
    let data = (0..h * w).flat_map(|_| dy.data().iter().map(move |v| v / n)).collect();
    Tensor::new(vec![h, w, c], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttnParams {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UaParams {
    pub attn: SelfAttnParams,
    pub pool: PoolingParams,
    pub mlp: MlpParams,
}

impl SelfAttnParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::identity(dim),
            q: Linear::random(dim, dim, true, rng),
            k: Linear::random(dim, dim, false, rng),
            v: Linear::random(dim, dim, true, rng),
            o: Linear::random(dim, dim, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm: self.norm.zeros_like(),
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let ok = self.norm.gamma.len() == dim
            && [&self.q, &self.k, &self.v, &self.o]
                .iter()
                .all(|l| l.fan_in() == dim && l.fan_out() == dim);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "self-attention parameters do not match C = {dim}"
            )))
        }
    }
}

impl PoolingParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::random(dim, dim, true, rng),
            k: Linear::random(dim, dim, false, rng),
            v: Linear::random(dim, dim, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if [&self.q, &self.k, &self.v]
            .iter()
            .all(|l| l.fan_in() == dim && l.fan_out() == dim)
        {
            Ok(())
        } else {
            Err(Error::Shape(format!("pooling parameters do not match C = {dim}")))
        }
    }
}

impl MlpParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::identity(dim),
            fc1: Linear::random(dim, hidden, true, rng),
            fc2: Linear::random(hidden, dim, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm: self.norm.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let ok = self.norm.gamma.len() == dim
            && self.fc1.fan_in() == dim
            && self.fc2.fan_in() == self.fc1.fan_out()
            && self.fc2.fan_out() == dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("MLP parameters do not match C = {dim}")))
        }
    }
}

impl UaParams {
    /// Identity normalization, uniform `+-1/sqrt(fan_in)` weights.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            attn: SelfAttnParams::new(dim, rng),
            pool: PoolingParams::new(dim, rng),
            mlp: MlpParams::new(dim, hidden, rng),
        }
    }

    /// Like [`UaParams::new`] with randomized normalization scales and
    /// shifts, so that no gradient vanishes by symmetry.
    pub fn randomized<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::new(dim, hidden, rng);
        p.attn.norm = LayerNorm::random(dim, rng);
        p.mlp.norm = LayerNorm::random(dim, rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            attn: self.attn.zeros_like(),
            pool: self.pool.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn.norm.gamma.len()
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        self.attn.check(dim)?;
        self.pool.check(dim)?;
        self.mlp.check(dim)
    }
}

macro_rules! visit_fields {
    ($t:ty, $($f:ident),+) => {
        impl Params for $t {
            fn visit(&self, f: &mut dyn FnMut(&[f64])) {
                $(self.$f.visit(f);)+
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
                $(self.$f.visit_mut(f);)+
            }
        }
    };
}

visit_fields!(SelfAttnParams, norm, q, k, v, o);
visit_fields!(PoolingParams, q, k, v);
visit_fields!(MlpParams, norm, fc1, fc2);
visit_fields!(UaParams, attn, pool, mlp);

struct SelfAttnCache {
    ln: LayerNormCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    o: Array2<f64>,
}

fn self_attn_fwd(x: &Array2<f64>, p: &SelfAttnParams) -> (Array2<f64>, SelfAttnCache) {
    let scale = 1.0 / (x.ncols() as f64).sqrt();
    let (h, ln) = p.norm.forward(x);
    let q = p.q.forward(&h);
    let k = p.k.forward(&h);
    let v = p.v.forward(&h);
    let a = softmax_rows(&(q.dot(&k.t()) * scale));
    let o = a.dot(&v);
    let out = x + &p.o.forward(&o);
    (out, SelfAttnCache { ln, h, q, k, v, a, o })
}

fn self_attn_bwd(p: &SelfAttnParams, c: &SelfAttnCache, dout: &Array2<f64>, g: &mut SelfAttnParams) -> Array2<f64> {
    let scale = 1.0 / (dout.ncols() as f64).sqrt();
    let d_o = p.o.backward(&c.o, dout, &mut g.o);
    let da = d_o.dot(&c.v.t());
    let dv = c.a.t().dot(&d_o);
    let ds = softmax_rows_backward(&c.a, &da) * scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    let dh = p.q.backward(&c.h, &dq, &mut g.q) + p.k.backward(&c.h, &dk, &mut g.k) + p.v.backward(&c.h, &dv, &mut g.v);
    dout + &p.norm.backward(&c.ln, &dh, &mut g.norm)
}

struct PoolCache {
    xp: Array2<f64>,
    gap: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

fn pool_fwd(xp: &Array2<f64>, p: &PoolingParams) -> (Array2<f64>, PoolCache) {
    let scale = 1.0 / (xp.ncols() as f64).sqrt();
    let gap = xp.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
    let q = p.q.forward(&gap);
    let k = p.k.forward(xp);
    let v = p.v.forward(xp);
    let a = softmax_rows(&(q.dot(&k.t()) * scale));
    let out = a.dot(&v);
    (
        out,
        PoolCache {
            xp: xp.clone(),
            gap,
            q,
            k,
            v,
            a,
        },
    )
}

fn pool_bwd(p: &PoolingParams, c: &PoolCache, dout: &Array2<f64>, g: &mut PoolingParams) -> Array2<f64> {
    let n = c.xp.nrows() as f64;
    let scale = 1.0 / (c.xp.ncols() as f64).sqrt();
    let da = dout.dot(&c.v.t());
    let dv = c.a.t().dot(dout);
    let ds = softmax_rows_backward(&c.a, &da) * scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    let dgap = p.q.backward(&c.gap, &dq, &mut g.q);
    let mut dxp = p.k.backward(&c.xp, &dk, &mut g.k) + p.v.backward(&c.xp, &dv, &mut g.v);
    dxp += &(dgap / n);
    dxp
}

struct MlpCache {
    ln: LayerNormCache,
    h: Array2<f64>,
    z: Array2<f64>,
    act: Array2<f64>,
}

fn mlp_fwd(x: &Array2<f64>, p: &MlpParams) -> (Array2<f64>, MlpCache) {
    let (h, ln) = p.norm.forward(x);
    let z = p.fc1.forward(&h);
    let act = z.mapv(gelu);
    let out = x + &p.fc2.forward(&act);
    (out, MlpCache { ln, h, z, act })
}

fn mlp_bwd(p: &MlpParams, c: &MlpCache, dout: &Array2<f64>, g: &mut MlpParams) -> Array2<f64> {
    let dact = p.fc2.backward(&c.act, dout, &mut g.fc2);
    let dz = dact * &c.z.mapv(gelu_grad);
    let dh = p.fc1.backward(&c.h, &dz, &mut g.fc1);
    dout + &p.norm.backward(&c.ln, &dh, &mut g.norm)
}

struct UaCache {
    attn: SelfAttnCache,
    pool: PoolCache,
    xp: Array2<f64>,
    gate: Array1<f64>,
    mlp: MlpCache,
}

fn ua_fwd(x: &Array2<f64>, p: &UaParams) -> (Array2<f64>, UaCache) {
    let (xp, attn) = self_attn_fwd(x, &p.attn);
    let (qp, pool) = pool_fwd(&xp, &p.pool);
    let gate = qp.row(0).mapv(sigmoid);
    let xpp = &xp * &gate;
    let (out, mlp) = mlp_fwd(&xpp, &p.mlp);
    (
        out,
        UaCache {
            attn,
            pool,
            xp,
            gate,
            mlp,
        },
    )
}

fn ua_bwd(p: &UaParams, c: &UaCache, dout: &Array2<f64>, g: &mut UaParams) -> Array2<f64> {
    let dxpp = mlp_bwd(&p.mlp, &c.mlp, dout, &mut g.mlp);
    let dgate = (&dxpp * &c.xp).sum_axis(Axis(0));
    let dqp = (dgate * &c.gate.mapv(|s| s * (1.0 - s))).insert_axis(Axis(0));
    let dxp = &dxpp * &c.gate + &pool_bwd(&p.pool, &c.pool, &dqp, &mut g.pool);
    self_attn_bwd(&p.attn, &c.attn, &dxp, &mut g.attn)
}

fn tokens_checked(x: &Tensor, dim: usize) -> Result<(usize, usize, Array2<f64>)> {
    let (h, w, c) = x.hwc()?;
    if c != dim {
        return Err(Error::Shape(format!("input has C = {c}, parameters expect {dim}")));
    }
    Ok((h, w, x.to_tokens()?))
}

/// Pre-norm single-head self-attention with a residual connection.
pub fn self_attention(x: &Tensor, p: &SelfAttnParams) -> Result<Tensor> {
    let dim = p.norm.gamma.len();
    p.check(dim)?;
    let (h, w, t) = tokens_checked(x, dim)?;
    Ok(Tensor::from_tokens(h, w, self_attn_fwd(&t, p).0))
}

/// Row-stochastic attention matrix of [`self_attention`].
pub fn self_attention_weights(x: &Tensor, p: &SelfAttnParams) -> Result<Tensor> {
    let dim = p.norm.gamma.len();
    p.check(dim)?;
    let (_, _, t) = tokens_checked(x, dim)?;
    Ok(Tensor::from_matrix(&self_attn_fwd(&t, p).1.a))
}

/// Self-attended pooling feature `q'`, shaped `1 x 1 x C`.
pub fn pooling_attention(xp: &Tensor, p: &PoolingParams) -> Result<Tensor> {
    let dim = p.q.fan_in();
    p.check(dim)?;
    let (_, _, t) = tokens_checked(xp, dim)?;
    Tensor::new(vec![1, 1, dim], pool_fwd(&t, p).0.into_raw_vec_and_offset().0)
}

/// `sigmoid(q')`, the per-channel occlusion gate.
pub fn occlusion_mask(xp: &Tensor, p: &PoolingParams) -> Result<Tensor> {
    let mut q = pooling_attention(xp, p)?;
    q.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(q)
}

/// `gate * X'` with the `1 x 1 x C` gate broadcast over positions.
pub fn apply_gate(xp: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (h, w, c) = xp.hwc()?;
    if gate.shape() != [1, 1, c] {
        return Err(Error::Shape(format!("gate shape {:?} for C = {c}", gate.shape())));
    }
    let data = xp
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * gate.data()[i % c])
        .collect();
    Tensor::new(vec![h, w, c], data)
}

pub fn ua_block(x: &Tensor, p: &UaParams) -> Result<Tensor> {
    p.check(p.dim())?;
    let (h, w, t) = tokens_checked(x, p.dim())?;
    Ok(Tensor::from_tokens(h, w, ua_fwd(&t, p).0))
}

/// Input gradient and parameter gradients of `sum(dout * ua_block(x))`.
pub fn ua_block_backward(x: &Tensor, p: &UaParams, dout: &Tensor) -> Result<(Tensor, UaParams)> {
    p.check(p.dim())?;
    let (h, w, t) = tokens_checked(x, p.dim())?;
    if dout.shape() != x.shape() {
        return Err(Error::Shape(format!("upstream gradient shape {:?}", dout.shape())));
    }
    let (_, cache) = ua_fwd(&t, p);
    let mut g = p.zeros_like();
    let dx = ua_bwd(p, &cache, &dout.to_tokens()?, &mut g);
    Ok((Tensor::from_tokens(h, w, dx), g))
}

pub fn pooling_attention_backward(xp: &Tensor, p: &PoolingParams, dout: &Tensor) -> Result<(Tensor, PoolingParams)> {
    let dim = p.q.fan_in();
    p.check(dim)?;
    let (h, w, t) = tokens_checked(xp, dim)?;
    if dout.shape() != [1, 1, dim] {
        return Err(Error::Shape(format!("upstream gradient shape {:?}", dout.shape())));
    }
    let (_, cache) = pool_fwd(&t, p);
    let mut g = p.zeros_like();
    let d = Array2::from_shape_vec((1, dim), dout.data().to_vec()).expect("shape checked");
    let dx = pool_bwd(p, &cache, &d, &mut g);
    Ok((Tensor::from_tokens(h, w, dx), g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn gap_values() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(vec![3, 2, 2], 1.5).unwrap();
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[1.5, 1.5]);
        let g = global_avg_pool_backward((2, 2, 1), &Tensor::full(vec![1, 1, 1], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
        assert!(global_avg_pool(&Tensor::zeros(vec![4, 4]).unwrap()).is_err());
    }

    #[test]
    fn zero_attention_weights_keep_residual() {
        let mut r = rng();
        let mut p = SelfAttnParams::new(3, &mut r);
        p.o.fill(0.0);
        let x = Tensor::random(vec![4, 4, 3], 1.0, &mut r).unwrap();
        assert_eq!(self_attention(&x, &p).unwrap(), x);
        let a = self_attention_weights(&x, &SelfAttnParams::new(3, &mut r)).unwrap();
        for row in a.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_pools_to_value_projection() {
        let mut r = rng();
        let p = PoolingParams::new(3, &mut r);
        let x = Tensor::full(vec![4, 4, 3], 0.3).unwrap();
        let q = pooling_attention(&x, &p).unwrap();
        let one = Tensor::full(vec![1, 1, 3], 0.3).unwrap();
        let v = p.v.forward(&one.to_tokens().unwrap());
        for (a, b) in q.data().iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_bounds_and_annihilation() {
        let mut r = rng();
        let p = PoolingParams::new(3, &mut r);
        let x = Tensor::random(vec![4, 4, 3], 50.0, &mut r).unwrap();
        let g = occlusion_mask(&x, &p).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = Tensor::zeros(vec![4, 4, 3]).unwrap();
        let gz = occlusion_mask(&zero, &p).unwrap();
        assert!(apply_gate(&zero, &gz).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_gate_scales_exactly() {
        let mut r = rng();
        let x = Tensor::random(vec![3, 3, 2], 1.0, &mut r).unwrap();
        let gate = Tensor::new(vec![1, 1, 2], vec![0.3, 0.8]).unwrap();
        let mut scaled = x.clone();
        for (i, v) in scaled.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *v *= 4.0;
            }
        }
        let a = apply_gate(&x, &gate).unwrap();
        let b = apply_gate(&scaled, &gate).unwrap();
        for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
            let expect = if i % 2 == 1 { 4.0 * u } else { *u };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn shape_preserved_and_checked() {
        let mut r = rng();
        let p = UaParams::new(3, 6, &mut r);
        let x = Tensor::random(vec![4, 5, 3], 1.0, &mut r).unwrap();
        assert_eq!(ua_block(&x, &p).unwrap().shape(), &[4, 5, 3]);
        let bad = Tensor::random(vec![4, 5, 2], 1.0, &mut r).unwrap();
        assert!(ua_block(&bad, &p).is_err());
    }
}
