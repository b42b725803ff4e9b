//! Deformable patch embedding.
//!
//! Each patch predicts one `(dy, dx)` displacement from its undeformed
//! `k x k x C` window with a linear map. The displacement is clamped to
//! `+-H/r` vertically and `+-W/r` horizontally, the window is resampled
//! bilinearly at the shifted positions (zero outside the image) and
//! projected to the embedding width.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Linear, Params};
use crate::nn::tensor::Tensor;

/// Window size, stride and zero padding of a patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "kernel {kernel} and stride {stride} must be positive"
            )));
        }
        Ok(Self { kernel, stride, pad })
    }

    /// Patch rows and columns for an `h x w` input.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} larger than padded input {ph}x{pw}",
                self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    fn origin(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i * self.stride) as f64 - self.pad as f64,
            (j * self.stride) as f64 - self.pad as f64,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpeParams {
    pub geometry: PatchGeometry,
    /// Offset limit divisor.
    pub r: f64,
    pub in_dim: usize,
    /// `k*k*C -> 2` offset predictor.
    pub offset: Linear,
    /// `k*k*C -> D` patch projection.
    pub proj: Linear,
}

impl DpeParams {
    /// Offset predictor at zero, so the layer starts as a plain patch
    /// embedding; projection uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        embed_dim: usize,
        geometry: PatchGeometry,
        r: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Config(format!("offset divisor r = {r} must be positive")));
        }
        if in_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let fan_in = geometry.kernel * geometry.kernel * in_dim;
        Ok(Self {
            geometry,
            r,
            in_dim,
            offset: Linear::zeros(fan_in, 2, true),
            proj: Linear::random(fan_in, embed_dim, true, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.fan_out()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            offset: self.offset.zeros_like(),
            proj: self.proj.zeros_like(),
            ..self.clone()
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (h, w, c) = x.hwc()?;
        let fan_in = self.geometry.kernel * self.geometry.kernel * self.in_dim;
        if c != self.in_dim
            || self.offset.fan_in() != fan_in
            || self.offset.fan_out() != 2
            || self.proj.fan_in() != fan_in
        {
            return Err(Error::Shape(format!(
                "DPE parameters for C = {} do not fit input {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        Ok((h, w, c))
    }
}

impl Params for DpeParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.offset.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.offset.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

/// Clamps a raw `(dy, dx)` to `[-h/r, h/r] x [-w/r, w/r]`.
pub fn clamp_offset(raw: (f64, f64), h: usize, w: usize, r: f64) -> (f64, f64) {
    let (bv, bh) = (h as f64 / r, w as f64 / r);
    (raw.0.clamp(-bv, bv), raw.1.clamp(-bh, bh))
}

fn pixel(x: &Tensor, r: i64, c: i64, ch: usize) -> f64 {
    let (h, w) = (x.shape()[0] as i64, x.shape()[1] as i64);
    if r < 0 || c < 0 || r >= h || c >= w {
        0.0
    } else {
        x.get3(r as usize, c as usize, ch)
    }
}

/// Undeformed windows, one row per patch, flattened `(u, v, channel)`.
fn plain_windows(x: &Tensor, g: &PatchGeometry, grid: (usize, usize)) -> Array2<f64> {
    let c = x.shape()[2];
    let k = g.kernel;
    Array2::from_shape_fn((grid.0 * grid.1, k * k * c), |(p, f)| {
        let (i, j) = (p / grid.1, p % grid.1);
        let (u, v, ch) = (f / (k * c), (f / c) % k, f % c);
        let (r0, c0) = g.origin(i, j);
        pixel(x, r0 as i64 + u as i64, c0 as i64 + v as i64, ch)
    })
}

struct Bilinear {
    y0: i64,
    x0: i64,
    fy: f64,
    fx: f64,
}

impl Bilinear {
    fn at(y: f64, x: f64) -> Self {
        let (yf, xf) = (y.floor(), x.floor());
        Self {
            y0: yf as i64,
            x0: xf as i64,
            fy: y - yf,
            fx: x - xf,
        }
    }

    fn corners(&self) -> [(i64, i64, f64); 4] {
        let (fy, fx) = (self.fy, self.fx);
        [
            (self.y0, self.x0, (1.0 - fy) * (1.0 - fx)),
            (self.y0, self.x0 + 1, (1.0 - fy) * fx),
            (self.y0 + 1, self.x0, fy * (1.0 - fx)),
            (self.y0 + 1, self.x0 + 1, fy * fx),
        ]
    }
}

fn sampled_windows(x: &Tensor, g: &PatchGeometry, grid: (usize, usize), offsets: &Array2<f64>) -> Array2<f64> {
    let c = x.shape()[2];
    let k = g.kernel;
    Array2::from_shape_fn((grid.0 * grid.1, k * k * c), |(p, f)| {
        let (i, j) = (p / grid.1, p % grid.1);
        let (u, v, ch) = (f / (k * c), (f / c) % k, f % c);
        let (r0, c0) = g.origin(i, j);
        let b = Bilinear::at(r0 + u as f64 + offsets[[p, 0]], c0 + v as f64 + offsets[[p, 1]]);
        b.corners()
            .iter()
            .map(|&(r, cc, wgt)| if wgt == 0.0 { 0.0 } else { wgt * pixel(x, r, cc, ch) })
            .sum()
    })
}

struct DpeCache {
    grid: (usize, usize),
    plain: Array2<f64>,
    raw: Array2<f64>,
    offsets: Array2<f64>,
    sampled: Array2<f64>,
}

fn dpe_fwd(x: &Tensor, p: &DpeParams) -> Result<(Array2<f64>, DpeCache)> {
    let (h, w, _) = p.check(x)?;
    let grid = p.geometry.grid(h, w)?;
    let plain = plain_windows(x, &p.geometry, grid);
    let raw = p.offset.forward(&plain);
    let mut offsets = raw.clone();
    for mut row in offsets.rows_mut() {
        let (dy, dx) = clamp_offset((row[0], row[1]), h, w, p.r);
        row[0] = dy;
        row[1] = dx;
    }
    let sampled = sampled_windows(x, &p.geometry, grid, &offsets);
    let tokens = p.proj.forward(&sampled);
    Ok((
        tokens,
        DpeCache {
            grid,
            plain,
            raw,
            offsets,
            sampled,
        },
    ))
}

/// Clamped offsets, one `(dy, dx)` row per patch.
pub fn dpe_offsets(x: &Tensor, p: &DpeParams) -> Result<Tensor> {
    let (_, c) = dpe_fwd(x, p)?;
    Ok(Tensor::from_matrix(&c.offsets))
}

/// Raw (unclamped) predictor output, one row per patch.
pub fn dpe_raw_offsets(x: &Tensor, p: &DpeParams) -> Result<Tensor> {
    let (_, c) = dpe_fwd(x, p)?;
    Ok(Tensor::from_matrix(&c.raw))
}

/// Tokens `patches x embed_dim`.
pub fn dpe_embed(x: &Tensor, p: &DpeParams) -> Result<Tensor> {
    Ok(Tensor::from_matrix(&dpe_fwd(x, p)?.0))
}

/// Embedding with caller-supplied offsets (`patches x 2`), bypassing the
/// predictor and the clamp.
pub fn dpe_embed_with_offsets(x: &Tensor, p: &DpeParams, offsets: &Tensor) -> Result<Tensor> {
    let (h, w, _) = p.check(x)?;
    let grid = p.geometry.grid(h, w)?;
    if offsets.shape() != [grid.0 * grid.1, 2] {
        return Err(Error::Shape(format!(
            "offsets shape {:?} for {} patches",
            offsets.shape(),
            grid.0 * grid.1
        )));
    }
    let off = Array2::from_shape_vec((grid.0 * grid.1, 2), offsets.data().to_vec()).expect("shape checked");
    Ok(Tensor::from_matrix(&p.proj.forward(&sampled_windows(
        x,
        &p.geometry,
        grid,
        &off,
    ))))
}

/// Plain patch embedding: undeformed windows through `proj`.
pub fn patch_embed(x: &Tensor, proj: &Linear, geometry: &PatchGeometry) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if proj.fan_in() != geometry.kernel * geometry.kernel * c {
        return Err(Error::Shape(format!(
            "projection expects {} features, window has {}",
            proj.fan_in(),
            geometry.kernel * geometry.kernel * c
        )));
    }
    let grid = geometry.grid(h, w)?;
    Ok(Tensor::from_matrix(&proj.forward(&plain_windows(x, geometry, grid))))
}

/// Patch grid `(rows, cols)` produced for input `x`.
pub fn dpe_grid(x: &Tensor, p: &DpeParams) -> Result<(usize, usize)> {
    let (h, w, _) = p.check(x)?;
    p.geometry.grid(h, w)
}

/// Distances of the forward pass from its non-differentiable set: the
/// smallest distance of an unclamped offset to the pixel lattice, and of a
/// raw offset to its clamp bound.
pub fn dpe_kink_margin(x: &Tensor, p: &DpeParams) -> Result<(f64, f64)> {
    let (h, w, _) = p.check(x)?;
    let (_, c) = dpe_fwd(x, p)?;
    let frac = |v: f64| {
        let f = v - v.floor();
        f.min(1.0 - f)
    };
    let (bv, bh) = (h as f64 / p.r, w as f64 / p.r);
    // clamped coordinates carry no offset gradient, so the lattice is harmless there
    let lattice = c
        .raw
        .rows()
        .into_iter()
        .flat_map(|r| [(r[0], bv), (r[1], bh)])
        .filter(|&(v, b)| v.abs() < b)
        .map(|(v, _)| frac(v))
        .fold(f64::INFINITY, f64::min);
    let clamp = c
        .raw
        .rows()
        .into_iter()
        .flat_map(|r| [(r[0].abs() - bv).abs(), (r[1].abs() - bh).abs()])
        .fold(f64::INFINITY, f64::min);
    Ok((lattice, clamp))
}

/// Input and parameter gradients of `sum(dout * dpe_embed(x))`.
pub fn dpe_backward(x: &Tensor, p: &DpeParams, dout: &Tensor) -> Result<(Tensor, DpeParams)> {
    let (h, w, ch) = p.check(x)?;
    let (tokens, cache) = dpe_fwd(x, p)?;
    if dout.shape() != [tokens.nrows(), tokens.ncols()] {
        return Err(Error::Shape(format!("upstream gradient shape {:?}", dout.shape())));
    }
    let dtok = Array2::from_shape_vec(tokens.dim(), dout.data().to_vec()).expect("shape checked");
    let mut g = p.zeros_like();
    let dsampled = p.proj.backward(&cache.sampled, &dtok, &mut g.proj);

    let k = p.geometry.kernel;
    let gw = cache.grid.1;
    let mut dx = vec![0.0; x.len()];
    let mut add = |r: i64, c: i64, chn: usize, v: f64| {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            dx[(r as usize * w + c as usize) * ch + chn] += v;
        }
    };
    let mut draw = Array2::<f64>::zeros(cache.raw.dim());
    for pi in 0..cache.grid.0 * gw {
        let (r0, c0) = p.geometry.origin(pi / gw, pi % gw);
        let (mut ddy, mut ddx) = (0.0, 0.0);
        for f in 0..k * k * ch {
            let gval = dsampled[[pi, f]];
            if gval == 0.0 {
                continue;
            }
            let (u, v, chn) = (f / (k * ch), (f / ch) % k, f % ch);
            let b = Bilinear::at(
                r0 + u as f64 + cache.offsets[[pi, 0]],
                c0 + v as f64 + cache.offsets[[pi, 1]],
            );
            for (r, c, wgt) in b.corners() {
                add(r, c, chn, gval * wgt);
            }
            let v00 = pixel(x, b.y0, b.x0, chn);
            let v01 = pixel(x, b.y0, b.x0 + 1, chn);
            let v10 = pixel(x, b.y0 + 1, b.x0, chn);
            let v11 = pixel(x, b.y0 + 1, b.x0 + 1, chn);
            ddy += gval * ((1.0 - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
            ddx += gval * ((1.0 - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
        }
        let (bv, bh) = (h as f64 / p.r, w as f64 / p.r);
        draw[[pi, 0]] = if cache.raw[[pi, 0]].abs() < bv { ddy } else { 0.0 };
        draw[[pi, 1]] = if cache.raw[[pi, 1]].abs() < bh { ddx } else { 0.0 };
    }

    let dplain = p.offset.backward(&cache.plain, &draw, &mut g.offset);
    for pi in 0..cache.grid.0 * gw {
        let (r0, c0) = p.geometry.origin(pi / gw, pi % gw);
        for f in 0..k * k * ch {
            let (u, v, chn) = (f / (k * ch), (f / ch) % k, f % ch);
            add(r0 as i64 + u as i64, c0 as i64 + v as i64, chn, dplain[[pi, f]]);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(h: usize, w: usize, c: usize) -> (Tensor, DpeParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random(vec![h, w, c], 1.0, &mut rng).unwrap();
        let p = DpeParams::new(c, 5, PatchGeometry::new(3, 2, 1).unwrap(), 4.0, &mut rng).unwrap();
        (x, p, rng)
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_offset((7.2, 0.0), 16, 16, 4.0).0, 4.0);
        assert_eq!(clamp_offset((-10.0, 0.0), 16, 16, 4.0).0, -4.0);
        assert_eq!(clamp_offset((1.5, -9.0), 16, 32, 4.0), (1.5, -8.0));
    }

    #[test]
    fn zero_offsets_reduce_to_plain_embedding() {
        let (x, p, _) = setup(8, 8, 2);
        let a = dpe_embed(&x, &p).unwrap();
        let b = patch_embed(&x, &p.proj, &p.geometry).unwrap();
        assert_eq!(a, b);
        assert_eq!(dpe_grid(&x, &p).unwrap(), (4, 4));
    }

    #[test]
    fn integer_offsets_shift_windows_exactly() {
        let (x, mut p, _) = setup(8, 8, 2);
        p.geometry = PatchGeometry::new(2, 2, 0).unwrap();
        p.offset = Linear::zeros(8, 2, true);
        p.proj = Linear::random(8, 3, true, &mut ChaCha8Rng::seed_from_u64(1));
        let n = 16;
        let off = Tensor::new(vec![n, 2], [1.0, -1.0].repeat(n)).unwrap();
        let out = dpe_embed_with_offsets(&x, &p, &off).unwrap();
        // shifted plain windows: origin (2i+1, 2j-1)
        let shifted = Array2::from_shape_fn((n, 8), |(pi, f)| {
            let (i, j) = (pi / 4, pi % 4);
            let (u, v, ch) = (f / 4, (f / 2) % 2, f % 2);
            pixel(&x, (2 * i + 1 + u) as i64, 2 * j as i64 - 1 + v as i64, ch)
        });
        let expect = p.proj.forward(&shifted);
        assert_eq!(out.data(), expect.as_slice().unwrap());
    }

    #[test]
    fn clamp_holds_for_large_predictor() {
        let (x, mut p, mut rng) = setup(8, 8, 2);
        p.offset = Linear::random(18, 2, true, &mut rng);
        p.offset.w.mapv_inplace(|v| v * 100.0);
        let off = dpe_offsets(&x, &p).unwrap();
        assert!(off.data().iter().all(|v| v.abs() <= 2.0));
        assert!(off.data().iter().any(|v| v.abs() == 2.0));
    }

    #[test]
    fn bad_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(DpeParams::new(2, 4, PatchGeometry::new(3, 2, 1).unwrap(), 0.0, &mut rng).is_err());
        assert!(PatchGeometry::new(3, 0, 0).is_err());
        let (_, p, _) = setup(8, 8, 2);
        assert!(dpe_embed(&Tensor::zeros(vec![8, 8, 3]).unwrap(), &p).is_err());
    }
}
