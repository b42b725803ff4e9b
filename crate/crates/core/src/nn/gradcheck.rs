//! Central-difference verification of the analytic backward passes.
//!
//! The scalar loss is the sum of all block outputs. Every input element and
//! every parameter is perturbed by `+-eps`; the reported error is
//! `|a - n| / max(|a|, |n|, 1e-8)` maximized over all of them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::dpe::{dpe_backward, dpe_embed, dpe_kink_margin, DpeParams, PatchGeometry};
use crate::nn::layers::{Linear, Params};
use crate::nn::tensor::Tensor;
use crate::nn::ua::{
    global_avg_pool, global_avg_pool_backward, pooling_attention, pooling_attention_backward, ua_block,
    ua_block_backward, PoolingParams, UaParams,
};

const DENOM_FLOOR: f64 = 1e-8;
/// Minimum distance from the sampling lattice and the clamp bounds for a
/// DPE fixture to be accepted.
const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradBlock {
    Gap,
    Pool,
    Ua,
    Dpe,
}

impl GradBlock {
    pub const ALL: [GradBlock; 4] = [GradBlock::Gap, GradBlock::Pool, GradBlock::Ua, GradBlock::Dpe];
}

impl fmt::Display for GradBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradBlock::Gap => "gap",
            GradBlock::Pool => "pool",
            GradBlock::Ua => "ua",
            GradBlock::Dpe => "dpe",
        })
    }
}

impl FromStr for GradBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(GradBlock::Gap),
            "pool" => Ok(GradBlock::Pool),
            "ua" => Ok(GradBlock::Ua),
            "dpe" => Ok(GradBlock::Dpe),
            other => Err(Error::Config(format!("unknown block {other:?} (gap, pool, ua, dpe)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub block: GradBlock,
    pub seed: u64,
    pub eps: f64,
    pub input_shape: Vec<usize>,
    pub max_rel_error: f64,
    pub input_error: f64,
    pub param_error: f64,
    pub checked: usize,
    /// Fixture draws needed to keep the DPE sample away from its kinks.
    pub draws: usize,
}

/// Fixture: input, flat parameters, loss and analytic gradients.
trait Fixture {
    fn input(&self) -> &Tensor;
    fn params(&self) -> Vec<f64>;
    fn loss(&self, x: &Tensor, params: &[f64]) -> Result<f64>;
    fn grads(&self) -> Result<(Tensor, Vec<f64>)>;
}

fn ones_like(shape: &[usize]) -> Result<Tensor> {
    Tensor::full(shape.to_vec(), 1.0)
}

fn sum(t: &Tensor) -> Result<f64> {
    t.check_finite("block output")?;
    Ok(t.data().iter().sum())
}

struct GapFixture {
    x: Tensor,
}

impl Fixture for GapFixture {
    fn input(&self) -> &Tensor {
        &self.x
    }
    fn params(&self) -> Vec<f64> {
        Vec::new()
    }
    fn loss(&self, x: &Tensor, _: &[f64]) -> Result<f64> {
        sum(&global_avg_pool(x)?)
    }
    fn grads(&self) -> Result<(Tensor, Vec<f64>)> {
        let shape = self.x.hwc()?;
        let dx = global_avg_pool_backward(shape, &ones_like(&[1, 1, shape.2])?)?;
        Ok((dx, Vec::new()))
    }
}

struct PoolFixture {
    x: Tensor,
    p: PoolingParams,
}

impl Fixture for PoolFixture {
    fn input(&self) -> &Tensor {
        &self.x
    }
    fn params(&self) -> Vec<f64> {
        self.p.to_flat()
    }
    fn loss(&self, x: &Tensor, params: &[f64]) -> Result<f64> {
        let mut p = self.p.clone();
        p.set_flat(params)?;
        sum(&pooling_attention(x, &p)?)
    }
    fn grads(&self) -> Result<(Tensor, Vec<f64>)> {
        let c = self.x.hwc()?.2;
        let (dx, g) = pooling_attention_backward(&self.x, &self.p, &ones_like(&[1, 1, c])?)?;
        Ok((dx, g.to_flat()))
    }
}

struct UaFixture {
    x: Tensor,
    p: UaParams,
}

impl Fixture for UaFixture {
    fn input(&self) -> &Tensor {
        &self.x
    }
    fn params(&self) -> Vec<f64> {
        self.p.to_flat()
    }
    fn loss(&self, x: &Tensor, params: &[f64]) -> Result<f64> {
        let mut p = self.p.clone();
        p.set_flat(params)?;
        sum(&ua_block(x, &p)?)
    }
    fn grads(&self) -> Result<(Tensor, Vec<f64>)> {
        let (dx, g) = ua_block_backward(&self.x, &self.p, &ones_like(self.x.shape())?)?;
        Ok((dx, g.to_flat()))
    }
}

struct DpeFixture {
    x: Tensor,
    p: DpeParams,
}

impl Fixture for DpeFixture {
    fn input(&self) -> &Tensor {
        &self.x
    }
    fn params(&self) -> Vec<f64> {
        self.p.to_flat()
    }
    fn loss(&self, x: &Tensor, params: &[f64]) -> Result<f64> {
        let mut p = self.p.clone();
        p.set_flat(params)?;
        sum(&dpe_embed(x, &p)?)
    }
    fn grads(&self) -> Result<(Tensor, Vec<f64>)> {
        let out = dpe_embed(&self.x, &self.p)?;
        let (dx, g) = dpe_backward(&self.x, &self.p, &ones_like(out.shape())?)?;
        Ok((dx, g.to_flat()))
    }
}

fn build(block: GradBlock, seed: u64) -> Result<(Box<dyn Fixture>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match block {
        GradBlock::Gap => (
            Box::new(GapFixture {
                x: Tensor::random(vec![4, 4, 3], 1.0, &mut rng)?,
            }),
            1,
        ),
        GradBlock::Pool => (
            Box::new(PoolFixture {
                x: Tensor::random(vec![4, 4, 3], 1.0, &mut rng)?,
                p: PoolingParams::new(3, &mut rng),
            }),
            1,
        ),
        GradBlock::Ua => (
            Box::new(UaFixture {
                x: Tensor::random(vec![4, 4, 3], 1.0, &mut rng)?,
                p: UaParams::randomized(3, 6, &mut rng),
            }),
            1,
        ),
        GradBlock::Dpe => {
            let geometry = PatchGeometry::new(3, 2, 1)?;
            for draw in 1..=MAX_DRAWS {
                let x = Tensor::random(vec![8, 8, 2], 1.0, &mut rng)?;
                let mut p = DpeParams::new(2, 4, geometry, 4.0, &mut rng)?;
                // offsets of a few pixels, some past the +-2 bound
                p.offset = Linear::random(18, 2, true, &mut rng);
                p.offset.w.mapv_inplace(|v| 4.0 * v);
                let (lattice, clamp) = dpe_kink_margin(&x, &p)?;
                if lattice > KINK_MARGIN && clamp > KINK_MARGIN {
                    return Ok((Box::new(DpeFixture { x, p }), draw));
                }
            }
            return Err(Error::Config(format!(
                "no kink-free DPE fixture in {MAX_DRAWS} draws for seed {seed}"
            )));
        }
    })
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

fn run(block: GradBlock, seed: u64, eps: f64, fault: bool) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (fx, draws) = build(block, seed)?;
    let x = fx.input().clone();
    let params = fx.params();
    let (mut dx, dp) = fx.grads()?;
    dx.check_finite("input gradient")?;
    if dp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    if fault {
        let (i, _) =
            dx.data().iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b },
            );
        dx.data_mut()[i] = -dx.data()[i];
    }

    let mut input_error: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + eps;
        let up = fx.loss(&xp, &params)?;
        xp.data_mut()[i] = orig - eps;
        let down = fx.loss(&xp, &params)?;
        xp.data_mut()[i] = orig;
        input_error = input_error.max(rel_error(dx.data()[i], (up - down) / (2.0 * eps)));
    }
    let mut param_error: f64 = 0.0;
    let mut pp = params.clone();
    for i in 0..params.len() {
        let orig = params[i];
        pp[i] = orig + eps;
        let up = fx.loss(&x, &pp)?;
        pp[i] = orig - eps;
        let down = fx.loss(&x, &pp)?;
        pp[i] = orig;
        param_error = param_error.max(rel_error(dp[i], (up - down) / (2.0 * eps)));
    }
    Ok(GradCheckReport {
        block,
        seed,
        eps,
        input_shape: x.shape().to_vec(),
        max_rel_error: input_error.max(param_error),
        input_error,
        param_error,
        checked: x.len() + params.len(),
        draws,
    })
}

/// Gradient check of one block on a seeded fixture (`4x4x3`, or `8x8x2`
/// for DPE).
pub fn grad_check(block: GradBlock, seed: u64, eps: f64) -> Result<GradCheckReport> {
    run(block, seed, eps, false)
}

/// [`grad_check`] with the sign of the largest analytic input-gradient
/// entry flipped, to confirm the harness detects a broken backward pass.
pub fn grad_check_fault_injected(block: GradBlock, seed: u64, eps: f64) -> Result<GradCheckReport> {
    run(block, seed, eps, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_is_exact() {
        let r = grad_check(GradBlock::Gap, 0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn eps_range_enforced() {
        assert!(grad_check(GradBlock::Gap, 0, 1e-2).is_err());
        assert!("conv".parse::<GradBlock>().is_err());
        assert_eq!("ua".parse::<GradBlock>().unwrap(), GradBlock::Ua);
    }

    #[test]
    fn all_blocks_pass_and_faults_are_caught() {
        for block in GradBlock::ALL {
            let r = grad_check(block, 0, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            let f = grad_check_fault_injected(block, 0, 1e-5).unwrap();
            assert!(f.max_rel_error > 1e-2, "{f:?}");
        }
    }
}
