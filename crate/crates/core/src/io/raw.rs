//! Little-endian binary tensors.
//!
//! Probabilities: `"OASSPROB"`, `u32` H, W, C, then `H*W*C` `f32` in
//! (row, col, channel) order. Parameters: `"OASSTENS"`, `u32` rank, `u32`
//! dims, then `f64` values row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::io_err;
use crate::nn::Tensor;
use crate::selftrain::ProbTensor;

pub const PROB_MAGIC: &[u8; 8] = b"OASSPROB";
pub const TENSOR_MAGIC: &[u8; 8] = b"OASSTENS";
/// Channel-sum tolerance applied when reading probability files.
pub const PROB_FILE_TOL: f64 = 1e-4;

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated {
                expected: self.at + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Shape(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn check_magic(bytes: &[u8], magic: &'static [u8; 8], name: &'static str) -> Result<()> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic(name));
    }
    Ok(())
}

pub fn probs_from_bytes(bytes: &[u8]) -> Result<ProbTensor> {
    check_magic(bytes, PROB_MAGIC, "OASSPROB")?;
    let mut c = Cursor { bytes, at: 8 };
    let (h, w, ch) = (c.u32()?, c.u32()?, c.u32()?);
    let n = h as usize * w as usize * ch as usize;
    let payload = c.take(
        n.checked_mul(4)
            .ok_or_else(|| Error::Shape("tensor too large".into()))?,
    )?;
    c.finish()?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    ProbTensor::with_tolerance(h, w, ch, values, PROB_FILE_TOL)
}

pub fn probs_to_bytes(p: &ProbTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + p.values().len() * 4);
    out.extend_from_slice(PROB_MAGIC);
    for d in [p.height(), p.width(), p.channels()] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_probs(path: &Path) -> Result<ProbTensor> {
    probs_from_bytes(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn save_probs(path: &Path, p: &ProbTensor) -> Result<()> {
    fs::write(path, probs_to_bytes(p)).map_err(|e| io_err(path, e))
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, TENSOR_MAGIC, "OASSTENS")?;
    let mut c = Cursor { bytes, at: 8 };
    let rank = c.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Shape(format!("tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Shape("tensor too large".into()))?;
    let payload = c.take(n)?;
    c.finish()?;
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let t = Tensor::new(shape, data)?;
    t.check_finite("tensor file")?;
    Ok(t)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(vals: &[f32]) -> Vec<u8> {
        let mut b = PROB_MAGIC.to_vec();
        for d in [1u32, 1, vals.len() as u32] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn loads_half_half() {
        let p = probs_from_bytes(&probs(&[0.5, 0.5])).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
        assert_eq!(probs_to_bytes(&p), probs(&[0.5, 0.5]));
    }

    #[test]
    fn distinct_errors() {
        let mut bad = probs(&[0.5, 0.5]);
        bad[0] = b'X';
        assert!(matches!(probs_from_bytes(&bad), Err(Error::BadMagic(_))));
        let good = probs(&[0.5, 0.5]);
        assert!(matches!(
            probs_from_bytes(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            probs_from_bytes(&probs(&[0.7, 0.7])),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn file_tolerance_is_looser() {
        assert!(probs_from_bytes(&probs(&[0.50004, 0.5])).is_ok());
        assert!(probs_from_bytes(&probs(&[0.5002, 0.5])).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0]).unwrap();
        assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap(), t);
        let b = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&b[..b.len() - 3]).is_err());
    }
}
