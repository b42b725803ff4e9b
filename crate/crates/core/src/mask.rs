//! Run-length encoded binary masks.
//!
//! Runs alternate background and foreground counts in column-major pixel
//! order, always starting with a (possibly zero) background count. This is
//! the uncompressed COCO convention, so masks can be exchanged with COCO
//! tooling without conversion. Dense grids handed to and returned from this
//! module are row-major, matching image buffers.

use crate::error::{dims_mismatch, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
}

/// Alias used where the serialized form is the point of interest.
pub type RleMask = BinaryMask;

impl BinaryMask {
    pub fn empty(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            runs: vec![height * width],
        }
    }

    pub fn full(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            runs: vec![0, height * width],
        }
    }

    /// Builds a mask from raw runs, validating the pixel count and folding
    /// zero-length interior runs into canonical form.
    pub fn from_runs(height: u32, width: u32, runs: Vec<u32>) -> Result<Self> {
        let expected = height as u64 * width as u64;
        let actual: u64 = runs.iter().map(|&r| r as u64).sum();
        if actual != expected {
            return Err(Error::RunSumMismatch { expected, actual });
        }
        Ok(Self {
            height,
            width,
            runs: canonicalize(&runs),
        })
    }

    /// Encodes a row-major grid where any nonzero value is foreground.
    pub fn encode(height: u32, width: u32, dense: &[u8]) -> Result<Self> {
        if dense.len() != height as usize * width as usize {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels", height as usize * width as usize),
                actual: format!("{} pixels", dense.len()),
            });
        }
        let w = width as usize;
        Ok(Self::from_fn(height, width, |r, c| {
            dense[r as usize * w + c as usize] != 0
        }))
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for c in 0..width {
            for r in 0..height {
                let v = f(r, c);
                if v != current {
                    runs.push(count);
                    count = 0;
                    current = v;
                }
                count += 1;
            }
        }
        runs.push(count);
        Self { height, width, runs }
    }

    /// Row-major 0/1 grid.
    pub fn decode(&self) -> Vec<u8> {
        let mut dense = vec![0u8; self.len()];
        let w = self.width as usize;
        let h = self.height as usize;
        for (start, len) in self.fg_runs() {
            for idx in start..start + len {
                dense[(idx % h) * w + idx / h] = 1;
            }
        }
        dense
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    fn len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    /// Foreground runs as `(start, len)` in column-major linear indices.
    pub fn fg_runs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut offset = 0usize;
        self.runs.iter().enumerate().filter_map(move |(i, &n)| {
            let start = offset;
            offset += n as usize;
            (i % 2 == 1 && n > 0).then_some((start, n as usize))
        })
    }

    /// Calls `f(row, col)` for every foreground pixel, column by column.
    pub fn for_each_pixel(&self, mut f: impl FnMut(u32, u32)) {
        let h = self.height as usize;
        for (start, len) in self.fg_runs() {
            for idx in start..start + len {
                f((idx % h) as u32, (idx / h) as u32);
            }
        }
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        let target = col as u64 * self.height as u64 + row as u64;
        let mut offset = 0u64;
        for (i, &n) in self.runs.iter().enumerate() {
            offset += n as u64;
            if target < offset {
                return i % 2 == 1;
            }
        }
        false
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&n| n as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Tight bounding box as `(row0, col0, row1, col1)`, inclusive.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let h = self.height as usize;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (start, len) in self.fg_runs() {
            let end = start + len - 1;
            let (c0, c1) = (start / h, end / h);
            let (r0, r1) = if c0 == c1 { (start % h, end % h) } else { (0, h - 1) };
            bounds = Some(match bounds {
                None => (r0, c0, r1, c1),
                Some((a, b, c, d)) => (a.min(r0), b.min(c0), c.max(r1), d.max(c1)),
            });
        }
        bounds.map(|(a, b, c, d)| (a as u32, b as u32, c as u32, d as u32))
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64> {
        self.check_dims(other)?;
        let mut total = 0u64;
        walk(self, other, |a, b, n| {
            if a && b {
                total += n as u64;
            }
        });
        Ok(total)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a && b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a && !b)
    }

    /// True when every foreground pixel of `other` is also set in `self`.
    pub fn contains(&self, other: &Self) -> Result<bool> {
        self.check_dims(other)?;
        let mut ok = true;
        walk(self, other, |a, b, _| {
            if b && !a {
                ok = false;
            }
        });
        Ok(ok)
    }

    pub fn union_all<'a>(height: u32, width: u32, masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<Self> {
        masks
            .into_iter()
            .try_fold(Self::empty(height, width), |acc, m| acc.union(m))
    }

    fn combine(&self, other: &Self, op: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_dims(other)?;
        let mut runs = Vec::with_capacity(self.runs.len() + other.runs.len());
        let mut current = false;
        let mut count = 0u32;
        walk(self, other, |a, b, n| {
            let v = op(a, b);
            if v != current {
                runs.push(count);
                count = 0;
                current = v;
            }
            count += n;
        });
        runs.push(count);
        Ok(Self {
            height: self.height,
            width: self.width,
            runs,
        })
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dims_mismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the canonical runs, used for
    /// deterministic tie-breaking.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u32| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.height);
        feed(self.width);
        for &r in &self.runs {
            feed(r);
        }
        h
    }
}

/// Walks two equal-sized masks in lockstep, calling `f(a, b, len)` for each
/// maximal span where both values are constant.
fn walk(a: &BinaryMask, b: &BinaryMask, mut f: impl FnMut(bool, bool, u32)) {
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut la, mut lb) = (a.runs[0], b.runs[0]);
    loop {
        while la == 0 {
            ia += 1;
            if ia >= a.runs.len() {
                return;
            }
            la = a.runs[ia];
        }
        while lb == 0 {
            ib += 1;
            if ib >= b.runs.len() {
                return;
            }
            lb = b.runs[ib];
        }
        let step = la.min(lb);
        f(ia % 2 == 1, ib % 2 == 1, step);
        la -= step;
        lb -= step;
    }
}

fn canonicalize(runs: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(runs.len());
    let mut current = false;
    let mut count = 0u32;
    for (i, &n) in runs.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let v = i % 2 == 1;
        if v != current {
            out.push(count);
            count = 0;
            current = v;
        }
        count += n;
    }
    out.push(count);
    out
}

/// Column-major RLE of a row-major 0/1 grid.
pub fn rle_encode(height: u32, width: u32, dense: &[u8]) -> Result<RleMask> {
    BinaryMask::encode(height, width, dense)
}

/// Inverse of [`rle_encode`]; rejects runs that do not cover the grid exactly.
pub fn rle_decode(height: u32, width: u32, runs: &[u32]) -> Result<Vec<u8>> {
    Ok(BinaryMask::from_runs(height, width, runs.to_vec())?.decode())
}

/// `|a ∩ b| / |a ∪ b|`, defined as 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}
