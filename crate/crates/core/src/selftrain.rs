//! Mean-teacher self-training arithmetic: pseudo-labels, the confidence
//! weight, the weighted target cross-entropy and the EMA teacher update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{SemanticMap, IGNORE_LABEL};

/// Tolerance on the per-pixel channel sum for in-memory tensors.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Per-pixel class probabilities, stored row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTensor {
    height: u32,
    width: u32,
    channels: u32,
    values: Vec<f32>,
}

impl ProbTensor {
    pub fn new(height: u32, width: u32, channels: u32, values: Vec<f32>) -> Result<Self> {
        Self::with_tolerance(height, width, channels, values, NORMALIZATION_TOL)
    }

    /// Like [`ProbTensor::new`] with an explicit channel-sum tolerance.
    pub fn with_tolerance(height: u32, width: u32, channels: u32, values: Vec<f32>, tol: f64) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || channels > IGNORE_LABEL as u32 {
            return Err(Error::Shape(format!("probability tensor {height}x{width}x{channels}")));
        }
        let expected = height as usize * width as usize * channels as usize;
        if values.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: values.len(),
            });
        }
        for (i, px) in values.chunks_exact(channels as usize).enumerate() {
            if px.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite(format!(
                    "pixel {i} has a negative or non-finite probability"
                )));
            }
            let sum: f64 = px.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::NotNormalized {
                    row: i / width as usize,
                    col: i % width as usize,
                    sum,
                });
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
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

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, row: u32, col: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (row as usize * self.width as usize + col as usize) * c;
        &self.values[i..i + c]
    }

    fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.channels as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub tau: f64,
    pub eta: f64,
    /// Rows ignored at the top of each training crop.
    pub ignore_above: u32,
    /// Rows ignored at the bottom of each training crop.
    pub ignore_below: u32,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.968,
            eta: 0.999,
            ignore_above: 11,
            ignore_below: 88,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("tau", self.tau)?;
        check_unit("eta", self.eta)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} outside (0, 1)")))
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn pseudo_label(probs: &ProbTensor) -> SemanticMap {
    let labels = probs
        .pixels()
        .map(|px| {
            let mut best = 0;
            for (c, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    SemanticMap::new(probs.height, probs.width, probs.channels, labels)
        .expect("argmax labels are below the channel count")
}

/// Fraction of pixels whose top probability strictly exceeds `tau`.
pub fn confidence_weight(probs: &ProbTensor, tau: f64) -> Result<f64> {
    check_unit("tau", tau)?;
    let n = probs.values.len() / probs.channels as usize;
    let confident = probs
        .pixels()
        .filter(|px| px.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64 > tau)
        .count();
    Ok(confident as f64 / n as f64)
}

/// Ignore mask (row-major) covering the top and bottom crop margins.
pub fn margin_ignore(height: u32, width: u32, cfg: &SelfTrainConfig) -> Vec<bool> {
    let mut out = vec![false; height as usize * width as usize];
    for r in 0..height {
        if r < cfg.ignore_above || r + cfg.ignore_below >= height {
            let s = r as usize * width as usize;
            out[s..s + width as usize].fill(true);
        }
    }
    out
}

/// `omega` times the mean of `-ln p` at the pseudo-label class over pixels
/// that are neither in `ignore` nor labeled 255. Zero when no pixel counts.
pub fn target_loss(student: &ProbTensor, pseudo: &SemanticMap, omega: f64, ignore: Option<&[bool]>) -> Result<f64> {
    pseudo.check_dims(student.dims())?;
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("omega = {omega} outside [0, 1]")));
    }
    if let Some(m) = ignore {
        if m.len() != pseudo.labels().len() {
            return Err(Error::Shape(format!(
                "ignore mask has {} entries for {} pixels",
                m.len(),
                pseudo.labels().len()
            )));
        }
    }
    if omega == 0.0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut n = 0u64;
    for (i, (px, &label)) in student.pixels().zip(pseudo.labels()).enumerate() {
        if label == IGNORE_LABEL || ignore.is_some_and(|m| m[i]) {
            continue;
        }
        let p = *px.get(label as usize).ok_or(Error::UnknownClass(label as u32))? as f64;
        sum -= p.ln();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { omega * sum / n as f64 })
}

/// `eta * teacher + (1 - eta) * student`, elementwise.
pub fn ema_update(teacher: &[f64], student: &[f64], eta: f64) -> Result<Vec<f64>> {
    let mut out = teacher.to_vec();
    ema_update_in_place(&mut out, student, eta)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut [f64], student: &[f64], eta: f64) -> Result<()> {
    check_unit("eta", eta)?;
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = eta * *t + (1.0 - eta) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_class(maxes: &[f32]) -> ProbTensor {
        let v = maxes.iter().flat_map(|&m| [m, 1.0 - m]).collect();
        ProbTensor::new(1, maxes.len() as u32, 2, v).unwrap()
    }

    #[test]
    fn argmax_and_ties() {
        let p = ProbTensor::new(1, 2, 3, vec![0.2, 0.5, 0.3, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_eq!(pseudo_label(&p).labels(), &[1, 0]);
    }

    #[test]
    fn four_pixel_weight() {
        let p = two_class(&[0.99, 0.97, 0.5, 0.8]);
        assert_eq!(confidence_weight(&p, 0.968).unwrap(), 0.5);
        let u = ProbTensor::new(1, 1, 19, vec![1.0 / 19.0; 19]).unwrap();
        assert_eq!(confidence_weight(&u, 0.968).unwrap(), 0.0);
    }

    #[test]
    fn loss_closed_forms() {
        let p = two_class(&[0.5]);
        let y = SemanticMap::new(1, 1, 2, vec![0]).unwrap();
        assert!((target_loss(&p, &y, 1.0, None).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(target_loss(&p, &y, 0.0, None).unwrap(), 0.0);
        let ign = SemanticMap::new(1, 1, 2, vec![255]).unwrap();
        assert_eq!(target_loss(&p, &ign, 1.0, None).unwrap(), 0.0);
        let sure = two_class(&[1.0, 1.0]);
        assert_eq!(target_loss(&sure, &pseudo_label(&sure), 1.0, None).unwrap(), 0.0);
    }

    #[test]
    fn margins() {
        let cfg = SelfTrainConfig::default();
        let m = margin_ignore(200, 1, &cfg);
        assert_eq!(m.iter().filter(|&&x| x).count(), 99);
        assert!(m[10] && !m[11] && !m[111] && m[112]);
    }

    #[test]
    fn normalization_enforced() {
        assert!(matches!(
            ProbTensor::new(1, 1, 2, vec![0.7, 0.7]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn ema_basics() {
        assert!((ema_update(&[0.0], &[1.0], 0.999).unwrap()[0] - 0.001).abs() < 1e-15);
        assert_eq!(ema_update(&[0.3], &[0.3], 0.999).unwrap(), vec![0.3]);
        assert!(ema_update(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn weight_monotone_in_tau(maxes in prop::collection::vec(0.5f32..=1.0, 1..20), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let p = two_class(&maxes);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(confidence_weight(&p, lo).unwrap() >= confidence_weight(&p, hi).unwrap());
        }

        #[test]
        fn argmax_invariant_to_scaling(steps in prop::collection::vec(0u8..=64, 1..20), k in prop::sample::select(vec![0.25f32, 0.5, 0.75])) {
            let maxes: Vec<f32> = steps.iter().map(|&i| i as f32 / 64.0).collect();
            let p = two_class(&maxes);
            // dyadic values keep the blend exact, so no spurious ties
            let q = ProbTensor::new(1, maxes.len() as u32, 2, p.values().iter().map(|v| k * v + (1.0 - k) * 0.5).collect()).unwrap();
            for (a, b) in pseudo_label(&p).labels().iter().zip(pseudo_label(&q).labels()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
