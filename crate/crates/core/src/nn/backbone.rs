//! Four-stage toy backbone: each stage embeds its input into patches
//! (plain or deformable) and applies a stack of UA blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::dpe::{dpe_embed, patch_embed, DpeParams, PatchGeometry};
use crate::nn::layers::{Linear, Params};
use crate::nn::tensor::Tensor;
use crate::nn::ua::{ua_block, UaParams};

pub const NUM_STAGES: usize = 4;

/// Default placement of deformable embeddings (1-based stage numbers).
pub const DEFAULT_DPE_STAGES: [usize; 2] = [2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedKind {
    Plain,
    Deformable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub embed: EmbedKind,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub geometry: PatchGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_dim: usize,
    /// Offset limit divisor for deformable stages.
    pub r: f64,
    pub stages: Vec<StageConfig>,
}

/// Parses a stage list such as `"2,4"`; `""` or `"none"` means no DPE.
pub fn parse_dpe_stages(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let n: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad stage number {part:?}")))?;
        if !(1..=NUM_STAGES).contains(&n) {
            return Err(Error::Config(format!("stage {n} outside 1..={NUM_STAGES}")));
        }
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

impl BackboneConfig {
    /// Stride-2 `3x3` embeddings with widths 8, 16, 24, 32 and one UA block
    /// per stage; deformable embeddings at `dpe_stages`.
    pub fn toy(in_dim: usize, dpe_stages: &[usize]) -> Result<Self> {
        let geometry = PatchGeometry::new(3, 2, 1)?;
        let stages = (1..=NUM_STAGES)
            .map(|i| StageConfig {
                embed: if dpe_stages.contains(&i) {
                    EmbedKind::Deformable
                } else {
                    EmbedKind::Plain
                },
                dim: 8 * i,
                depth: 1,
                mlp_ratio: 2,
                geometry,
            })
            .collect();
        Ok(Self { in_dim, r: 4.0, stages })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "expected {NUM_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        if self.in_dim == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.mlp_ratio == 0 {
                return Err(Error::Config(format!("stage {} has zero width", i + 1)));
            }
        }
        Ok(())
    }

    pub fn dpe_stages(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.embed == EmbedKind::Deformable)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageEmbed {
    Plain { proj: Linear, geometry: PatchGeometry },
    Deformable(DpeParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub embed: StageEmbed,
    pub blocks: Vec<UaParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut in_dim = cfg.in_dim;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in &cfg.stages {
            let fan_in = s.geometry.kernel * s.geometry.kernel * in_dim;
            let embed = match s.embed {
                EmbedKind::Plain => StageEmbed::Plain {
                    proj: Linear::random(fan_in, s.dim, true, rng),
                    geometry: s.geometry,
                },
                EmbedKind::Deformable => StageEmbed::Deformable(DpeParams::new(in_dim, s.dim, s.geometry, cfg.r, rng)?),
            };
            let blocks = (0..s.depth)
                .map(|_| UaParams::new(s.dim, s.dim * s.mlp_ratio, rng))
                .collect();
            stages.push(Stage { embed, blocks });
            in_dim = s.dim;
        }
        Ok(Self { stages })
    }

    /// Feature map after every stage, each `H_i x W_i x C_i`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            let (h, w, _) = cur.hwc()?;
            let (tokens, geometry) = match &stage.embed {
                StageEmbed::Plain { proj, geometry } => (patch_embed(&cur, proj, geometry)?, *geometry),
                StageEmbed::Deformable(p) => (dpe_embed(&cur, p)?, p.geometry),
            };
            let (gh, gw) = geometry.grid(h, w)?;
            let dim = tokens.shape()[1];
            let mut y = tokens.reshape(vec![gh, gw, dim])?;
            for block in &stage.blocks {
                y = ua_block(&y, block)?;
            }
            feats.push(y.clone());
            cur = y;
        }
        Ok(feats)
    }

    pub fn num_params(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                let e = match &s.embed {
                    StageEmbed::Plain { proj, .. } => proj.num_params(),
                    StageEmbed::Deformable(p) => p.num_params(),
                };
                e + s.blocks.iter().map(|b| b.num_params()).sum::<usize>()
            })
            .sum()
    }
}
