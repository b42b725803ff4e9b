//! Occlusion-aware panoramic segmentation toolkit.
//!
//! * [`metrics`]: mIoU, mAP, mAAP, mPQ and mAPQ over image bundles.
//! * [`fusion`]: semantic and instance branches to panoptic and amodal
//!   panoptic outputs.
//! * [`aomix`]: amodal-oriented mixing augmentation.
//! * [`selftrain`]: pseudo-labels, confidence weight, target loss, EMA.
//! * [`nn`]: unmasking attention, deformable patch embedding and a
//!   finite-difference gradient checker.
//! * [`io`], [`render`], [`synth`]: file formats, color maps and certified
//!   synthetic scenes.
//!
//! ```
//! use oass::labels::Taxonomy;
//! use oass::metrics::evaluate_oass;
//! use oass::synth::{synth_scene, SynthSpec};
//!
//! let tax = Taxonomy::oass18();
//! let scene = synth_scene(&SynthSpec { perturbation: 0, ..Default::default() }, 0, &tax).unwrap();
//! let report = evaluate_oass(&[("a".into(), scene.pred)], &[("a".into(), scene.gt)]).unwrap();
//! assert_eq!(report.mpq, 1.0);
//! ```

pub mod aomix;
pub mod error;
pub mod fusion;
pub mod io;
pub mod labels;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod selftrain;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/aomix.md")]
    mod aomix {}
    #[doc = include_str!("../../../book/src/selftrain.md")]
    mod selftrain {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
