//! Non-neural core of an atlas-prior mediastinal lymph node segmentation
//! pipeline.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! - [`volume`]: volume types, NIfTI-1 I/O, cropping, CT normalization, resampling
//! - [`registration`]: mask-driven rigid/affine registration and demons-style
//!   variational registration
//! - [`atlas`]: probabilistic lymph node atlas and carina distance prior
//! - [`losses`]: cross-entropy, soft Dice, Tversky and the atlas-weighted
//!   combined loss with analytic gradients
//! - [`augment`]: GIN / IPA intensity augmentation with Gaussian ramp-up
//! - [`postprocess`]: atlas-adaptive binarization, component filtering,
//!   lung hull masking and ensembling
//! - [`metrics`]: Dice, ASSD, precision/recall and lesion-wise detection
//! - [`ssl`]: entropy maps, reliability masks, EMA and pseudo-labels

pub mod atlas;
pub mod augment;
pub mod error;
pub mod filters;
pub mod losses;
pub mod metrics;
pub mod postprocess;
pub mod registration;
pub mod ssl;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelVolume, ScalarVolume, Volume, VolumeGeometry};
