//! Two-stage detection of clinically significant prostate lesions on
//! synthetic bpMRI-like phantoms.
//!
//! Stage one is an anisotropic 3D U-Net that produces probabilistic (or
//! argmax-derived deterministic) transition-zone / peripheral-zone maps from
//! the T2W-like channel. Stage two is a 2D U-Net slice detector that can
//! consume those maps as extra input channels (early fusion) or concatenated
//! onto the last decoder feature map (late fusion). Per-slice heatmaps are
//! stacked into a volume, lesion candidates are extracted with a
//! two-threshold (hysteresis) method, and detection quality is reported as
//! FROC sensitivity at fixed false-positive rates per patient.
//!
//! Everything runs on CPU, is seeded, and is bitwise reproducible.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod froc;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod volume;
pub mod zonal;

pub use error::{Error, Result};
