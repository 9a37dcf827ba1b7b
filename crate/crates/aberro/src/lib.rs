//! Optics-to-calibration toolkit for camera-based perception.
//!
//! The crate couples a Fourier-optical degradation model with
//! confidence-calibration machinery:
//!
//! - [`zernike`] — orthonormal Zernike basis, wavefront synthesis, and
//!   coefficient sampling for augmentation.
//! - [`optics`] — PSF/OTF/MTF pipelines, the scalar quality metrics
//!   (MTF at half-Nyquist, Strehl ratio, OIG), and image degradation.
//! - [`calib`] — variation-ratio confidence, reliability bins, ECE/mECE,
//!   AUREC, mIoU, and class-balancing weights.
//! - [`loss`] — the smoothed, C¹-modulated ECE training loss and its
//!   gradient factors, plus focal/KOR loss utilities.
//! - [`calibrators`] — TS, PTS, and PIPTS temperature calibrators, the
//!   per-instance optimal-temperature oracle, and deep-ensemble
//!   significance evaluation.
//! - [`analysis`] — Chatterjee rank correlation, the discrete dependence
//!   oracle, and sensitivity regression with Monte-Carlo bands.
//! - [`io`] — the TNSR tensor container, PGM images, and the synthetic
//!   scene/logit generator.
//!
//! All operations are deterministic given explicit seeds; nothing draws
//! from ambient entropy.

pub mod analysis;
pub mod calib;
pub mod calibrators;
pub mod error;
pub mod io;
pub mod loss;
pub mod net;
pub mod optics;
pub mod zernike;

pub use error::{Error, Result};
