//! Channel-estimation laboratory for 5G-NR-style OFDM links.
//!
//! The crate is organised around the estimation pipeline:
//!
//! * [`grid`] — resource-grid geometry, DMRS masks, pilot sequences, PRG
//!   bundling.
//! * [`chansim`] — fading channel models (TDL / randomized TDL / CDL-like),
//!   spatial correlation, per-PRG precoding, and noisy DMRS observations.
//! * [`baseline`] — classical estimators (LS, OCC-combined LS, genie Wiener
//!   smoothing) and the NMSE metric.
//! * [`nn`] — a small reverse-mode autodiff engine used by the neural
//!   estimator.
//! * [`model`] — the recurrent estimator: CoarseNet, likelihood feedback,
//!   attention encoder, decoder, and the unrolled refinement loop.
//! * [`train`] — loss assembly, data augmentation, online scenario sampling,
//!   and the optimisation loop.
//! * [`experiments`] — NMSE-vs-SNR sweeps, report emission, and the
//!   self-check suite.

pub mod baseline;
pub mod chansim;
pub mod experiments;
pub mod grid;
pub mod model;
pub mod nn;
pub mod train;
pub mod util;

pub use chansim::Observation;
pub use grid::{BundleSize, CarrierConfig, DmrsConfig, DmrsType, GridLayout, PrgConfig, Scs};

/// Complex sample type used throughout the simulation path.
pub type C64 = num_complex::Complex<f64>;
