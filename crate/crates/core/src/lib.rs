//! Scan-order locality analysis, trajectory-aware token selection and a
//! spatio-temporal selective-scan pipeline for online video super-resolution.
//!
//! The crate is organised bottom-up:
//!
//! * [`scanorder`] generates Hilbert scan variants, cyclic shifts and
//!   scan-shift-scan compositions.
//! * [`discontinuity`] scores 2×2 regions under a scan order and measures how
//!   much discontinuity a shifted second scan removes.
//! * [`numerics`] is a small dense-tensor substrate (convolution, residual
//!   blocks, layer norm, pixel shuffle, bicubic resize, PSNR/SSIM, file IO).
//! * [`trajectory`] builds token fields, propagates trajectories with motion
//!   fields and selects the most similar previous tokens along them.
//! * [`ssm`] holds the selective-scan kernel with its reverse pass and the
//!   windowed spatio-temporal sequence builder.
//! * [`model`] wires everything into the forward pipeline with its losses and
//!   complexity accounting.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every parallel
//! loop computes each output element with a fixed summation order, so results
//! are bit-identical for any thread count.

pub mod discontinuity;
pub mod error;
pub mod model;
pub mod numerics;
pub mod par;
pub mod scanorder;
pub mod ssm;
pub mod trajectory;

pub use error::{Error, Result};
