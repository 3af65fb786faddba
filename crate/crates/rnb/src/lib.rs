//! Differentiable region-and-boundary attention guidance at desk scale: a
//! dense scalar-field kernel, a small reverse-mode tape with straight-through
//! masking, the attention-map pipeline, the guidance energies, a synthetic
//! denoiser to drive them, and a reproducible experiment harness.

pub mod attention;
pub mod autodiff;
pub mod energy;
pub mod field;
pub mod harness;
pub mod sim;
