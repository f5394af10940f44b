//! Time-resolved boundary measurements of linear transport on the unit
//! disc/ball: forward synthesis (kernel quadrature and Monte Carlo) and
//! reconstruction of the absorption and scattering coefficients from the
//! singular structure of the data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod optics;
pub mod quadrature;
pub mod recon;
pub mod transport;
pub mod verify;
pub mod xray;

pub use error::{Error, Result};
pub use geometry::{BoundaryPoint, Chord, Dim, DirectionQuadrature, Domain, Vec3};
pub use optics::{AngularProfile, OpticalField, PhaseFunction, Phantom, SupportMode};
pub use config::{ExperimentConfig, ForwardMethod};
pub use kernels::{gamma0, gamma1, gamma2, n_kernel, BallisticPulse, Gamma2Quadrature, KernelQuadrature};
pub use recon::{reconstruct_measurements, reconstruct_samples, stability_report, KnownOptics, ReconReport, ReconSettings};
pub use transport::{
    albedo_matrix, albedo_truncated, simulate_albedo_mc, Acquisition, Channel, McConfig, MeasurementSet, Provenance,
    SourcePulse, SynthesisSettings, TimeGrid,
};
pub use verify::{run_verify, VerifyLevel, VerifyOptions, VerifyReport};
pub use xray::{fbp_invert, Image, Sinogram};
