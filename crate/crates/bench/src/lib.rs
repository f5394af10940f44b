//! Fixtures shared by the benches.

use avtomo_core::geometry::{Dim, Vec3};
use avtomo_core::optics::{OpticalField, Phantom, SupportMode};

/// Planar field with smooth sigma and k0 bumps, H2 with margin 0.2.
pub fn planar_field() -> OpticalField {
    OpticalField::vacuum(Dim::Two)
        .with_sigma(Phantom::bump(Vec3::zeros(), 0.6, 1.0))
        .with_k0(Phantom::bump(Vec3::new(0.1, -0.05, 0.0), 0.55, 0.4))
        .with_support(SupportMode::H2 { delta: 0.2 })
}

/// Spatial field with a constant k0 (H1).
pub fn spatial_field() -> OpticalField {
    OpticalField::vacuum(Dim::Three).with_sigma(Phantom::constant(0.3)).with_k0(Phantom::constant(0.5))
}
