//! Double-scatter density gamma2 (n = 2).
//!
//! The first scatter point z = x' + y runs over the ellipse
//! |y| + |x - x' - y| = s < tau in confocal coordinates (s, phi); the map
//! s = t0 + (tau - t0)(1 - cos beta) / 2 absorbs both square-root endpoint
//! singularities. The second scatter is the single-scatter integral from z to
//! x with the remaining path length tau - |y|.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot90, BoundaryPoint, Dim, Vec3};
use crate::optics::OpticalField;
use crate::quadrature::gauss_legendre;

use super::single::ScatterPath;
use super::KernelEval;

/// Fixed product rule for gamma2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gamma2Quadrature {
    pub n_beta: usize,
    pub n_phi: usize,
    pub n_theta: usize,
    pub scan: usize,
}

impl Default for Gamma2Quadrature {
    fn default() -> Self {
        Gamma2Quadrature { n_beta: 24, n_phi: 48, n_theta: 16, scan: 16 }
    }
}

impl Gamma2Quadrature {
    pub fn coarse() -> Self {
        Gamma2Quadrature { n_beta: 10, n_phi: 20, n_theta: 8, scan: 8 }
    }

    /// Every order doubled, used for the residual estimate.
    pub fn refined(&self) -> Self {
        Gamma2Quadrature {
            n_beta: 2 * self.n_beta,
            n_phi: 2 * self.n_phi,
            n_theta: 2 * self.n_theta,
            scan: 2 * self.scan,
        }
    }
}

/// Double-scatter density at path length tau (n = 2 only; zero for tau <= t0).
pub fn gamma2(
    field: &OpticalField,
    tau: f64,
    source: &BoundaryPoint,
    detector: &BoundaryPoint,
    quad: &Gamma2Quadrature,
) -> Result<KernelEval> {
    if field.dim != Dim::Two {
        return Err(Error::Unsupported("gamma2 quadrature", field.dim.n()));
    }
    if source.position == detector.position {
        return Err(Error::CoincidentPoints);
    }
    let value = gamma2_points(field, tau, &source.position, &detector.position, quad);
    Ok(KernelEval { value, error: f64::NAN, converged: true })
}

/// gamma2 together with the difference to the refined rule as residual.
pub fn gamma2_with_residual(
    field: &OpticalField,
    tau: f64,
    source: &BoundaryPoint,
    detector: &BoundaryPoint,
    quad: &Gamma2Quadrature,
) -> Result<KernelEval> {
    let coarse = gamma2(field, tau, source, detector, quad)?;
    let fine = gamma2(field, tau, source, detector, &quad.refined())?;
    Ok(KernelEval { value: fine.value, error: (fine.value - coarse.value).abs(), converged: true })
}

pub(crate) fn gamma2_points(field: &OpticalField, tau: f64, xs: &Vec3, xd: &Vec3, q: &Gamma2Quadrature) -> f64 {
    let d = xd - xs;
    let t0 = d.norm();
    if tau <= t0 || !field.scatters() {
        return 0.0;
    }
    let v0 = d / t0;
    let perp = rot90(&v0);
    let r = field.scattering_radius();
    let r2 = r * r;
    let absorbing = !field.sigma.is_zero();
    let beta_rule = gauss_legendre(q.n_beta);
    let dphi = 2.0 * PI / q.n_phi as f64;
    let mut total = 0.0;
    for (beta, wb) in beta_rule.on_interval(0.0, PI) {
        let s = t0 + 0.5 * (tau - t0) * (1.0 - beta.cos());
        let minor = (s * s - t0 * t0).max(0.0).sqrt();
        let mut ring = 0.0;
        for j in 0..q.n_phi {
            let phi = (j as f64 + 0.5) * dphi;
            let (c, sn) = (phi.cos(), phi.sin());
            let y = v0 * (0.5 * (t0 + s * c)) + perp * (0.5 * minor * sn);
            let z = xs + y;
            if z.norm_squared() >= r2 {
                continue;
            }
            let k0z = field.k0_at(&z);
            if k0z == 0.0 {
                continue;
            }
            let ylen = 0.5 * (s + t0 * c);
            if ylen <= 0.0 {
                continue;
            }
            let v1 = y / ylen;
            let mut a = field.source.eval(xs, &v1) * xs.dot(&v1).abs();
            if absorbing {
                a *= (-field.sigma.line_integral(xs, &z)).exp();
            }
            if a == 0.0 {
                continue;
            }
            let path = match ScatterPath::new(field, *xd, z, tau - ylen) {
                Some(p) => p,
                None => continue,
            };
            let src = |vp: &Vec3| k0z * field.g(&v1, vp);
            let inner = path.planar_fixed(&src, q.n_theta, q.scan);
            let weight = (s - t0 * c) / (2.0 * (s + t0).sqrt() * (tau - t0 * c).sqrt());
            ring += weight * a * inner;
        }
        total += wb * ring * dphi;
    }
    total
}
