//! Kernels of the averaged albedo operator: the ballistic pulse gamma0, the
//! single- and double-scatter densities gamma1, gamma2, the auxiliary kernel
//! N, and their behavior as tau -> t0+.

mod double;
mod limits;
mod single;

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormal_frame, BoundaryPoint, Chord, Dim, Vec3};
use crate::optics::OpticalField;
use crate::quadrature::{integrate, Integral, Tolerance};

pub use double::{gamma2, gamma2_with_residual, Gamma2Quadrature};
pub use limits::{
    gamma1_limit_prediction, weighted_bound_scan, LimitPrediction, ScanEntry, ScanGrid, ScanReport, Singularity,
};

/// Delta component of the kernel: amplitude * delta(tau - arrival_time).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallisticPulse {
    pub arrival_time: f64,
    pub amplitude: f64,
}

/// Tolerances of the adaptive kernel quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelQuadrature {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Scan resolution used to locate the admissible direction set.
    pub scan: usize,
}

impl Default for KernelQuadrature {
    fn default() -> Self {
        KernelQuadrature { rel_tol: 1e-8, abs_tol: 1e-13, max_subdivisions: 300, scan: 24 }
    }
}

impl KernelQuadrature {
    /// Looser settings for large sweeps.
    pub fn fast() -> Self {
        KernelQuadrature { rel_tol: 1e-6, abs_tol: 1e-11, max_subdivisions: 100, scan: 16 }
    }

    pub(crate) fn tolerance(&self) -> Tolerance {
        Tolerance::new(self.abs_tol, self.rel_tol).with_budget(self.max_subdivisions)
    }

    pub(crate) fn inner_tolerance(&self) -> Tolerance {
        Tolerance::new(self.abs_tol * 0.1, self.rel_tol * 0.1).with_budget(self.max_subdivisions)
    }
}

/// Quadrature value with its error estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEval {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

impl KernelEval {
    pub fn zero() -> Self {
        KernelEval { value: 0.0, error: 0.0, converged: true }
    }

    pub(crate) fn add(&mut self, r: Integral) {
        self.value += r.value;
        self.error += r.error;
        self.converged &= r.converged;
    }
}

/// Ballistic pulse for source x' and detector x.
pub fn gamma0(field: &OpticalField, source: &BoundaryPoint, detector: &BoundaryPoint) -> Result<BallisticPulse> {
    let chord = Chord::from_endpoints(source, detector)?;
    Ok(gamma0_chord(field, &chord))
}

pub(crate) fn gamma0_chord(field: &OpticalField, chord: &Chord) -> BallisticPulse {
    let geom = ballistic_geometry(field, chord);
    let e = if field.sigma.is_zero() { 1.0 } else { (-field.sigma.line_integral(&chord.source, &chord.detector)).exp() };
    BallisticPulse { arrival_time: chord.length, amplitude: e * geom }
}

/// W S (nu . v0) |nu' . v0| / t0^{n-1}: the ballistic amplitude without E.
pub fn ballistic_geometry(field: &OpticalField, chord: &Chord) -> f64 {
    let v0 = chord.direction;
    let w = field.detector.eval(&chord.detector, &v0);
    let s = field.source.eval(&chord.source, &v0);
    let n1 = (field.dim.n() - 1) as i32;
    w * s * chord.exit_cosine() * chord.entry_cosine() / chord.length.powi(n1)
}

/// Single-scatter density at path length tau (zero for tau <= t0).
pub fn gamma1(
    field: &OpticalField,
    tau: f64,
    source: &BoundaryPoint,
    detector: &BoundaryPoint,
    quad: &KernelQuadrature,
) -> Result<KernelEval> {
    if source.position == detector.position {
        return Err(Error::CoincidentPoints);
    }
    Ok(single::gamma1_points(field, tau, &source.position, &detector.position, quad))
}

/// Evaluation mode of the auxiliary kernel N.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NKernelMode {
    ClosedForm,
    Quadrature,
}

/// N(tau, x, x') = int over S^{n-1} of (tau - (x-x').v)^{n-3} / |x-x'-tau v|^{2n-4}.
pub fn n_kernel(dim: Dim, tau: f64, x: &Vec3, x_prime: &Vec3, mode: NKernelMode) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be positive")));
    }
    let t0 = (x - x_prime).norm();
    if tau <= t0 {
        return Ok(0.0);
    }
    Ok(match mode {
        NKernelMode::ClosedForm => match dim {
            Dim::Two => 2.0 * PI / (tau * tau - t0 * t0).sqrt(),
            Dim::Three => 2.0 * PI / (tau * t0) * ((tau + t0) / (tau - t0)).ln(),
        },
        NKernelMode::Quadrature => {
            let tol = Tolerance::new(1e-15, 1e-12).with_budget(2000);
            match dim {
                // Angle measured from (x - x') / t0; both half circles are equal.
                Dim::Two => 2.0 * integrate(|om| 1.0 / (tau - t0 * om.cos()), 0.0, PI, tol).value,
                // Azimuthal symmetry about x - x'; u = cos of the polar angle.
                Dim::Three => {
                    2.0 * PI * integrate(|u| 1.0 / (t0 * t0 + tau * tau - 2.0 * t0 * tau * u), -1.0, 1.0, tol).value
                }
            }
        }
    })
}

/// Which term a kernel sample holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelTerm {
    Gamma1,
    Gamma2,
    N,
}

impl KernelTerm {
    pub fn label(self) -> &'static str {
        match self {
            KernelTerm::Gamma1 => "gamma1",
            KernelTerm::Gamma2 => "gamma2",
            KernelTerm::N => "N",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub tau: f64,
    pub chord: Chord,
    pub value: f64,
    pub term: KernelTerm,
}

/// Writes kernel samples as CSV: tau, t0, q, angle_src, angle_det, term, value.
pub fn write_kernel_sweep_csv<W: Write>(samples: &[KernelSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "t0", "q", "angle_src", "angle_det", "term", "value"])?;
    for s in samples {
        let a_src = BoundaryPoint { position: s.chord.source }.angle();
        let a_det = BoundaryPoint { position: s.chord.detector }.angle();
        w.write_record([
            format!("{:.17e}", s.tau),
            format!("{:.17e}", s.chord.length),
            format!("{:.17e}", s.chord.q),
            format!("{:.17e}", a_src),
            format!("{:.17e}", a_det),
            s.term.label().to_string(),
            format!("{:.17e}", s.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// E_{1,n}(mu, z, z') = { y : |y| + |z - z' - y| < mu }.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidDomain {
    pub mu: f64,
    pub z: Vec3,
    pub z_prime: Vec3,
}

impl EllipsoidDomain {
    pub fn new(mu: f64, z: Vec3, z_prime: Vec3) -> Self {
        EllipsoidDomain { mu, z, z_prime }
    }

    fn focal_distance(&self) -> f64 {
        (self.z - self.z_prime).norm()
    }

    pub fn is_empty(&self) -> bool {
        self.mu <= self.focal_distance()
    }

    pub fn contains(&self, y: &Vec3) -> bool {
        y.norm() + (self.z - self.z_prime - y).norm() < self.mu
    }

    /// Exact volume (ellipse area for n = 2, prolate spheroid for n = 3).
    pub fn volume(&self, dim: Dim) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let a = 0.5 * self.mu;
        let b = 0.5 * (self.mu * self.mu - self.focal_distance().powi(2)).sqrt();
        match dim {
            Dim::Two => PI * a * b,
            Dim::Three => 4.0 / 3.0 * PI * a * b * b,
        }
    }

    /// Vol_{n-2}(S^{n-2}) pi (mu + t0) / 4 (sqrt(mu^2 - t0^2) / 2)^{n-1}.
    pub fn volume_bound(&self, dim: Dim) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let t0 = self.focal_distance();
        let b = 0.5 * (self.mu * self.mu - t0 * t0).sqrt();
        dim.equator_measure() * PI * (self.mu + t0) / 4.0 * b.powi(dim.n() as i32 - 1)
    }

    /// Hit-or-miss volume estimate in the bounding box of the ellipsoid:
    /// (estimate, standard error).
    pub fn mc_volume(&self, dim: Dim, samples: usize, seed: u64) -> (f64, f64) {
        if self.is_empty() || samples == 0 {
            return (0.0, 0.0);
        }
        let d = self.z - self.z_prime;
        let t0 = d.norm();
        let axis = if t0 > 0.0 { d / t0 } else { Vec3::x() };
        let center = 0.5 * d;
        let a = 0.5 * self.mu;
        let b = 0.5 * (self.mu * self.mu - t0 * t0).sqrt();
        let (e1, e2) = match dim {
            Dim::Two => (crate::geometry::rot90(&axis), Vec3::zeros()),
            Dim::Three => orthonormal_frame(&axis),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        for _ in 0..samples {
            let mut y = center + axis * (a * (2.0 * rng.gen::<f64>() - 1.0)) + e1 * (b * (2.0 * rng.gen::<f64>() - 1.0));
            if dim == Dim::Three {
                y += e2 * (b * (2.0 * rng.gen::<f64>() - 1.0));
            }
            if self.contains(&y) {
                hits += 1;
            }
        }
        let box_vol = match dim {
            Dim::Two => 4.0 * a * b,
            Dim::Three => 8.0 * a * b * b,
        };
        let p = hits as f64 / samples as f64;
        (box_vol * p, box_vol * (p * (1.0 - p) / samples as f64).sqrt())
    }
}
