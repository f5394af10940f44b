//! Optical parameters: absorption sigma, scattering k = k0 g, boundary
//! profiles S and W, and attenuation along straight and broken paths.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormal_frame, planar, Dim, Vec3};
use crate::quadrature::{integrate, Tolerance};

/// Absolute tolerance of numerically integrated line integrals.
pub const LINE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Center(pub Vec3);

impl From<Vec<f64>> for Center {
    fn from(v: Vec<f64>) -> Self {
        let g = |i: usize| v.get(i).copied().unwrap_or(0.0);
        Center(Vec3::new(g(0), g(1), g(2)))
    }
}

impl From<Center> for Vec<f64> {
    fn from(c: Center) -> Self {
        vec![c.0.x, c.0.y, c.0.z]
    }
}

/// Scalar field on the ball. Analytic phantoms have closed-form line
/// integrals; grids are interpolated (bi/trilinear) on nodes covering
/// [-1, 1]^n, stored row-major with x fastest, and clamped at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Phantom {
    Constant {
        value: f64,
    },
    Disc {
        #[serde(default)]
        center: Center,
        radius: f64,
        value: f64,
    },
    /// amplitude * (1 - r^2 / radius^2)^2 inside the radius.
    Bump {
        #[serde(default)]
        center: Center,
        radius: f64,
        amplitude: f64,
    },
    /// amplitude * exp(-r^2 / spread).
    Gaussian {
        #[serde(default)]
        center: Center,
        spread: f64,
        amplitude: f64,
    },
    Grid {
        dims: Vec<usize>,
        values: Vec<f64>,
    },
    Sum {
        terms: Vec<Phantom>,
    },
}

impl Phantom {
    pub fn zero() -> Self {
        Phantom::Constant { value: 0.0 }
    }

    pub fn constant(value: f64) -> Self {
        Phantom::Constant { value }
    }

    pub fn disc(center: Vec3, radius: f64, value: f64) -> Self {
        Phantom::Disc { center: Center(center), radius, value }
    }

    pub fn bump(center: Vec3, radius: f64, amplitude: f64) -> Self {
        Phantom::Bump { center: Center(center), radius, amplitude }
    }

    pub fn gaussian(center: Vec3, spread: f64, amplitude: f64) -> Self {
        Phantom::Gaussian { center: Center(center), spread, amplitude }
    }

    /// Structural checks on parameters.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self {
            Phantom::Constant { value } if !value.is_finite() => bad("constant value must be finite".into()),
            Phantom::Disc { radius, value, .. } if !(*radius > 0.0) || !value.is_finite() => {
                bad(format!("disc needs radius > 0 and finite value (radius {radius})"))
            }
            Phantom::Bump { radius, amplitude, .. } if !(*radius > 0.0) || !amplitude.is_finite() => {
                bad(format!("bump needs radius > 0 and finite amplitude (radius {radius})"))
            }
            Phantom::Gaussian { spread, amplitude, .. } if !(*spread > 0.0) || !amplitude.is_finite() => {
                bad(format!("gaussian needs spread > 0 and finite amplitude (spread {spread})"))
            }
            Phantom::Grid { dims, values } => {
                if !(dims.len() == 2 || dims.len() == 3) || dims.iter().any(|d| *d < 2) {
                    return bad(format!("grid dims {dims:?}: need 2 or 3 axes with >= 2 nodes"));
                }
                let n: usize = dims.iter().product();
                if n != values.len() {
                    return bad(format!("grid has {} values, dims imply {n}", values.len()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("grid values must be finite".into());
                }
                Ok(())
            }
            Phantom::Sum { terms } => terms.iter().try_for_each(|t| t.check()),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, y: &Vec3) -> f64 {
        match self {
            Phantom::Constant { value } => *value,
            Phantom::Disc { center, radius, value } => {
                if (y - center.0).norm_squared() < radius * radius {
                    *value
                } else {
                    0.0
                }
            }
            Phantom::Bump { center, radius, amplitude } => {
                let u = (y - center.0).norm_squared() / (radius * radius);
                if u < 1.0 {
                    amplitude * (1.0 - u) * (1.0 - u)
                } else {
                    0.0
                }
            }
            Phantom::Gaussian { center, spread, amplitude } => amplitude * (-(y - center.0).norm_squared() / spread).exp(),
            Phantom::Grid { dims, values } => grid_eval(dims, values, y),
            Phantom::Sum { terms } => terms.iter().map(|t| t.eval(y)).sum(),
        }
    }

    /// Integral of the field along the segment from `a` to `b`.
    pub fn line_integral(&self, a: &Vec3, b: &Vec3) -> f64 {
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            return 0.0;
        }
        let u = d / len;
        match self {
            Phantom::Constant { value } => value * len,
            Phantom::Disc { center, radius, value } => {
                match sphere_hits(a, &u, &center.0, *radius) {
                    Some((s1, s2)) => value * (s2.min(len) - s1.max(0.0)).max(0.0),
                    None => 0.0,
                }
            }
            Phantom::Bump { center, radius, amplitude } => {
                let sc = (center.0 - a).dot(&u);
                let h2 = ((a - center.0).norm_squared() - sc * sc).max(0.0);
                let w2 = radius * radius - h2;
                if w2 <= 0.0 {
                    return 0.0;
                }
                let w = w2.sqrt();
                let t1 = (-w).max(-sc);
                let t2 = w.min(len - sc);
                if t2 <= t1 {
                    return 0.0;
                }
                let f = |t: f64| w2 * w2 * t - 2.0 * w2 * t.powi(3) / 3.0 + t.powi(5) / 5.0;
                amplitude * (f(t2) - f(t1)) / radius.powi(4)
            }
            Phantom::Gaussian { center, spread, amplitude } => {
                let sc = (center.0 - a).dot(&u);
                let h2 = ((a - center.0).norm_squared() - sc * sc).max(0.0);
                let r = spread.sqrt();
                let t1 = -sc / r;
                let t2 = (len - sc) / r;
                amplitude * (-h2 / spread).exp() * 0.5 * (PI * spread).sqrt() * (libm::erf(t2) - libm::erf(t1))
            }
            Phantom::Grid { .. } => {
                let r = integrate(|s| self.eval(&(a + u * s)), 0.0, len, Tolerance::new(LINE_TOL, 0.0).with_budget(4000));
                r.value
            }
            Phantom::Sum { terms } => terms.iter().map(|t| t.line_integral(a, b)).sum(),
        }
    }

    /// Returns the field multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Phantom {
        match self {
            Phantom::Constant { value } => Phantom::Constant { value: value * s },
            Phantom::Disc { center, radius, value } => Phantom::Disc { center: *center, radius: *radius, value: value * s },
            Phantom::Bump { center, radius, amplitude } => {
                Phantom::Bump { center: *center, radius: *radius, amplitude: amplitude * s }
            }
            Phantom::Gaussian { center, spread, amplitude } => {
                Phantom::Gaussian { center: *center, spread: *spread, amplitude: amplitude * s }
            }
            Phantom::Grid { dims, values } => {
                Phantom::Grid { dims: dims.clone(), values: values.iter().map(|v| v * s).collect() }
            }
            Phantom::Sum { terms } => Phantom::Sum { terms: terms.iter().map(|t| t.scaled(s)).collect() },
        }
    }

    /// Radius of a centered ball outside of which the field vanishes, if any.
    pub fn support_radius(&self) -> Option<f64> {
        match self {
            Phantom::Constant { value } => (*value == 0.0).then_some(0.0),
            Phantom::Disc { center, radius, value } | Phantom::Bump { center, radius, amplitude: value } => {
                Some(if *value == 0.0 { 0.0 } else { center.0.norm() + radius })
            }
            Phantom::Gaussian { amplitude, .. } => (*amplitude == 0.0).then_some(0.0),
            Phantom::Grid { values, .. } => values.iter().all(|v| *v == 0.0).then_some(0.0),
            Phantom::Sum { terms } => {
                terms.iter().try_fold(0.0f64, |acc, t| t.support_radius().map(|r| acc.max(r)))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.support_radius() == Some(0.0)
    }
}

fn sphere_hits(a: &Vec3, u: &Vec3, c: &Vec3, r: f64) -> Option<(f64, f64)> {
    let w = a - c;
    let b = w.dot(u);
    let disc = b * b - (w.norm_squared() - r * r);
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

fn grid_eval(dims: &[usize], values: &[f64], y: &Vec3) -> f64 {
    let coord = |x: f64, n: usize| -> (usize, f64) {
        let g = ((x + 1.0) * 0.5 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = (g.floor() as usize).min(n - 2);
        (i, g - i as f64)
    };
    let (ix, fx) = coord(y.x, dims[0]);
    let (iy, fy) = coord(y.y, dims[1]);
    let nx = dims[0];
    let v = if dims.len() == 2 {
        let at = |i: usize, j: usize| values[j * nx + i];
        (1.0 - fy) * ((1.0 - fx) * at(ix, iy) + fx * at(ix + 1, iy)) + fy * ((1.0 - fx) * at(ix, iy + 1) + fx * at(ix + 1, iy + 1))
    } else {
        let ny = dims[1];
        let (iz, fz) = coord(y.z, dims[2]);
        let at = |i: usize, j: usize, k: usize| values[(k * ny + j) * nx + i];
        let plane = |k: usize| {
            (1.0 - fy) * ((1.0 - fx) * at(ix, iy, k) + fx * at(ix + 1, iy, k))
                + fy * ((1.0 - fx) * at(ix, iy + 1, k) + fx * at(ix + 1, iy + 1, k))
        };
        (1.0 - fz) * plane(iz) + fz * plane(iz + 1)
    };
    v.max(0.0)
}

/// Angular profile S(x, v) or W(x, v) on the boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AngularProfile {
    Constant { value: f64 },
    /// floor + (1 - floor) |nu . v|.
    Lambertian { floor: f64 },
}

impl Default for AngularProfile {
    fn default() -> Self {
        AngularProfile::Constant { value: 1.0 }
    }
}

impl AngularProfile {
    pub fn eval(&self, normal: &Vec3, v: &Vec3) -> f64 {
        match self {
            AngularProfile::Constant { value } => *value,
            AngularProfile::Lambertian { floor } => floor + (1.0 - floor) * normal.dot(v).abs(),
        }
    }

    pub fn inf(&self) -> f64 {
        match self {
            AngularProfile::Constant { value } => *value,
            AngularProfile::Lambertian { floor } => floor.min(1.0),
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            AngularProfile::Constant { value } => *value,
            AngularProfile::Lambertian { floor } => floor.max(1.0),
        }
    }
}

/// Angular part g(v', v) of the scattering kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[derive(Default)]
pub enum PhaseFunction {
    /// 1 / Vol(S^{n-1}).
    #[default]
    Isotropic,
    Constant { value: f64 },
    /// Henyey-Greenstein (n = 3) or wrapped Cauchy (n = 2), normalized to 1.
    HenyeyGreenstein { asymmetry: f64 },
}


impl PhaseFunction {
    pub fn eval(&self, dim: Dim, v_in: &Vec3, v_out: &Vec3) -> f64 {
        match self {
            PhaseFunction::Isotropic => 1.0 / dim.sphere_measure(),
            PhaseFunction::Constant { value } => *value,
            PhaseFunction::HenyeyGreenstein { asymmetry: g } => {
                let c = v_in.dot(v_out);
                let d = 1.0 + g * g - 2.0 * g * c;
                match dim {
                    Dim::Two => (1.0 - g * g) / (2.0 * PI * d),
                    Dim::Three => (1.0 - g * g) / (4.0 * PI * d * d.sqrt()),
                }
            }
        }
    }

    /// Integral of g(v', .) over the sphere.
    pub fn total(&self, dim: Dim) -> f64 {
        match self {
            PhaseFunction::Isotropic | PhaseFunction::HenyeyGreenstein { .. } => 1.0,
            PhaseFunction::Constant { value } => value * dim.sphere_measure(),
        }
    }

    /// Direction distributed with density proportional to g(v_in, .).
    pub fn sample<R: Rng + ?Sized>(&self, dim: Dim, v_in: &Vec3, rng: &mut R) -> Vec3 {
        let g = match self {
            PhaseFunction::HenyeyGreenstein { asymmetry } if *asymmetry != 0.0 => *asymmetry,
            _ => return crate::geometry::random_direction(dim, rng),
        };
        let u: f64 = rng.gen();
        match dim {
            Dim::Two => {
                let th = 2.0 * (((1.0 - g) / (1.0 + g)) * (PI * (u - 0.5)).tan()).atan();
                let base = v_in.y.atan2(v_in.x);
                planar(base + th)
            }
            Dim::Three => {
                let s = (1.0 - g * g) / (1.0 - g + 2.0 * g * u);
                let c = ((1.0 + g * g - s * s) / (2.0 * g)).clamp(-1.0, 1.0);
                let sn = (1.0 - c * c).max(0.0).sqrt();
                let phi = 2.0 * PI * rng.gen::<f64>();
                let (e1, e2) = orthonormal_frame(v_in);
                v_in * c + (e1 * phi.cos() + e2 * phi.sin()) * sn
            }
        }
    }
}

/// Regularity regime of the scattering coefficient near the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[derive(Default)]
pub enum SupportMode {
    /// k continuous up to the boundary.
    #[default]
    H1,
    /// k0 vanishes within distance `delta` of the boundary.
    H2 { delta: f64 },
}


/// sigma(x), k(x, v', v) = k0(x) g(v', v), S, W and the support regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalField {
    pub dim: Dim,
    pub sigma: Phantom,
    pub k0: Phantom,
    #[serde(default)]
    pub phase: PhaseFunction,
    #[serde(default)]
    pub support: SupportMode,
    #[serde(default)]
    pub source: AngularProfile,
    #[serde(default)]
    pub detector: AngularProfile,
}

impl OpticalField {
    /// sigma = k0 = 0, isotropic g, S = W = 1, H1.
    pub fn vacuum(dim: Dim) -> Self {
        OpticalField {
            dim,
            sigma: Phantom::zero(),
            k0: Phantom::zero(),
            phase: PhaseFunction::Isotropic,
            support: SupportMode::H1,
            source: AngularProfile::default(),
            detector: AngularProfile::default(),
        }
    }

    pub fn with_sigma(mut self, sigma: Phantom) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_k0(mut self, k0: Phantom) -> Self {
        self.k0 = k0;
        self
    }

    pub fn with_phase(mut self, phase: PhaseFunction) -> Self {
        self.phase = phase;
        self
    }

    pub fn with_support(mut self, support: SupportMode) -> Self {
        self.support = support;
        self
    }

    pub fn check(&self) -> Result<()> {
        self.sigma.check()?;
        self.k0.check()?;
        if let SupportMode::H2 { delta } = self.support {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::InvalidParameter(format!("H2 margin delta = {delta} must lie in (0, 1)")));
            }
        }
        if let PhaseFunction::HenyeyGreenstein { asymmetry } = self.phase {
            if !(asymmetry.abs() < 1.0) {
                return Err(Error::InvalidParameter(format!("asymmetry {asymmetry} must lie in (-1, 1)")));
            }
        }
        Ok(())
    }

    pub fn sigma_at(&self, y: &Vec3) -> f64 {
        self.sigma.eval(y)
    }

    /// k0 with the H2 margin enforced.
    pub fn k0_at(&self, y: &Vec3) -> f64 {
        if let SupportMode::H2 { delta } = self.support {
            if 1.0 - y.norm() < delta {
                return 0.0;
            }
        }
        self.k0.eval(y)
    }

    pub fn g(&self, v_in: &Vec3, v_out: &Vec3) -> f64 {
        self.phase.eval(self.dim, v_in, v_out)
    }

    pub fn k(&self, y: &Vec3, v_in: &Vec3, v_out: &Vec3) -> f64 {
        let k0 = self.k0_at(y);
        if k0 == 0.0 {
            0.0
        } else {
            k0 * self.g(v_in, v_out)
        }
    }

    /// sigma_p(y) = integral of k(y, v', v) over v.
    pub fn sigma_p(&self, y: &Vec3) -> f64 {
        self.k0_at(y) * self.phase.total(self.dim)
    }

    /// Radius outside of which k vanishes (1 if unknown).
    pub fn scattering_radius(&self) -> f64 {
        let mut r = self.k0.support_radius().unwrap_or(1.0).min(1.0);
        if let SupportMode::H2 { delta } = self.support {
            r = r.min(1.0 - delta);
        }
        r.max(0.0)
    }

    pub fn scatters(&self) -> bool {
        self.scattering_radius() > 0.0 && !self.k0.is_zero()
    }

    /// Velocity-independent attenuation exp(-int sigma) between two points.
    pub fn attenuation(&self, x1: &Vec3, x2: &Vec3) -> Result<f64> {
        if (x1 - x2).norm() == 0.0 {
            return Err(Error::CoincidentPoints);
        }
        Ok((-self.sigma.line_integral(x2, x1)).exp())
    }

    /// Product of segment attenuations along a broken path.
    pub fn path_attenuation(&self, points: &[Vec3]) -> Result<f64> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter("path needs at least two points".into()));
        }
        let mut e = 1.0;
        for w in points.windows(2) {
            e *= self.attenuation(&w[0], &w[1])?;
        }
        Ok(e)
    }

    /// Samples sigma and sigma_p on a Cartesian grid of the ball and flags
    /// violations of admissibility and of the H2 margin.
    pub fn validate_admissible(&self, resolution: usize) -> AdmissibilityReport {
        let resolution = resolution.max(3);
        let mut rep = AdmissibilityReport {
            sup_sigma: 0.0,
            sup_sigma_p: 0.0,
            min_sigma: f64::INFINITY,
            min_k0: f64::INFINITY,
            inf_source: self.source.inf(),
            inf_detector: self.detector.inf(),
            samples: 0,
            violations: Vec::new(),
        };
        let mut margin_hit = false;
        let nz = if self.dim == Dim::Three { resolution } else { 1 };
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / (resolution - 1) as f64;
        for k in 0..nz {
            for j in 0..resolution {
                for i in 0..resolution {
                    let z = if self.dim == Dim::Three { coord(k) } else { 0.0 };
                    let y = Vec3::new(coord(i), coord(j), z);
                    if y.norm() > 1.0 {
                        continue;
                    }
                    rep.samples += 1;
                    let s = self.sigma.eval(&y);
                    let raw_k0 = self.k0.eval(&y);
                    rep.sup_sigma = rep.sup_sigma.max(s);
                    rep.min_sigma = rep.min_sigma.min(s);
                    rep.min_k0 = rep.min_k0.min(raw_k0);
                    rep.sup_sigma_p = rep.sup_sigma_p.max(self.sigma_p(&y));
                    if let SupportMode::H2 { delta } = self.support {
                        if 1.0 - y.norm() < delta && raw_k0 != 0.0 {
                            margin_hit = true;
                        }
                    }
                }
            }
        }
        if let SupportMode::H2 { delta } = self.support {
            // Boundary points are where the margin matters most; sample them directly.
            if let Ok(pts) = crate::geometry::boundary_grid(self.dim, 4 * resolution) {
                for p in pts {
                    for r in [1.0, 1.0 - 0.5 * delta, 1.0 - 0.999 * delta] {
                        if self.k0.eval(&(p.position * r)) != 0.0 {
                            margin_hit = true;
                        }
                    }
                }
            }
        }
        if rep.min_sigma < 0.0 {
            rep.violations.push(format!("sigma takes negative values (min {:.3e})", rep.min_sigma));
        }
        if rep.min_k0 < 0.0 {
            rep.violations.push(format!("k0 takes negative values (min {:.3e})", rep.min_k0));
        }
        if !rep.sup_sigma.is_finite() || !rep.sup_sigma_p.is_finite() {
            rep.violations.push("sigma or sigma_p is unbounded on the sample grid".into());
        }
        if margin_hit {
            rep.violations.push("k0 is nonzero inside the H2 boundary margin".into());
        }
        if rep.inf_source <= 0.0 {
            rep.violations.push("source profile S has nonpositive infimum".into());
        }
        if rep.inf_detector <= 0.0 {
            rep.violations.push("detector profile W has nonpositive infimum".into());
        }
        rep
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub sup_sigma: f64,
    pub sup_sigma_p: f64,
    pub min_sigma: f64,
    pub min_k0: f64,
    pub inf_source: f64,
    pub inf_detector: f64,
    pub samples: usize,
    pub violations: Vec<String>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x(a: f64, b: f64) -> Vec3 {
        Vec3::new(a, b, 0.0)
    }

    #[test]
    fn attenuation_examples() {
        let f = OpticalField::vacuum(Dim::Two);
        assert_eq!(f.attenuation(&x(-0.3, 0.2), &x(0.5, 0.1)).unwrap(), 1.0);
        let f = f.with_sigma(Phantom::constant(1.0));
        assert_relative_eq!(f.attenuation(&x(-1.0, 0.0), &x(1.0, 0.0)).unwrap(), (-2.0f64).exp(), max_relative = 1e-14);
        let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::disc(Vec3::zeros(), 0.5, 1.0));
        assert_relative_eq!(f.attenuation(&x(-1.0, 0.0), &x(1.0, 0.0)).unwrap(), (-1.0f64).exp(), max_relative = 1e-14);
        assert!(f.attenuation(&x(0.1, 0.1), &x(0.1, 0.1)).is_err());
    }

    #[test]
    fn path_examples() {
        let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::constant(1.0));
        let e = f.path_attenuation(&[x(-1.0, 0.0), x(0.0, 0.0), x(0.0, 1.0)]).unwrap();
        assert_relative_eq!(e, (-2.0f64).exp(), max_relative = 1e-14);
        let two = f.path_attenuation(&[x(-0.2, 0.3), x(0.4, -0.1)]).unwrap();
        assert_eq!(two, f.attenuation(&x(-0.2, 0.3), &x(0.4, -0.1)).unwrap());
        assert!(f.path_attenuation(&[x(0.0, 0.0), x(0.0, 0.0)]).is_err());
        assert!(f.path_attenuation(&[x(0.0, 0.0)]).is_err());
    }

    #[test]
    fn k_examples() {
        let f = OpticalField::vacuum(Dim::Two);
        assert_eq!(f.k(&x(0.1, 0.2), &Vec3::x(), &Vec3::y()), 0.0);
        let f = f.with_k0(Phantom::constant(1.0));
        assert_relative_eq!(f.k(&x(0.1, 0.2), &Vec3::x(), &Vec3::y()), 1.0 / (2.0 * PI), max_relative = 1e-15);
        let f = f.with_support(SupportMode::H2 { delta: 0.3 });
        assert_eq!(f.k(&x(0.9, 0.0), &Vec3::x(), &Vec3::y()), 0.0);
    }

    #[test]
    fn bump_line_integral_matches_quadrature() {
        let p = Phantom::bump(x(0.1, -0.2), 0.5, 1.3);
        let a = x(-0.9, 0.1);
        let b = x(0.8, -0.4);
        let u = (b - a).normalize();
        let q = integrate(|s| p.eval(&(a + u * s)), 0.0, (b - a).norm(), Tolerance::new(1e-13, 0.0).with_budget(2000));
        assert_relative_eq!(p.line_integral(&a, &b), q.value, epsilon = 1e-11);
    }

    #[test]
    fn gaussian_line_integral_matches_quadrature() {
        let p = Phantom::gaussian(x(0.2, 0.1), 0.1, 0.7);
        let a = x(-0.6, -0.6);
        let b = x(0.6, 0.7);
        let u = (b - a).normalize();
        let q = integrate(|s| p.eval(&(a + u * s)), 0.0, (b - a).norm(), Tolerance::new(1e-14, 0.0).with_budget(2000));
        assert_relative_eq!(p.line_integral(&a, &b), q.value, epsilon = 1e-12);
    }

    #[test]
    fn grid_reproduces_bilinear_function() {
        let n = 11;
        let mut values = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let xx = -1.0 + 2.0 * i as f64 / 10.0;
                let yy = -1.0 + 2.0 * j as f64 / 10.0;
                values.push(1.0 + 0.5 * xx - 0.25 * yy);
            }
        }
        let p = Phantom::Grid { dims: vec![n, n], values };
        p.check().unwrap();
        assert_relative_eq!(p.eval(&x(0.33, -0.47)), 1.0 + 0.165 + 0.1175, epsilon = 1e-12);
        // Linear field: line integral = length * midpoint value.
        let a = x(-0.5, 0.2);
        let b = x(0.7, -0.1);
        let mid = 0.5 * (a + b);
        let expected = (b - a).norm() * (1.0 + 0.5 * mid.x - 0.25 * mid.y);
        assert_relative_eq!(p.line_integral(&a, &b), expected, epsilon = 1e-10);
    }

    #[test]
    fn admissibility() {
        let f = OpticalField::vacuum(Dim::Two)
            .with_sigma(Phantom::constant(1.0))
            .with_k0(Phantom::constant(0.5));
        let r = f.validate_admissible(21);
        assert!(r.passed());
        assert_relative_eq!(r.sup_sigma_p, 0.5);

        let f = OpticalField::vacuum(Dim::Two)
            .with_k0(Phantom::disc(Vec3::zeros(), 1.0, 0.2))
            .with_support(SupportMode::H2 { delta: 0.1 });
        assert!(!f.validate_admissible(21).passed());

        let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::disc(x(0.2, 0.0), 0.3, -1.0));
        assert!(!f.validate_admissible(21).passed());
    }

    #[test]
    fn hg_sampling_mean_cosine() {
        for dim in [Dim::Two, Dim::Three] {
            let g = 0.6;
            let pf = PhaseFunction::HenyeyGreenstein { asymmetry: g };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let v_in = Vec3::new(0.0, 1.0, 0.0);
            let n = 200_000;
            let mean: f64 = (0..n).map(|_| pf.sample(dim, &v_in, &mut rng).dot(&v_in)).sum::<f64>() / n as f64;
            // Mean cosine of HG in 3D is g; of the wrapped Cauchy in 2D it is g as well.
            assert!((mean - g).abs() < 5e-3, "{dim:?}: mean cosine {mean}");
        }
    }

    #[test]
    fn phantom_json_roundtrip() {
        let p = Phantom::Sum {
            terms: vec![Phantom::bump(x(0.1, 0.0), 0.4, 1.0), Phantom::Grid { dims: vec![2, 2], values: vec![0.0; 4] }],
        };
        let s = serde_json::to_string(&p).unwrap();
        let back: Phantom = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let d: Phantom = serde_json::from_str(r#"{"type":"disc","radius":0.5,"value":1.0}"#).unwrap();
        assert_eq!(d, Phantom::disc(Vec3::zeros(), 0.5, 1.0));
    }
}
