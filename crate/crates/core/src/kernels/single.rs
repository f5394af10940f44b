//! Single-scatter integrals: from an emission point z to a boundary detector x
//! with total path length mu, over exit directions v at x.

use std::f64::consts::PI;

use crate::geometry::{orthonormal_frame, rot90, Dim, Vec3};
use crate::optics::OpticalField;
use crate::quadrature::{gauss_legendre, integrate, predicate_intervals};

use super::{KernelEval, KernelQuadrature};

/// Geometry of one scatter event between emission point `z` and detector `x`.
pub(crate) struct ScatterPath<'a> {
    pub field: &'a OpticalField,
    pub x: Vec3,
    pub z: Vec3,
    pub mu: f64,
    /// |x - z|.
    pub t: f64,
    pub v0: Vec3,
    r2max: f64,
    absorbing: bool,
}

impl<'a> ScatterPath<'a> {
    pub fn new(field: &'a OpticalField, x: Vec3, z: Vec3, mu: f64) -> Option<Self> {
        let d = x - z;
        let t = d.norm();
        if !(t > 1e-14) || mu <= t {
            return None;
        }
        let r = field.scattering_radius();
        Some(ScatterPath {
            field,
            x,
            z,
            mu,
            t,
            v0: d / t,
            r2max: r * r,
            absorbing: !field.sigma.is_zero(),
        })
    }

    pub fn valid(&self, v: &Vec3, s: f64) -> bool {
        if self.x.dot(v) <= 0.0 {
            return false;
        }
        let p = self.x - v * s;
        p.norm_squared() < self.r2max
    }

    /// W (nu.v) E(x,p) E(p,z) k(p, v', v) src(v') for exit direction v and
    /// scatter distance s; zero outside the admissible set.
    pub fn integrand<S: Fn(&Vec3) -> f64>(&self, v: &Vec3, s: f64, src: &S) -> f64 {
        let cos_out = self.x.dot(v);
        if cos_out <= 0.0 {
            return 0.0;
        }
        let p = self.x - v * s;
        if p.norm_squared() >= self.r2max {
            return 0.0;
        }
        let k0 = self.field.k0_at(&p);
        if k0 == 0.0 {
            return 0.0;
        }
        let w = p - self.z;
        let l = w.norm();
        if l == 0.0 {
            return 0.0;
        }
        let vp = w / l;
        let source = src(&vp);
        if source == 0.0 {
            return 0.0;
        }
        let mut val = self.field.detector.eval(&self.x, v) * cos_out * k0 * self.field.g(&vp, v) * source;
        if self.absorbing {
            let tau = self.field.sigma.line_integral(&self.z, &p) + self.field.sigma.line_integral(&p, &self.x);
            val *= (-tau).exp();
        }
        val
    }

    /// Planar exit direction and scatter distance at angle theta of the
    /// regularizing map, on branch `sign`.
    pub fn planar_node(&self, theta: f64, sign: f64) -> (Vec3, f64) {
        let a = 0.5 * (self.mu * self.mu - self.t * self.t);
        let s = 0.5 * self.t * (1.0 - theta.cos()) + 0.5 * (self.mu - self.t);
        let c = ((self.mu - a / s) / self.t).clamp(-1.0, 1.0);
        let sn = (1.0 - c * c).max(0.0).sqrt();
        (self.v0 * c + rot90(&self.v0) * (sign * sn), s)
    }

    /// Sum over both branches of the theta integral (n = 2, adaptive); the
    /// caller multiplies by 1/sqrt(mu^2 - t^2).
    pub fn planar_adaptive<S: Fn(&Vec3) -> f64>(&self, src: &S, q: &KernelQuadrature) -> KernelEval {
        let mut out = KernelEval::zero();
        for sign in [1.0, -1.0] {
            let pieces = predicate_intervals(
                |th| {
                    let (v, s) = self.planar_node(th, sign);
                    self.valid(&v, s)
                },
                0.0,
                PI,
                q.scan,
            );
            for (a, b) in pieces {
                let r = integrate(
                    |th| {
                        let (v, s) = self.planar_node(th, sign);
                        self.integrand(&v, s, src)
                    },
                    a,
                    b,
                    q.tolerance(),
                );
                out.add(r);
            }
        }
        out
    }

    /// Same sum with a fixed Gauss-Legendre rule per admissible interval.
    pub fn planar_fixed<S: Fn(&Vec3) -> f64>(&self, src: &S, n_theta: usize, scan: usize) -> f64 {
        let rule = gauss_legendre(n_theta);
        let mut total = 0.0;
        for sign in [1.0, -1.0] {
            let pieces = predicate_intervals(
                |th| {
                    let (v, s) = self.planar_node(th, sign);
                    self.valid(&v, s)
                },
                0.0,
                PI,
                scan,
            );
            for (a, b) in pieces {
                total += rule.integrate(a, b, |th| {
                    let (v, s) = self.planar_node(th, sign);
                    self.integrand(&v, s, src)
                });
            }
        }
        total
    }

    /// n = 3: (1/t) int ds / (s (mu - s)) int_0^{2 pi} chi F d omega, with
    /// logarithmic maps on both halves of the s range.
    pub fn spatial_adaptive<S: Fn(&Vec3) -> f64>(&self, src: &S, q: &KernelQuadrature) -> KernelEval {
        let h = 0.5 * (self.mu - self.t);
        let wmax = ((h + 0.5 * self.t) / h).ln();
        let a = 0.5 * (self.mu * self.mu - self.t * self.t);
        let (e1, e2) = orthonormal_frame(&self.v0);
        // Inner error estimates are not propagated; only convergence is.
        let inner = |s: f64| -> (f64, f64, bool) {
            let u = ((self.mu - a / s) / self.t).clamp(-1.0, 1.0);
            let w = (1.0 - u * u).max(0.0).sqrt();
            let dir = |om: f64| self.v0 * u + (e1 * om.cos() + e2 * om.sin()) * w;
            let pieces = predicate_intervals(|om| self.valid(&dir(om), s), 0.0, 2.0 * PI, q.scan);
            let (mut val, mut err, mut ok) = (0.0, 0.0, true);
            for (lo, hi) in pieces {
                let r = integrate(|om| self.integrand(&dir(om), s, src), lo, hi, q.inner_tolerance());
                val += r.value;
                err += r.error;
                ok &= r.converged;
            }
            (val, err, ok)
        };
        let mut out = KernelEval::zero();
        let mut inner_ok = true;
        // First half: s = h e^w, ds / s = dw.
        let r1 = integrate(
            |w| {
                let s = h * w.exp();
                let (v, _, ok) = inner(s);
                inner_ok &= ok;
                v / (self.mu - s)
            },
            0.0,
            wmax,
            q.tolerance(),
        );
        // Second half: mu - s = h e^w.
        let r2 = integrate(
            |w| {
                let s = self.mu - h * w.exp();
                let (v, _, ok) = inner(s);
                inner_ok &= ok;
                v / s
            },
            0.0,
            wmax,
            q.tolerance(),
        );
        out.add(r1);
        out.add(r2);
        out.value /= self.t;
        out.error /= self.t;
        out.converged &= inner_ok;
        out
    }
}

/// gamma1 at path length tau for source x' and detector x.
pub(crate) fn gamma1_points(field: &OpticalField, tau: f64, xs: &Vec3, xd: &Vec3, q: &KernelQuadrature) -> KernelEval {
    let path = match ScatterPath::new(field, *xd, *xs, tau) {
        Some(p) if field.scatters() => p,
        _ => return KernelEval::zero(),
    };
    let src = |vp: &Vec3| field.source.eval(xs, vp) * xs.dot(vp).abs();
    match field.dim {
        Dim::Two => {
            let mut r = path.planar_adaptive(&src, q);
            let scale = 1.0 / (tau * tau - path.t * path.t).sqrt();
            r.value *= scale;
            r.error *= scale;
            r
        }
        Dim::Three => path.spatial_adaptive(&src, q),
    }
}
