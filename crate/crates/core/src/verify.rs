//! Self-check suite: closed forms, transform identities and front
//! coefficients, each compared at a fixed tolerance.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{orthonormal_frame, planar, random_direction, BoundaryPoint, Chord, Dim, Vec3};
use crate::kernels::{
    gamma1, gamma1_limit_prediction, n_kernel, weighted_bound_scan, EllipsoidDomain, KernelQuadrature,
    NKernelMode, ScanGrid,
};
use crate::optics::{OpticalField, PhaseFunction, Phantom, SupportMode};
use crate::quadrature::{gauss_legendre, integrate_pieces};
use crate::recon::{fit_front_samples, front_singularity};
use crate::transport::log_spaced;
use crate::xray::{weighted_xray, XRAY_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Quick,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub level: VerifyLevel,
    /// Multiplies the closed forms of N before comparison; anything but 1
    /// must make the suite fail.
    pub closed_form_scale: f64,
}

impl VerifyOptions {
    pub fn new(level: VerifyLevel) -> Self {
        VerifyOptions { level, closed_form_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub tool_version: String,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

fn check(name: &str, measured: f64, expected: f64, tolerance: f64, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), measured, expected, tolerance, passed, detail, seconds: 0.0 }
}

/// Relative error below `tol` (NaN fails).
fn within(measured: f64, expected: f64, tol: f64) -> bool {
    (measured - expected).abs() <= tol * expected.abs()
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    type Check = Box<dyn Fn(&VerifyOptions) -> CheckResult>;
    let mut suite: Vec<Check> = vec![
        Box::new(|o| n_kernel_closed_forms(o.closed_form_scale)),
        Box::new(|_| weighted_transform_identity()),
        Box::new(|_| phase_space_change_of_variables()),
        Box::new(|_| ellipsoid_volume_bound()),
    ];
    if opts.level == VerifyLevel::Full {
        suite.push(Box::new(|_| planar_diameter_coefficient()));
        suite.push(Box::new(|_| spatial_h2_coefficients()));
        suite.push(Box::new(|_| spatial_h1_log_coefficient()));
        suite.push(Box::new(|_| weighted_sup_scans()));
    }
    let checks: Vec<CheckResult> = suite
        .iter()
        .map(|c| {
            let t = Instant::now();
            let mut r = c(opts);
            r.seconds = t.elapsed().as_secs_f64();
            r
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { level: opts.level, tool_version: env!("CARGO_PKG_VERSION").into(), checks, passed }
}

/// N by quadrature against its closed forms on 100 random (tau, t0) per dimension.
pub fn n_kernel_closed_forms(scale: f64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for dim in [Dim::Two, Dim::Three] {
        for _ in 0..100 {
            let t0 = rng.gen_range(0.05..2.0);
            let tau = t0 * (1.0 + rng.gen_range(1e-3..2.0f64));
            let (x, xp) = (Vec3::new(t0, 0.0, 0.0), Vec3::zeros());
            let quad = n_kernel(dim, tau, &x, &xp, NKernelMode::Quadrature).unwrap_or(f64::NAN);
            let closed = scale * n_kernel(dim, tau, &x, &xp, NKernelMode::ClosedForm).unwrap_or(f64::NAN);
            let e = ((quad - closed) / closed).abs();
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
    }
    check("n_kernel_closed_forms", worst, 0.0, 1e-6, worst <= 1e-6, "max relative error, 200 samples, n = 2 and 3".into())
}

fn random_field<R: Rng>(dim: Dim, rng: &mut R) -> Phantom {
    let center = |rng: &mut R, r: f64| {
        let mut c = random_direction(dim, rng) * (r * rng.gen::<f64>());
        if dim == Dim::Two {
            c.z = 0.0;
        }
        c
    };
    let mut terms = Vec::new();
    for _ in 0..3 {
        // Bumps stay inside the ball so the n = 3 transform is finite.
        let c = center(rng, 0.3);
        terms.push(Phantom::bump(c, rng.gen_range(0.2..0.65), rng.gen_range(0.1..2.0)));
    }
    if dim == Dim::Two {
        let c = center(rng, 0.8);
        terms.push(Phantom::gaussian(c, rng.gen_range(0.05..0.5), rng.gen_range(0.1..1.0)));
    }
    Phantom::Sum { terms }
}

/// P(rho f) along the chord; each half uses t = +-(c - u^2), so that
/// 1 - |y|^2 = u^2 (2c - u^2) is formed without cancellation.
fn rho_transform(dim: Dim, f: &Phantom, chord: &Chord) -> f64 {
    let c = (1.0 - chord.offset.norm_squared()).max(0.0).sqrt();
    let half = |sign: f64| {
        integrate_pieces(
            |u| {
                if u == 0.0 {
                    return if dim == Dim::Two { 2.0 * f.eval(&chord.point(sign * c)) / (2.0 * c).sqrt() } else { 0.0 };
                }
                let y = chord.point(sign * (c - u * u));
                let fy = f.eval(&y);
                if fy == 0.0 {
                    return 0.0;
                }
                let d = 2.0 * c - u * u;
                match dim {
                    Dim::Two => 2.0 * fy / d.sqrt(),
                    Dim::Three => 2.0 * fy / (u * d),
                }
            },
            &(0..=32).map(|i| c.sqrt() * i as f64 / 32.0).collect::<Vec<_>>(),
            XRAY_TOL,
        )
        .value
    };
    half(1.0) + half(-1.0)
}

/// Weighted transform against the plain transform of rho f (20 fields x 50 chords per dimension).
pub fn weighted_transform_identity() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for dim in [Dim::Two, Dim::Three] {
        for _ in 0..20 {
            let f = random_field(dim, &mut rng);
            for _ in 0..50 {
                let (a, b) = loop {
                    let mut a = random_direction(dim, &mut rng);
                    let mut b = random_direction(dim, &mut rng);
                    if dim == Dim::Two {
                        a.z = 0.0;
                        b.z = 0.0;
                    }
                    if (a - b).norm() > 1e-3 {
                        break (a, b);
                    }
                };
                let chord = Chord::from_endpoints(&BoundaryPoint { position: a }, &BoundaryPoint { position: b })
                    .expect("distinct points");
                let lhs = weighted_xray(dim, |y| f.eval(y), &chord).value;
                let rhs = rho_transform(dim, &f, &chord);
                let e = (lhs - rhs).abs() / (1.0 + lhs.abs());
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            }
        }
    }
    check("weighted_transform_identity", worst, 0.0, 1e-8, worst <= 1e-8, "max |P_w f - P(rho f)| / (1 + |P_w f|)".into())
}

/// Test function on the phase space.
fn phase_fn(x: &Vec3, v: &Vec3) -> f64 {
    let a = Vec3::new(0.2, -0.1, 0.1);
    (-(x - a).norm_squared()).exp() * (1.0 + 0.3 * x.dot(v) + 0.2 * v.x * v.x)
}

/// Integrals over X x S^{n-1}: directly, and along chords from the incoming
/// boundary with measure |nu . v| dmu dv.
pub fn phase_space_integrals(dim: Dim) -> (f64, f64) {
    let gl = |n: usize, a: f64, b: f64| gauss_legendre(n).on_interval(a, b).collect::<Vec<_>>();
    let uniform = |n: usize| (0..n).map(|i| (2.0 * PI * i as f64 / n as f64, 2.0 * PI / n as f64)).collect::<Vec<_>>();
    match dim {
        Dim::Two => {
            let mut vol = 0.0;
            for (r, wr) in gl(40, 0.0, 1.0) {
                for (p, wp) in uniform(64) {
                    let x = planar(p) * r;
                    let s: f64 = uniform(64).iter().map(|(a, wa)| wa * phase_fn(&x, &planar(*a))).sum();
                    vol += wr * r * wp * s;
                }
            }
            let mut bdy = 0.0;
            for (al, wal) in uniform(64) {
                let x = planar(al);
                for (psi, wpsi) in gl(40, -0.5 * PI, 0.5 * PI) {
                    // Inward direction at angle psi from -nu.
                    let v = planar(al + PI + psi);
                    let len = 2.0 * psi.cos();
                    let s: f64 = gl(40, 0.0, len).iter().map(|(t, wt)| wt * phase_fn(&(x + v * *t), &v)).sum();
                    bdy += wal * wpsi * psi.cos() * s;
                }
            }
            (vol, bdy)
        }
        Dim::Three => {
            let sphere = |nt: usize, np: usize| {
                let mut pts = Vec::new();
                for (c, wc) in gl(nt, -1.0, 1.0) {
                    let s = (1.0 - c * c).sqrt();
                    for (p, wp) in uniform(np) {
                        pts.push((Vec3::new(s * p.cos(), s * p.sin(), c), wc * wp));
                    }
                }
                pts
            };
            let dirs = sphere(12, 24);
            let mut vol = 0.0;
            for (r, wr) in gl(16, 0.0, 1.0) {
                for (u, wu) in sphere(16, 32) {
                    let x = u * r;
                    let s: f64 = dirs.iter().map(|(v, wv)| wv * phase_fn(&x, v)).sum();
                    vol += wr * r * r * wu * s;
                }
            }
            let mut bdy = 0.0;
            for (x, wx) in sphere(16, 32) {
                let (e1, e2) = orthonormal_frame(&x);
                for (c, wc) in gl(12, 0.0, 1.0) {
                    // c = |nu . v|, v = -c x + sqrt(1 - c^2)(cos p e1 + sin p e2).
                    let s = (1.0 - c * c).sqrt();
                    for (p, wp) in uniform(24) {
                        let v = -x * c + (e1 * p.cos() + e2 * p.sin()) * s;
                        let line: f64 = gl(16, 0.0, 2.0 * c).iter().map(|(t, wt)| wt * phase_fn(&(x + v * *t), &v)).sum();
                        bdy += wx * wc * wp * c * line;
                    }
                }
            }
            (vol, bdy)
        }
    }
}

pub fn phase_space_change_of_variables() -> CheckResult {
    let mut worst = 0.0f64;
    for dim in [Dim::Two, Dim::Three] {
        let (v, b) = phase_space_integrals(dim);
        worst = worst.max(((v - b) / v).abs());
    }
    check("phase_space_change_of_variables", worst, 0.0, 1e-3, worst <= 1e-3, "volume vs boundary-chord quadrature, n = 2 and 3".into())
}

/// Monte Carlo and exact ellipsoid volumes against the bound.
pub fn ellipsoid_volume_bound() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut ok = true;
    for dim in [Dim::Two, Dim::Three] {
        for i in 0..25 {
            let t0 = rng.gen_range(0.0..2.0);
            let mu = t0 + rng.gen_range(0.01..2.0);
            let z = random_direction(dim, &mut rng) * t0;
            let d = EllipsoidDomain::new(mu, z, Vec3::zeros());
            let bound = d.volume_bound(dim);
            let (m, se) = d.mc_volume(dim, 20_000, 100 + i);
            ok &= m - 3.0 * se <= bound && d.volume(dim) <= bound * (1.0 + 1e-12);
            worst = worst.max(d.volume(dim) / bound);
        }
    }
    check("ellipsoid_volume_bound", worst, 1.0, 0.0, ok, "max exact volume / bound; MC estimates within 3 se".into())
}

fn front_fit(field: &OpticalField, s: &BoundaryPoint, d: &BoundaryPoint, eps: &[f64]) -> f64 {
    let q = KernelQuadrature::default();
    let t0 = (s.position - d.position).norm();
    let v: Vec<f64> = eps.iter().map(|e| gamma1(field, t0 + e, s, d, &q).map_or(f64::NAN, |g| g.value)).collect();
    fit_front_samples(eps, &v, front_singularity(field.dim, field.support)).map_or(f64::NAN, |f| f.coefficient)
}

/// n = 2 diameter with sigma = 0, S = W = g = 1, k0 = c: the front coefficient is pi c.
pub fn planar_diameter_coefficient() -> CheckResult {
    let c = 0.7;
    let f = OpticalField::vacuum(Dim::Two).with_k0(Phantom::constant(c)).with_phase(PhaseFunction::Constant { value: 1.0 });
    let fit = front_fit(&f, &BoundaryPoint::at_angle(PI), &BoundaryPoint::at_angle(0.0), &log_spaced(1e-7, 1e-4, 6));
    let expected = PI * c;
    let rel = ((fit - expected) / expected).abs();
    check("planar_diameter_coefficient", fit, expected, 0.02, within(fit, expected, 0.02), format!("relative error {rel:.2e}"))
}

/// n = 3 H2: fitted constant front against the kernel limit on 5 chords through Z.
pub fn spatial_h2_coefficients() -> CheckResult {
    let f = OpticalField::vacuum(Dim::Three)
        .with_k0(Phantom::bump(Vec3::new(0.05, 0.0, 0.0), 0.6, 0.8))
        .with_support(SupportMode::H2 { delta: 0.3 });
    let eps = log_spaced(1e-6, 1e-3, 6);
    let mut worst = 0.0f64;
    for q in [0.0, 0.1, 0.2, 0.3, 0.4] {
        let ch = Chord::from_line(0.3 + q, q).expect("interior line");
        let (s, d) = (BoundaryPoint { position: ch.source }, BoundaryPoint { position: ch.detector });
        let pred = gamma1_limit_prediction(&f, &s, &d).map_or(f64::NAN, |p| p.coefficient);
        let fit = front_fit(&f, &s, &d, &eps);
        let e = ((fit - pred) / pred).abs();
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    check("spatial_h2_coefficients", worst, 0.0, 0.03, worst <= 0.03, "max relative deviation from the kernel limit".into())
}

/// n = 3 H1 diameter: ln(1/eps) coefficient against (2 pi / t0^2) (k(x) + k(x')).
pub fn spatial_h1_log_coefficient() -> CheckResult {
    let c = 0.9;
    let f = OpticalField::vacuum(Dim::Three).with_k0(Phantom::constant(c)).with_phase(PhaseFunction::Constant { value: 1.0 });
    let (s, d) = (BoundaryPoint { position: -Vec3::x() }, BoundaryPoint { position: Vec3::x() });
    let fit = front_fit(&f, &s, &d, &log_spaced(1e-7, 1e-4, 6));
    let expected = 2.0 * PI / 4.0 * 2.0 * c;
    check("spatial_h1_log_coefficient", fit, expected, 0.05, within(fit, expected, 0.05), "n = 3 H1 diameter".into())
}

/// Weighted sups of gamma1, gamma2 stable between the two finest nested grids (n = 2, H1 and H2).
pub fn weighted_sup_scans() -> CheckResult {
    let base = OpticalField::vacuum(Dim::Two)
        .with_sigma(Phantom::bump(Vec3::zeros(), 0.6, 0.5))
        .with_k0(Phantom::bump(Vec3::new(0.1, 0.0, 0.0), 0.6, 0.5));
    let mut worst = 0.0f64;
    let mut ok = true;
    for support in [SupportMode::H1, SupportMode::H2 { delta: 0.25 }] {
        let r = weighted_bound_scan(&base.clone().with_support(support), &ScanGrid::default());
        ok &= r.passed();
        for e in &r.entries {
            worst = worst.max(e.relative_change);
        }
    }
    check("weighted_sup_scans", worst, 0.0, 0.05, ok, "largest relative change between the two finest levels".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_pass_and_tampering_fails() {
        assert!(n_kernel_closed_forms(1.0).passed);
        assert!(!n_kernel_closed_forms(1.0 + 1e-4).passed);
    }

    #[test]
    fn quick_suite_passes() {
        let r = run_verify(&VerifyOptions::new(VerifyLevel::Quick));
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(r.checks.len(), 4);
        let tampered = run_verify(&VerifyOptions { level: VerifyLevel::Quick, closed_form_scale: 1.01 });
        assert!(!tampered.passed);
    }

    #[test]
    fn phase_space_identity_is_tight() {
        for dim in [Dim::Two, Dim::Three] {
            let (v, b) = phase_space_integrals(dim);
            assert!(((v - b) / v).abs() < 1e-6, "{dim:?}: {v} vs {b}");
        }
    }
}
