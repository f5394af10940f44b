//! The unit disc/ball: travel times, boundary and direction grids, chords.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Points and directions. In two dimensions the third component is zero.
pub type Vec3 = Vector3<f64>;

/// Tolerance for points that should lie on the unit sphere.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn new(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            _ => Err(Error::Dimension(n)),
        }
    }

    pub fn n(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    /// Vol(S^{n-1}).
    pub fn sphere_measure(self) -> f64 {
        match self {
            Dim::Two => 2.0 * PI,
            Dim::Three => 4.0 * PI,
        }
    }

    /// Vol(S^{n-2}): two points for n = 2, the unit circle for n = 3.
    pub fn equator_measure(self) -> f64 {
        match self {
            Dim::Two => 2.0,
            Dim::Three => 2.0 * PI,
        }
    }

    /// Lebesgue measure of the unit ball.
    pub fn ball_volume(self) -> f64 {
        match self {
            Dim::Two => PI,
            Dim::Three => 4.0 * PI / 3.0,
        }
    }
}

impl TryFrom<usize> for Dim {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Dim::new(n)
    }
}

impl From<Dim> for usize {
    fn from(d: Dim) -> usize {
        d.n()
    }
}

/// Planar vector rotated by +pi/2.
pub fn rot90(v: &Vec3) -> Vec3 {
    Vec3::new(-v.y, v.x, 0.0)
}

/// Unit vector at angle `a` in the plane.
pub fn planar(a: f64) -> Vec3 {
    Vec3::new(a.cos(), a.sin(), 0.0)
}

/// Two unit vectors completing `v` to an orthonormal frame.
pub fn orthonormal_frame(v: &Vec3) -> (Vec3, Vec3) {
    let helper = if v.x.abs() < 0.6 { Vec3::x() } else if v.y.abs() < 0.6 { Vec3::y() } else { Vec3::z() };
    let e1 = (helper - v * v.dot(&helper)).normalize();
    let e2 = v.cross(&e1);
    (e1, e2)
}

/// Uniformly distributed unit vector.
pub fn random_direction<R: Rng + ?Sized>(dim: Dim, rng: &mut R) -> Vec3 {
    match dim {
        Dim::Two => planar(2.0 * PI * rng.gen::<f64>()),
        Dim::Three => {
            let z = 2.0 * rng.gen::<f64>() - 1.0;
            let phi = 2.0 * PI * rng.gen::<f64>();
            let r = (1.0 - z * z).max(0.0).sqrt();
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        }
    }
}

/// Travel times to the boundary of the unit ball along -v and +v.
pub fn tau_pm(x: &Vec3, v: &Vec3) -> Result<(f64, f64)> {
    let r2 = x.norm_squared();
    if r2.sqrt() > 1.0 + BOUNDARY_TOL {
        return Err(Error::OutsideDomain(r2.sqrt()));
    }
    let b = x.dot(v);
    let c = (r2 - 1.0).min(0.0);
    let disc = (b * b - c).max(0.0).sqrt();
    Ok(((b + disc).max(0.0), (disc - b).max(0.0)))
}

/// Exit distance from `x` (inside or on the ball) along `v`; 0 if outside.
pub fn exit_distance(x: &Vec3, v: &Vec3) -> f64 {
    let b = x.dot(v);
    let c = x.norm_squared() - 1.0;
    let disc = b * b - c;
    if disc <= 0.0 {
        return 0.0;
    }
    (disc.sqrt() - b).max(0.0)
}

/// A point of the unit sphere; the outward normal equals the position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub position: Vec3,
}

impl BoundaryPoint {
    /// Projects `p` onto the sphere.
    pub fn new(p: Vec3) -> Result<Self> {
        let r = p.norm();
        if r == 0.0 || !r.is_finite() {
            return Err(Error::InvalidParameter("boundary point needs a nonzero direction".into()));
        }
        Ok(BoundaryPoint { position: p / r })
    }

    pub fn at_angle(a: f64) -> Self {
        BoundaryPoint { position: planar(a) }
    }

    pub fn normal(&self) -> Vec3 {
        self.position
    }

    /// Polar angle in [0, 2 pi) (meaningful for n = 2).
    pub fn angle(&self) -> f64 {
        self.position.y.atan2(self.position.x).rem_euclid(2.0 * PI)
    }
}

/// The unit ball in dimension n.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub dim: Dim,
}

impl Domain {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Domain { dim: Dim::new(n)? })
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        x.norm_squared() < 1.0
    }

    pub fn tau_pm(&self, x: &Vec3, v: &Vec3) -> Result<(f64, f64)> {
        tau_pm(x, v)
    }

    /// Total boundary measure Vol(S^{n-1}).
    pub fn boundary_measure(&self) -> f64 {
        self.dim.sphere_measure()
    }

    /// Uniform circle partition (n = 2) or Fibonacci sphere lattice (n = 3).
    pub fn boundary_grid(&self, n_points: usize) -> Result<Vec<BoundaryPoint>> {
        boundary_grid(self.dim, n_points)
    }

    pub fn chord(&self, source: &BoundaryPoint, detector: &BoundaryPoint) -> Result<Chord> {
        Chord::from_endpoints(source, detector)
    }

    pub fn direction_quadrature(&self, order: usize) -> DirectionQuadrature {
        DirectionQuadrature::new(self.dim, order)
    }
}

pub fn boundary_grid(dim: Dim, n_points: usize) -> Result<Vec<BoundaryPoint>> {
    if n_points < 4 {
        return Err(Error::TooFewPoints(n_points));
    }
    let pts = match dim {
        Dim::Two => (0..n_points)
            .map(|i| BoundaryPoint::at_angle(2.0 * PI * i as f64 / n_points as f64))
            .collect(),
        Dim::Three => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n_points)
                .map(|i| {
                    let z = 1.0 - (2.0 * i as f64 + 1.0) / n_points as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    let p = Vec3::new(r * phi.cos(), r * phi.sin(), z);
                    BoundaryPoint { position: p / p.norm() }
                })
                .collect()
        }
    };
    Ok(pts)
}

/// Segment between two boundary points, with parallel-beam coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub source: Vec3,
    pub detector: Vec3,
    /// Unit direction from source to detector.
    pub direction: Vec3,
    pub length: f64,
    /// Component of the line orthogonal to the direction; points on the
    /// chord are `t * direction + offset`, |t| <= length / 2.
    pub offset: Vec3,
    /// Signed offset `detector . rot90(direction)` for n = 2, |offset| for n = 3.
    pub q: f64,
}

impl Chord {
    pub fn from_endpoints(source: &BoundaryPoint, detector: &BoundaryPoint) -> Result<Self> {
        let d = detector.position - source.position;
        let length = d.norm();
        if length < 1e-14 {
            return Err(Error::CoincidentPoints);
        }
        let direction = d / length;
        let mid = 0.5 * (detector.position + source.position);
        let offset = mid - direction * mid.dot(&direction);
        let planar_case = source.position.z == 0.0 && detector.position.z == 0.0;
        let q = if planar_case { detector.position.dot(&rot90(&direction)) } else { offset.norm() };
        Ok(Chord { source: source.position, detector: detector.position, direction, length, offset, q })
    }

    /// Chord of the unit disc with direction angle `a` and signed offset `q`.
    pub fn from_line(a: f64, q: f64) -> Result<Self> {
        if q.abs() >= 1.0 {
            return Err(Error::InvalidParameter(format!("|q| = {} must be < 1", q.abs())));
        }
        let v = planar(a);
        let c = (1.0 - q * q).sqrt();
        let off = rot90(&v) * q;
        let source = BoundaryPoint { position: off - v * c };
        let detector = BoundaryPoint { position: off + v * c };
        Chord::from_endpoints(&source, &detector)
    }

    /// Direction angle of `direction` in [0, 2 pi) (n = 2).
    pub fn angle(&self) -> f64 {
        self.direction.y.atan2(self.direction.x).rem_euclid(2.0 * PI)
    }

    pub fn perp(&self) -> Vec3 {
        rot90(&self.direction)
    }

    pub fn point(&self, t: f64) -> Vec3 {
        self.offset + self.direction * t
    }

    /// nu(x) . v0 at the detector (equals |nu(x') . v0| at the source).
    pub fn exit_cosine(&self) -> f64 {
        self.detector.dot(&self.direction).max(0.0)
    }

    pub fn entry_cosine(&self) -> f64 {
        (-self.source.dot(&self.direction)).max(0.0)
    }
}

/// Nodes and positive weights on S^{n-1}.
#[derive(Clone, Debug)]
pub struct DirectionQuadrature {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl DirectionQuadrature {
    /// Equal-angle rule with `order` nodes (n = 2); Gauss-Legendre in cos(theta)
    /// times `2 * order` equal azimuths (n = 3).
    pub fn new(dim: Dim, order: usize) -> Self {
        let order = order.max(1);
        match dim {
            Dim::Two => {
                let w = 2.0 * PI / order as f64;
                let nodes = (0..order).map(|i| planar((i as f64 + 0.5) * w)).collect();
                DirectionQuadrature { nodes, weights: vec![w; order] }
            }
            Dim::Three => {
                let gl = gauss_legendre(order);
                let n_phi = 2 * order;
                let dphi = 2.0 * PI / n_phi as f64;
                let mut nodes = Vec::with_capacity(order * n_phi);
                let mut weights = Vec::with_capacity(order * n_phi);
                for (z, wz) in gl.nodes.iter().zip(&gl.weights) {
                    let r = (1.0 - z * z).sqrt();
                    for j in 0..n_phi {
                        let phi = (j as f64 + 0.5) * dphi;
                        nodes.push(Vec3::new(r * phi.cos(), r * phi.sin(), *z));
                        weights.push(wz * dphi);
                    }
                }
                DirectionQuadrature { nodes, weights }
            }
        }
    }

    pub fn integrate<F: FnMut(&Vec3) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(v, w)| w * f(v)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tau_center() {
        let (m, p) = tau_pm(&Vec3::zeros(), &planar(0.3)).unwrap();
        assert_relative_eq!(m, 1.0, epsilon = 1e-15);
        assert_relative_eq!(p, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tau_inward_diameter() {
        let x = Vec3::new(1.0, 0.0, 0.0);
        let (m, p) = tau_pm(&x, &(-x)).unwrap();
        assert!(m.abs() < 1e-15);
        assert_relative_eq!(p, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn tau_offset_point_against_bisection() {
        let x = Vec3::new(0.5, 0.0, 0.0);
        let v = Vec3::new(0.0, 1.0, 0.0);
        let (m, p) = tau_pm(&x, &v).unwrap();
        // Independent root of |x + s v| = 1 on s in [0, 1].
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid: f64 = 0.5 * (lo + hi);
            if (x + v * mid).norm() < 1.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert_relative_eq!(p, lo, epsilon = 1e-14);
        assert_relative_eq!(m, lo, epsilon = 1e-14);
        assert_relative_eq!(p, 0.75f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn tau_rejects_exterior() {
        assert!(tau_pm(&Vec3::new(1.1, 0.0, 0.0), &Vec3::x()).is_err());
    }

    #[test]
    fn grid_circle() {
        let g = boundary_grid(Dim::Two, 4).unwrap();
        let angles: Vec<f64> = g.iter().map(|p| p.angle()).collect();
        for (a, e) in angles.iter().zip([0.0, PI / 2.0, PI, 1.5 * PI]) {
            assert!((a - e).abs() < 1e-14);
        }
        let g = boundary_grid(Dim::Two, 360).unwrap();
        for i in 0..360 {
            let a = g[i].position;
            let b = g[(i + 1) % 360].position;
            let arc = a.dot(&b).clamp(-1.0, 1.0).acos();
            assert_relative_eq!(arc, 2.0 * PI / 360.0, epsilon = 1e-12);
        }
        assert!(boundary_grid(Dim::Two, 3).is_err());
    }

    #[test]
    fn grid_sphere() {
        let g = boundary_grid(Dim::Three, 500).unwrap();
        let mut min_sep = f64::INFINITY;
        for i in 0..g.len() {
            assert!((g[i].position.norm() - 1.0).abs() <= BOUNDARY_TOL);
            for j in 0..i {
                let c = g[i].position.dot(&g[j].position).clamp(-1.0, 1.0);
                min_sep = min_sep.min(c.acos());
            }
        }
        assert!(min_sep > 0.0);
    }

    #[test]
    fn chord_examples() {
        let a = BoundaryPoint::at_angle(PI);
        let b = BoundaryPoint::at_angle(0.0);
        let c = Chord::from_endpoints(&a, &b).unwrap();
        assert_relative_eq!(c.direction, Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(c.length, 2.0, epsilon = 1e-15);
        assert!(c.q.abs() < 1e-15);

        let c = Chord::from_endpoints(&BoundaryPoint::at_angle(1.5 * PI), &BoundaryPoint::at_angle(PI / 2.0)).unwrap();
        assert_relative_eq!(c.direction, Vec3::y(), epsilon = 1e-15);
        assert_relative_eq!(c.length, 2.0, epsilon = 1e-15);
        assert!(c.q.abs() < 1e-15);

        let c = Chord::from_endpoints(&BoundaryPoint::at_angle(PI), &BoundaryPoint::at_angle(PI / 2.0)).unwrap();
        assert_relative_eq!(c.length, 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(c.q.abs(), 2f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_relative_eq!(c.length, 2.0 * (1.0 - c.q * c.q).sqrt(), epsilon = 1e-12);

        assert!(Chord::from_endpoints(&a, &a).is_err());
    }

    #[test]
    fn chord_from_line_roundtrip() {
        let c = Chord::from_line(0.7, -0.35).unwrap();
        assert_relative_eq!(c.angle(), 0.7, epsilon = 1e-13);
        assert_relative_eq!(c.q, -0.35, epsilon = 1e-13);
    }

    #[test]
    fn direction_quadrature_weights() {
        for order in [1, 7, 32] {
            let q = DirectionQuadrature::new(Dim::Two, order);
            assert_relative_eq!(q.weights.iter().sum::<f64>(), 2.0 * PI, epsilon = 1e-10);
            let q = DirectionQuadrature::new(Dim::Three, order);
            assert_relative_eq!(q.weights.iter().sum::<f64>(), 4.0 * PI, epsilon = 1e-10);
            assert!(q.weights.iter().all(|w| *w > 0.0));
        }
    }
}
