//! One-dimensional quadrature: Gauss-Legendre rules and a globally adaptive
//! Gauss-Kronrod (7/15) integrator.

use std::sync::OnceLock;

/// Gauss-Legendre nodes and weights on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Computes the `n`-point rule by Newton iteration on P_n.
    pub fn legendre(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussRule { nodes, weights }
    }

    /// Integrates `f` over [a, b].
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(c + h * x);
        }
        s * h
    }

    /// Integrates `f` over [a, b] split into `panels` equal pieces.
    pub fn composite<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, panels: usize, mut f: F) -> f64 {
        let panels = panels.max(1);
        let w = (b - a) / panels as f64;
        let mut s = 0.0;
        for p in 0..panels {
            let lo = a + w * p as f64;
            s += self.integrate(lo, lo + w, &mut f);
        }
        s
    }

    /// Mapped nodes and weights on [a, b].
    pub fn on_interval(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (c + h * x, w * h))
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached Gauss-Legendre rule of order `n` (orders up to 128 are cached).
pub fn gauss_legendre(n: usize) -> &'static GaussRule {
    static CACHE: OnceLock<Vec<OnceLock<GaussRule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| (0..=128).map(|_| OnceLock::new()).collect());
    match cache.get(n) {
        Some(slot) => slot.get_or_init(|| GaussRule::legendre(n)),
        None => Box::leak(Box::new(GaussRule::legendre(n))),
    }
}

// Kronrod extension of the 7-point Gauss rule (QUADPACK qk15 constants).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.000_000_000_000_000_000_000_000_000_000_000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Single Gauss-Kronrod 15 panel: (integral, error estimate).
pub fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut resk = fc * WGK[7];
    let mut resg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        resk += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            resg += WG[j / 2] * (f1 + f2);
        }
    }
    let value = resk * h;
    let err = ((resk - resg) * h).abs();
    (value, err)
}

/// Tolerances and budget of the adaptive integrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_subdivisions: usize,
}

impl Tolerance {
    pub const fn new(abs: f64, rel: f64) -> Self {
        Tolerance { abs, rel, max_subdivisions: 400 }
    }

    pub const fn with_budget(self, max_subdivisions: usize) -> Self {
        Tolerance { max_subdivisions, ..self }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::new(1e-12, 1e-10)
    }
}

/// Outcome of an adaptive integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

/// Globally adaptive GK15 on [a, b]: bisects the panel with the largest error
/// estimate until the total error meets `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: Tolerance) -> Integral {
    if a == b {
        return Integral { value: 0.0, error: 0.0, converged: true };
    }
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::new();
    let (v, e) = gk15(&mut f, a, b);
    panels.push((a, b, v, e));
    let mut total = v;
    let mut err = e;
    loop {
        if err <= tol.abs.max(tol.rel * total.abs()) {
            return Integral { value: total, error: err, converged: true };
        }
        if panels.len() >= tol.max_subdivisions {
            return Integral { value: total, error: err, converged: false };
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p.3 > acc.1 { (i, p.3) } else { acc });
        let (lo, hi, pv, pe) = panels.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            // Panel cannot be split further in floating point.
            panels.push((lo, hi, pv, 0.0));
            err -= pe;
            continue;
        }
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        total += v1 + v2 - pv;
        err += e1 + e2 - pe;
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
        if err < 0.0 {
            err = panels.iter().map(|p| p.3).sum();
        }
    }
}

/// Adaptive integration over consecutive intervals given by sorted `breaks`.
pub fn integrate_pieces<F: FnMut(f64) -> f64>(mut f: F, breaks: &[f64], tol: Tolerance) -> Integral {
    let mut out = Integral { value: 0.0, error: 0.0, converged: true };
    for w in breaks.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let r = integrate(&mut f, w[0], w[1], tol);
        out.value += r.value;
        out.error += r.error;
        out.converged &= r.converged;
    }
    out
}

/// Locates a sign change of a predicate on [a, b] by bisection, assuming
/// `p(a) != p(b)`.
pub fn bisect_predicate<P: FnMut(f64) -> bool>(mut p: P, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let pa = p(a);
    for _ in 0..iters {
        let m = 0.5 * (a + b);
        if p(m) == pa {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Maximal subintervals of [a, b] on which `p` holds, resolved by a scan of
/// `scan` cells followed by bisection of each transition.
pub fn predicate_intervals<P: FnMut(f64) -> bool>(mut p: P, a: f64, b: f64, scan: usize) -> Vec<(f64, f64)> {
    let scan = scan.max(2);
    let h = (b - a) / scan as f64;
    let mut out = Vec::new();
    let mut prev_x = a;
    let mut prev = p(a);
    let mut start = if prev { Some(a) } else { None };
    for i in 1..=scan {
        let x = if i == scan { b } else { a + h * i as f64 };
        let cur = p(x);
        if cur != prev {
            let edge = bisect_predicate(&mut p, prev_x, x, 60);
            if cur {
                start = Some(edge);
            } else if let Some(s) = start.take() {
                if edge > s {
                    out.push((s, edge));
                }
            }
        }
        prev = cur;
        prev_x = x;
    }
    if let Some(s) = start {
        if b > s {
            out.push((s, b));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_weights_sum_to_two() {
        for n in [1, 2, 5, 16, 40, 97] {
            let r = GaussRule::legendre(n);
            assert_relative_eq!(r.weights.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn legendre_exact_for_polynomials() {
        let r = gauss_legendre(6);
        // Degree 11 is the highest exact degree for 6 points.
        let v = r.integrate(0.0, 2.0, |x| x.powi(11));
        assert_relative_eq!(v, 2f64.powi(12) / 12.0, max_relative = 1e-13);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let r = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, Tolerance::new(1e-10, 1e-10).with_budget(2000));
        assert!(r.converged);
        assert_relative_eq!(r.value, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn adaptive_smooth() {
        let r = integrate(f64::cos, 0.0, std::f64::consts::FRAC_PI_2, Tolerance::default());
        assert_relative_eq!(r.value, 1.0, max_relative = 1e-13);
    }

    #[test]
    fn intervals_of_predicate() {
        let iv = predicate_intervals(|x| (0.3..0.7).contains(&x), 0.0, 1.0, 10);
        assert_eq!(iv.len(), 1);
        assert!((iv[0].0 - 0.3).abs() < 1e-12 && (iv[0].1 - 0.7).abs() < 1e-12);
        let all = predicate_intervals(|_| true, 0.0, 1.0, 4);
        assert_eq!(all, vec![(0.0, 1.0)]);
    }
}
