//! Leading behavior of gamma1 as tau -> t0+ and weighted sup scans.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryPoint, Chord, Dim};
use crate::optics::{OpticalField, SupportMode};
use crate::xray::weighted_xray;

use super::double::gamma2_points;
use super::single::gamma1_points;
use super::{ballistic_geometry, Gamma2Quadrature, KernelQuadrature, KernelTerm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Singularity {
    /// gamma1 ~ C (tau - t0)^exponent.
    Power { exponent: f64 },
    /// gamma1 ~ C ln(1 / (tau - t0)).
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitPrediction {
    pub singularity: Singularity,
    pub coefficient: f64,
}

/// Leading term of gamma1 at the chord from `source` to `detector`:
///
/// * n = 2: C (tau - t0)^{-1/2}, C = sqrt(2 / t0) W S (nu.v0)|nu'.v0| E P_w k_v0;
/// * n = 3, H2: constant C = (2 pi / t0) W S (nu.v0)|nu'.v0| E P_w k_v0;
/// * n = 3, H1: C ln(1/(tau - t0)), C = (2 pi / t0^2) W S (nu.v0)|nu'.v0| E (k(x) + k(x')),
///
/// where k_v0(y) = k(y, v0, v0) and P_w is the weighted X-ray transform. The
/// n = 3 constants are those implied by the gamma1 integral itself.
pub fn gamma1_limit_prediction(
    field: &OpticalField,
    source: &BoundaryPoint,
    detector: &BoundaryPoint,
) -> Result<LimitPrediction> {
    let chord = Chord::from_endpoints(source, detector)?;
    let t0 = chord.length;
    let v0 = chord.direction;
    let e = (-field.sigma.line_integral(&chord.source, &chord.detector)).exp();
    // W S cosines without the 1/t0^{n-1} of the ballistic amplitude.
    let geom = ballistic_geometry(field, &chord) * t0.powi(field.dim.n() as i32 - 1);
    let k_v0 = |y: &crate::geometry::Vec3| field.k(y, &v0, &v0);
    match (field.dim, field.support) {
        (Dim::Two, _) => {
            let pw = weighted_xray(Dim::Two, k_v0, &chord).value;
            Ok(LimitPrediction {
                singularity: Singularity::Power { exponent: -0.5 },
                coefficient: (2.0 / t0).sqrt() * geom * e * pw,
            })
        }
        (Dim::Three, SupportMode::H2 { .. }) => {
            let pw = weighted_xray(Dim::Three, k_v0, &chord);
            if pw.divergent {
                return Err(Error::InvalidParameter("k does not vanish at the chord ends".into()));
            }
            Ok(LimitPrediction {
                singularity: Singularity::Power { exponent: 0.0 },
                coefficient: 2.0 * PI / t0 * geom * e * pw.value,
            })
        }
        (Dim::Three, SupportMode::H1) => {
            let kx = field.k(&chord.detector, &v0, &v0);
            let kxp = field.k(&chord.source, &v0, &v0);
            if !kx.is_finite() || !kxp.is_finite() {
                return Err(Error::InvalidParameter("k is undefined at a chord endpoint".into()));
            }
            Ok(LimitPrediction {
                singularity: Singularity::Log,
                coefficient: 2.0 * PI / (t0 * t0) * geom * e * (kx + kxp),
            })
        }
    }
}

/// Nested (tau, chord) grids for the weighted sup scans. Level l uses
/// `base_angles * 2^l` chord directions over [0, 2 pi), `base_offsets * 2^l + 1`
/// offsets over [-q_max, q_max], and tau - t0 on a geometric ladder from
/// `eps_max` down to `eps_min * 10^-l` with `per_decade` points per decade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub levels: usize,
    pub base_angles: usize,
    pub base_offsets: usize,
    pub q_max: f64,
    pub eps_max: f64,
    pub eps_min: f64,
    pub per_decade: usize,
    pub include_gamma2: bool,
    pub quadrature: KernelQuadrature,
    pub gamma2_quadrature: Gamma2Quadrature,
    /// Relative change between the two finest levels accepted as stable.
    pub stability_tol: f64,
}

impl Default for ScanGrid {
    fn default() -> Self {
        ScanGrid {
            levels: 3,
            base_angles: 2,
            base_offsets: 2,
            q_max: 0.95,
            eps_max: 1.0,
            eps_min: 1e-3,
            per_decade: 2,
            include_gamma2: true,
            quadrature: KernelQuadrature::fast(),
            gamma2_quadrature: Gamma2Quadrature::coarse(),
            stability_tol: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub term: KernelTerm,
    pub weight: String,
    pub level_sups: Vec<f64>,
    pub relative_change: f64,
    pub finite: bool,
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub entries: Vec<ScanEntry>,
}

impl ScanReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.finite && e.stable)
    }
}

type WeightFn = fn(f64, f64) -> f64;

fn weights_for(field: &OpticalField) -> Vec<(KernelTerm, &'static str, WeightFn)> {
    let mut w: Vec<(KernelTerm, &'static str, WeightFn)> = Vec::new();
    match field.dim {
        Dim::Two => {
            w.push((KernelTerm::Gamma1, "sqrt(tau^2 - t0^2)", |tau, t0| (tau * tau - t0 * t0).sqrt()));
            if matches!(field.support, SupportMode::H2 { .. }) {
                w.push((KernelTerm::Gamma1, "(tau - t0)^(1/2)", |tau, t0| (tau - t0).sqrt()));
            }
            w.push((KernelTerm::Gamma2, "1", |_, _| 1.0));
        }
        Dim::Three => {
            w.push((KernelTerm::Gamma1, "tau t0 / ln((tau + t0)/(tau - t0))", |tau, t0| {
                tau * t0 / ((tau + t0) / (tau - t0)).ln()
            }));
            if matches!(field.support, SupportMode::H2 { .. }) {
                w.push((KernelTerm::Gamma1, "(tau - t0)^0", |_, _| 1.0));
            }
        }
    }
    w
}

struct ScanPoint {
    chord: Chord,
    tau: f64,
    level: usize,
}

fn scan_points(grid: &ScanGrid) -> Vec<ScanPoint> {
    let top = grid.levels.max(1) - 1;
    let n_ang = grid.base_angles.max(1) << top;
    let n_off = (grid.base_offsets.max(1) << top) + 1;
    let ratio = 10f64.powf(-1.0 / grid.per_decade.max(1) as f64);
    let mut eps = vec![];
    let mut e = grid.eps_max;
    let finest = grid.eps_min * 10f64.powi(-(top as i32));
    while e >= finest * (1.0 - 1e-9) {
        eps.push(e);
        e *= ratio;
    }
    let eps_level = |e: f64| (0..=top).find(|l| e >= grid.eps_min * 10f64.powi(-(*l as i32)) * (1.0 - 1e-9)).unwrap_or(top);
    let index_level = |i: usize| (0..=top).find(|l| i.is_multiple_of(1usize << (top - l))).unwrap_or(top);
    let mut pts = Vec::new();
    for i in 0..n_ang {
        let a = 2.0 * PI * i as f64 / n_ang as f64;
        for j in 0..n_off {
            let q = -grid.q_max + 2.0 * grid.q_max * j as f64 / (n_off - 1) as f64;
            let chord = match Chord::from_line(a, q) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let lc = index_level(i).max(index_level(j));
            for &e in &eps {
                pts.push(ScanPoint { chord, tau: chord.length + e, level: lc.max(eps_level(e)) });
            }
        }
    }
    pts
}

/// Sup of the singular weights times gamma1 (and gamma2, n = 2) over nested
/// grids; the pass condition is a finite sup whose relative change between
/// the two finest levels is within `stability_tol`.
pub fn weighted_bound_scan(field: &OpticalField, grid: &ScanGrid) -> ScanReport {
    let levels = grid.levels.max(1);
    let pts = scan_points(grid);
    let weights = weights_for(field);
    let needs_g2 = grid.include_gamma2 && field.dim == Dim::Two;
    let values: Vec<(f64, f64)> = pts
        .par_iter()
        .map(|p| {
            let g1 = gamma1_points(field, p.tau, &p.chord.source, &p.chord.detector, &grid.quadrature).value;
            let g2 = if needs_g2 {
                gamma2_points(field, p.tau, &p.chord.source, &p.chord.detector, &grid.gamma2_quadrature)
            } else {
                0.0
            };
            (g1, g2)
        })
        .collect();
    let mut entries = Vec::new();
    for (term, label, wf) in weights {
        if term == KernelTerm::Gamma2 && !needs_g2 {
            continue;
        }
        let mut sups = vec![0.0f64; levels];
        let mut finite = true;
        for (p, (g1, g2)) in pts.iter().zip(&values) {
            let g = if term == KernelTerm::Gamma1 { *g1 } else { *g2 };
            let v = wf(p.tau, p.chord.length) * g;
            if !v.is_finite() {
                finite = false;
                continue;
            }
            for s in sups.iter_mut().skip(p.level) {
                *s = s.max(v.abs());
            }
        }
        let (a, b) = if levels >= 2 { (sups[levels - 2], sups[levels - 1]) } else { (sups[0], sups[0]) };
        let rel = if b == 0.0 && a == 0.0 { 0.0 } else { (b - a).abs() / a.abs().max(b.abs()) };
        entries.push(ScanEntry {
            term,
            weight: label.to_string(),
            level_sups: sups,
            relative_change: rel,
            finite,
            stable: finite && rel <= grid.stability_tol,
        });
    }
    ScanReport { entries }
}
