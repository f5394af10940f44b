//! Inverse pipeline: ballistic amplitudes give exp(-P sigma), the
//! single-scatter front coefficients give the weighted X-ray transform of
//! k0, and both are inverted slice by slice with filtered backprojection.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryPoint, Chord, Dim, Vec3};
use crate::kernels::{ballistic_geometry, gamma1, KernelQuadrature, Singularity};
use crate::optics::{AngularProfile, OpticalField, PhaseFunction, Phantom, SupportMode};
use crate::quadrature::{gauss_legendre, integrate, Tolerance};
use crate::transport::{
    albedo_matrix, log_spaced, path_nodes, sample_singular_front, Acquisition, Channel, MeasurementSet,
    OperatorMethod, Provenance, SingularSamples, SourcePulse, SynthesisSettings, TimeGrid,
};
use crate::xray::{boundary_pairs_to_sinogram, fbp_invert, Image, PairData, Sinogram};

/// The parts of the optics assumed known: dimension, g, S, W and the support regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownOptics {
    pub dim: Dim,
    pub phase: PhaseFunction,
    pub support: SupportMode,
    pub source: AngularProfile,
    pub detector: AngularProfile,
}

impl KnownOptics {
    pub fn of(field: &OpticalField) -> Self {
        KnownOptics {
            dim: field.dim,
            phase: field.phase.clone(),
            support: field.support,
            source: field.source.clone(),
            detector: field.detector.clone(),
        }
    }

    fn vacuum(&self) -> OpticalField {
        OpticalField {
            dim: self.dim,
            sigma: Phantom::zero(),
            k0: Phantom::zero(),
            phase: self.phase.clone(),
            support: self.support,
            source: self.source.clone(),
            detector: self.detector.clone(),
        }
    }

    /// Leading behavior of gamma1 at the front.
    pub fn singularity(&self) -> Singularity {
        front_singularity(self.dim, self.support)
    }

    /// Radius of the ball outside of which k0 is known to vanish.
    pub fn support_radius(&self) -> f64 {
        match self.support {
            SupportMode::H1 => 1.0,
            SupportMode::H2 { delta } => 1.0 - delta,
        }
    }

    /// C / (E P_w k_v0): the known factor of the front coefficient.
    pub fn front_prefactor(&self, chord: &Chord) -> f64 {
        let t0 = chord.length;
        let geom = ballistic_geometry(&self.vacuum(), chord) * t0.powi(self.dim.n() as i32 - 1);
        match (self.dim, self.support) {
            (Dim::Two, _) => (2.0 / t0).sqrt() * geom,
            (Dim::Three, SupportMode::H2 { .. }) => 2.0 * PI / t0 * geom,
            (Dim::Three, SupportMode::H1) => 2.0 * PI / (t0 * t0) * geom,
        }
    }

    /// The ballistic amplitude divided by E.
    pub fn ballistic_factor(&self, chord: &Chord) -> f64 {
        ballistic_geometry(&self.vacuum(), chord)
    }

    fn g_forward(&self, chord: &Chord) -> f64 {
        self.phase.eval(self.dim, &chord.direction, &chord.direction)
    }
}

pub fn front_singularity(dim: Dim, support: SupportMode) -> Singularity {
    match (dim, support) {
        (Dim::Two, _) => Singularity::Power { exponent: -0.5 },
        (Dim::Three, SupportMode::H2 { .. }) => Singularity::Power { exponent: 0.0 },
        (Dim::Three, SupportMode::H1) => Singularity::Log,
    }
}

/// Model functions of the front fit; the first is the leading term.
fn front_basis(s: Singularity, eps: f64) -> [f64; 3] {
    match s {
        Singularity::Power { exponent } if exponent < 0.0 => [1.0 / eps.sqrt(), 1.0, eps.sqrt()],
        Singularity::Power { .. } => [1.0, eps.sqrt(), eps],
        Singularity::Log => [(1.0 / eps).ln(), 1.0, eps.sqrt()],
    }
}

/// Range of tau - t0 used by a front fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub eps1: f64,
    pub eps2: f64,
}

impl FitWindow {
    /// Default window for binned traces: bins whose upper edge lies in
    /// (t0 + eps1, t0 + eps2 + eta] with eps1 = 0, eps2 = 0.05 t0. The model is
    /// integrated against the pulse and the bins, so the bins at the front
    /// are usable.
    pub fn for_trace(t0: f64) -> Self {
        FitWindow { eps1: 0.0, eps2: 0.05 * t0 }
    }
}

/// Least-squares estimate of the leading coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontFit {
    pub coefficient: f64,
    /// Standard error of the coefficient from the fit residuals (or the
    /// data errors when given).
    pub coefficient_se: f64,
    /// Weighted RMS residual relative to the weighted RMS data.
    pub residual: f64,
    pub points: usize,
}

/// Weighted linear least squares; returns coefficients, their standard
/// errors and the relative residual.
fn weighted_lstsq(rows: &[[f64; 3]], y: &[f64], w: &[f64], absolute_errors: bool) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let m = rows.len();
    if m < 3 {
        return None;
    }
    // Columns are scaled to unit norm for conditioning.
    let mut a = DMatrix::<f64>::zeros(m, 3);
    let mut b = DVector::<f64>::zeros(m);
    for (i, (r, yi)) in rows.iter().zip(y).enumerate() {
        let sw = w[i].sqrt();
        for j in 0..3 {
            a[(i, j)] = r[j] * sw;
        }
        b[i] = yi * sw;
    }
    let scale: Vec<f64> = (0..3).map(|j| a.column(j).norm().max(1e-300)).collect();
    for j in 0..3 {
        let s = scale[j];
        a.column_mut(j).iter_mut().for_each(|x| *x /= s);
    }
    let svd = a.clone().svd(true, true);
    let x = svd.solve(&b, 1e-14).ok()?;
    let r = &b - &a * &x;
    let rss = r.norm_squared();
    let rel = if b.norm() > 0.0 { (rss / b.norm_squared()).sqrt() } else { 0.0 };
    let ata = a.transpose() * &a;
    let cov = ata.pseudo_inverse(1e-14).ok()?;
    let s2 = if absolute_errors { 1.0 } else if m > 3 { rss / (m - 3) as f64 } else { 0.0 };
    let coef = (0..3).map(|j| x[j] / scale[j]).collect();
    let se = (0..3).map(|j| (cov[(j, j)] * s2).max(0.0).sqrt() / scale[j]).collect();
    Some((coef, se, rel))
}

/// Fit of gamma samples at tau = t0 + eps to the front model (leading term
/// plus two corrections), each sample weighted by the inverse square of the
/// leading term so that all offsets count equally.
pub fn fit_front_samples(eps: &[f64], values: &[f64], singularity: Singularity) -> Result<FrontFit> {
    if eps.len() != values.len() {
        return Err(Error::Mismatch("offsets and values differ in length".into()));
    }
    let rows: Vec<[f64; 3]> = eps.iter().map(|e| front_basis(singularity, *e)).collect();
    let w: Vec<f64> = rows.iter().map(|r| 1.0 / (r[0] * r[0])).collect();
    let (c, se, rel) = weighted_lstsq(&rows, values, &w, false)
        .ok_or_else(|| Error::InvalidParameter("front fit needs at least 3 distinct offsets".into()))?;
    Ok(FrontFit { coefficient: c[0], coefficient_se: se[0], residual: rel, points: eps.len() })
}

/// Front fit on a binned scattered trace (ballistic part removed). The model
/// functions are integrated against the pulse and the bins before fitting.
pub fn extract_single_scatter_coeff(
    trace: &[f64],
    stderr: Option<&[f64]>,
    pulse: &SourcePulse,
    time: &TimeGrid,
    t0: f64,
    singularity: Singularity,
    window: FitWindow,
) -> Result<(FrontFit, FitWindow)> {
    if trace.len() != time.n_bins {
        return Err(Error::Mismatch("trace length differs from the time grid".into()));
    }
    let mut window = window;
    let pick = |w: &FitWindow| -> Vec<usize> {
        (0..time.n_bins)
            .filter(|&b| {
                let hi = time.bin_start(b) + time.dt;
                hi > t0 + w.eps1 && hi <= t0 + w.eps2 + pulse.eta + 1e-12
            })
            .collect()
    };
    let mut bins = pick(&window);
    while bins.len() < 5 && t0 + window.eps2 < time.end() {
        window.eps2 += time.dt;
        bins = pick(&window);
    }
    if bins.len() < 3 {
        return Err(Error::InvalidParameter(format!("front window at t0 = {t0} holds fewer than 3 bins")));
    }
    let tau_max = time.bin_start(*bins.last().unwrap()) + time.dt;
    let nodes = path_nodes(pulse, time, t0, 4);
    let mut rows = vec![[0.0; 3]; bins.len()];
    for (tau, w) in nodes.into_iter().filter(|(t, _)| *t <= tau_max) {
        let f = front_basis(singularity, tau - t0);
        for (row, &b) in rows.iter_mut().zip(&bins) {
            let bw = pulse.bin_weight(time, b, tau);
            if bw != 0.0 {
                for j in 0..3 {
                    row[j] += w * f[j] * bw;
                }
            }
        }
    }
    let y: Vec<f64> = bins.iter().map(|&b| trace[b]).collect();
    let (w, absolute) = match stderr {
        Some(se) => {
            let floor = 1e-9 * y.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            (bins.iter().map(|&b| 1.0 / (se[b] * se[b] + floor * floor)).collect::<Vec<_>>(), true)
        }
        None => (vec![1.0; bins.len()], false),
    };
    let (c, se, rel) = weighted_lstsq(&rows, &y, &w, absolute)
        .ok_or_else(|| Error::InvalidParameter("degenerate front fit".into()))?;
    Ok((FrontFit { coefficient: c[0], coefficient_se: se[0], residual: rel, points: bins.len() }, window))
}

/// Ballistic amplitude and arrival time of one trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallisticFit {
    pub amplitude: f64,
    pub t0: f64,
    /// No peak above the noise floor; the amplitude is reported as 0.
    pub flagged: bool,
}

/// Matched filter: correlates the trace with the bin-averaged pulse shifted
/// to arrival times within one bin of `t0_nominal` and returns the best
/// shift with amplitude = correlation / pulse energy.
pub fn extract_ballistic(
    trace: &[f64],
    stderr: Option<&[f64]>,
    pulse: &SourcePulse,
    time: &TimeGrid,
    t0_nominal: f64,
) -> BallisticFit {
    let mut best = BallisticFit { amplitude: 0.0, t0: t0_nominal, flagged: true };
    let mut best_score = f64::NEG_INFINITY;
    let steps = 40;
    for k in 0..=steps {
        let t0 = t0_nominal - time.dt + 2.0 * time.dt * k as f64 / steps as f64;
        let (mut num, mut den, mut var) = (0.0, 0.0, 0.0);
        for b in pulse.bin_range(time, t0) {
            let w = pulse.bin_weight(time, b, t0);
            num += w * trace[b];
            den += w * w;
            if let Some(se) = stderr {
                var += (w * se[b]).powi(2);
            }
        }
        if den == 0.0 {
            continue;
        }
        let score = num / den.sqrt();
        if score > best_score {
            best_score = score;
            let amp = num / den;
            let noise = var.sqrt() / den;
            let flagged = !(amp > 3.0 * noise) || amp <= 1e-300;
            best = BallisticFit { amplitude: if flagged { 0.0 } else { amp }, t0, flagged };
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallisticMode {
    /// Use the symbolic ballistic pulses carried with the data.
    Symbolic,
    MatchedFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSettings {
    pub n_angles: usize,
    pub n_offsets: usize,
    pub image_size: usize,
    /// Pixels with |y| above this are masked in the division by rho.
    pub rho_mask: f64,
    /// Radius of the disc on which sigma errors are reported.
    pub sigma_error_radius: f64,
    pub ballistic: BallisticMode,
    /// Trace fit window; `None` uses `FitWindow::for_trace`.
    pub window: Option<FitWindow>,
    /// Fits with a larger relative residual are rejected.
    pub max_residual: f64,
    /// E estimates above 1 + this are flagged and excluded.
    pub e_tolerance: f64,
    /// E estimates below this exclude the chord from the k0 stage.
    pub e_floor: f64,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            n_angles: 180,
            n_offsets: 256,
            image_size: 128,
            rho_mask: 0.95,
            sigma_error_radius: 0.9,
            ballistic: BallisticMode::Symbolic,
            window: None,
            max_residual: 0.25,
            e_tolerance: 1e-3,
            e_floor: 1e-6,
        }
    }
}

/// Measured front of one chord.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularFit {
    pub source: usize,
    pub detector: usize,
    pub t0: f64,
    pub t0_estimate: f64,
    pub amplitude: f64,
    pub singularity: Singularity,
    pub coefficient: f64,
    pub coefficient_se: f64,
    pub window: FitWindow,
    pub residual: f64,
    pub points: usize,
    pub accepted: bool,
}

/// Per-chord stage results.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChordRecord {
    pub source: usize,
    pub detector: usize,
    pub t0: f64,
    pub ballistic: BallisticFit,
    /// Estimated E, when usable.
    pub e_hat: Option<f64>,
    /// Front fit; `None` for chords that miss the scattering support or when
    /// the k0 stage does not apply.
    pub fit: Option<SingularFit>,
}

/// One reconstructed slice z = const, stored on the unit disc: pixel u maps to
/// the point (radius * u, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub z: f64,
    pub radius: f64,
    pub image: Image,
}

impl SliceImage {
    fn point(&self, u: &Vec3) -> Vec3 {
        Vec3::new(self.radius * u.x, self.radius * u.y, self.z)
    }

    /// Value at a physical point of the slice plane.
    pub fn value_at(&self, y: &Vec3) -> f64 {
        self.image.sample(&Vec3::new(y.x / self.radius, y.y / self.radius, 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySum {
    pub source: usize,
    pub detector: usize,
    /// k0(x) + k0(x').
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub sigma_relative_l2: Option<f64>,
    pub k0_relative_l2: Option<f64>,
    pub sigma_radius: f64,
    pub k0_radius: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub chords: usize,
    pub ballistic_flagged: usize,
    pub e_excluded: usize,
    pub fits: usize,
    pub fits_rejected: usize,
    pub rebin_gaps: usize,
    pub masked_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub dim: Dim,
    pub support: SupportMode,
    pub sigma: Vec<SliceImage>,
    pub k0: Option<Vec<SliceImage>>,
    /// n = 3 H1: boundary sums k0(x) + k0(x') per chord instead of an image.
    pub boundary_sums: Option<Vec<BoundarySum>>,
    /// -ln E sinograms per slice.
    pub sigma_sinograms: Vec<Sinogram>,
    /// P(rho k0) sinograms per slice.
    pub k0_sinograms: Option<Vec<Sinogram>>,
    pub chords: Vec<ChordRecord>,
    pub counts: StageCounts,
    pub errors: Option<ErrorNorms>,
}

/// Slices of an acquisition: node ids of each ring in angular order.
struct Ring {
    z: f64,
    radius: f64,
    nodes: Vec<usize>,
}

fn rings_of(acq: &Acquisition) -> Result<Vec<Ring>> {
    let groups: Vec<Vec<usize>> = match (&acq.rings, acq.dim) {
        (None, Dim::Two) => vec![(0..acq.nodes.len()).collect()],
        (Some(labels), _) => {
            let k = labels.iter().copied().max().map_or(0, |m| m + 1);
            let mut g = vec![Vec::new(); k];
            for (i, l) in labels.iter().enumerate() {
                g[*l].push(i);
            }
            g
        }
        (None, Dim::Three) => {
            return Err(Error::Mismatch("n = 3 reconstruction needs a ring acquisition".into()));
        }
    };
    let mut out = Vec::new();
    for nodes in groups.into_iter().filter(|g| !g.is_empty()) {
        let z = acq.nodes[nodes[0]].position.z;
        let radius = (1.0 - z * z).max(0.0).sqrt();
        let m = nodes.len();
        for (i, id) in nodes.iter().enumerate() {
            let p = acq.nodes[*id].position;
            let a = 2.0 * PI * i as f64 / m as f64;
            let want = Vec3::new(radius * a.cos(), radius * a.sin(), z);
            if (p - want).norm() > 1e-9 {
                return Err(Error::Mismatch("rebinning needs equally spaced nodes on each ring".into()));
            }
        }
        out.push(Ring { z, radius, nodes });
    }
    Ok(out)
}

/// Ballistic stage and chord bookkeeping for binned measurements.
pub fn chord_records_from_measurements(
    ms: &MeasurementSet,
    known: &KnownOptics,
    settings: &ReconSettings,
) -> Result<Vec<ChordRecord>> {
    ms.check()?;
    let acq = &ms.acquisition;
    if acq.dim != known.dim {
        return Err(Error::Mismatch("data and optics dimensions differ".into()));
    }
    let mut jobs = Vec::new();
    for (si, &s) in acq.sources.iter().enumerate() {
        for (di, &d) in acq.detectors.iter().enumerate() {
            if acq.pair_active(s, d) {
                jobs.push((si, di, s, d));
            }
        }
    }
    jobs.par_iter()
        .map(|&(si, di, s, d)| {
            let chord = Chord::from_endpoints(&acq.nodes[s], &acq.nodes[d])?;
            let t0 = chord.length;
            let total = ms.trace(Channel::Total, si, di).expect("checked");
            let ballistic = match (settings.ballistic, ms.ballistic_for(s, d)) {
                (BallisticMode::Symbolic, Some(p)) => {
                    BallisticFit { amplitude: p.amplitude, t0: p.arrival_time, flagged: !(p.amplitude > 0.0) }
                }
                (BallisticMode::Symbolic, None) => {
                    return Err(Error::Mismatch(format!("missing ballistic channel for pair ({s}, {d})")));
                }
                (BallisticMode::MatchedFilter, _) => {
                    extract_ballistic(total, ms.trace_stderr(Channel::Total, si, di), &ms.pulse, &acq.time, t0)
                }
            };
            let e_hat = e_estimate(known, &chord, &ballistic, settings);
            let fit = if chord.offset.norm() < known.support_radius() {
                let scattered: Vec<f64> = match ms.scattered_trace(si, di) {
                    Some(v) => v,
                    None => {
                        // No order split: remove the fitted ballistic pulse.
                        let mut v = total.to_vec();
                        ms.pulse.deposit(&acq.time, ballistic.t0, -ballistic.amplitude, &mut v);
                        v
                    }
                };
                let se = ms.trace_stderr(Channel::Total, si, di);
                let window = settings.window.unwrap_or_else(|| FitWindow::for_trace(t0));
                let sing = known.singularity();
                Some(match extract_single_scatter_coeff(&scattered, se, &ms.pulse, &acq.time, t0, sing, window) {
                    Ok((f, w)) => SingularFit {
                        source: s,
                        detector: d,
                        t0,
                        t0_estimate: ballistic.t0,
                        amplitude: ballistic.amplitude,
                        singularity: sing,
                        coefficient: f.coefficient,
                        coefficient_se: f.coefficient_se,
                        window: w,
                        residual: f.residual,
                        points: f.points,
                        accepted: f.residual <= settings.max_residual,
                    },
                    Err(_) => rejected_fit(s, d, t0, &ballistic, sing, window),
                })
            } else {
                None
            };
            Ok(ChordRecord { source: s, detector: d, t0, ballistic, e_hat, fit })
        })
        .collect()
}

fn rejected_fit(s: usize, d: usize, t0: f64, b: &BallisticFit, sing: Singularity, window: FitWindow) -> SingularFit {
    SingularFit {
        source: s,
        detector: d,
        t0,
        t0_estimate: b.t0,
        amplitude: b.amplitude,
        singularity: sing,
        coefficient: f64::NAN,
        coefficient_se: f64::NAN,
        window,
        residual: f64::INFINITY,
        points: 0,
        accepted: false,
    }
}

fn e_estimate(known: &KnownOptics, chord: &Chord, b: &BallisticFit, settings: &ReconSettings) -> Option<f64> {
    if b.flagged {
        return None;
    }
    let f = known.ballistic_factor(chord);
    if !(f > 0.0) {
        return None;
    }
    let e = b.amplitude / f;
    (e > 0.0 && e <= 1.0 + settings.e_tolerance).then(|| e.min(1.0))
}

/// Ballistic stage and front fits for noiseless kernel samples.
pub fn chord_records_from_samples(
    data: &SingularSamples,
    known: &KnownOptics,
    settings: &ReconSettings,
) -> Result<Vec<ChordRecord>> {
    let acq = &data.acquisition;
    if acq.dim != known.dim {
        return Err(Error::Mismatch("data and optics dimensions differ".into()));
    }
    let n = acq.nodes.len();
    if data.pairs.iter().any(|p| p.source >= n || p.detector >= n || p.values.len() != data.eps.len()) {
        return Err(Error::Mismatch("samples do not match the acquisition".into()));
    }
    let sing = known.singularity();
    let window = FitWindow {
        eps1: data.eps.iter().copied().fold(f64::INFINITY, f64::min),
        eps2: data.eps.iter().copied().fold(0.0, f64::max),
    };
    data.pairs
        .par_iter()
        .map(|p| {
            let chord = Chord::from_endpoints(&acq.nodes[p.source], &acq.nodes[p.detector])?;
            let t0 = chord.length;
            let ballistic =
                BallisticFit { amplitude: p.ballistic.amplitude, t0: p.ballistic.arrival_time, flagged: !(p.ballistic.amplitude > 0.0) };
            let e_hat = e_estimate(known, &chord, &ballistic, settings);
            let fit = if chord.offset.norm() < known.support_radius() {
                let f = fit_front_samples(&data.eps, &p.values, sing)?;
                Some(SingularFit {
                    source: p.source,
                    detector: p.detector,
                    t0,
                    t0_estimate: t0,
                    amplitude: ballistic.amplitude,
                    singularity: sing,
                    coefficient: f.coefficient,
                    coefficient_se: f.coefficient_se,
                    window,
                    residual: f.residual,
                    points: f.points,
                    accepted: f.residual <= settings.max_residual,
                })
            } else {
                None
            };
            Ok(ChordRecord { source: p.source, detector: p.detector, t0, ballistic, e_hat, fit })
        })
        .collect()
}

/// -ln E image from the chord records.
pub fn sigma_from_ballistic(
    acq: &Acquisition,
    records: &[ChordRecord],
    settings: &ReconSettings,
) -> Result<(Vec<SliceImage>, Vec<Sinogram>, usize)> {
    invert_chord_values(acq, records, settings, |r| r.e_hat.map(|e| -e.ln()))
}

/// Sinogram and image per ring of the chord values `value(record)` (line
/// integrals of some function), with both orientations filled.
fn invert_chord_values<F: Fn(&ChordRecord) -> Option<f64> + Sync>(
    acq: &Acquisition,
    records: &[ChordRecord],
    settings: &ReconSettings,
    value: F,
) -> Result<(Vec<SliceImage>, Vec<Sinogram>, usize)> {
    let rings = rings_of(acq)?;
    let mut pos = vec![(usize::MAX, 0usize); acq.nodes.len()];
    for (k, r) in rings.iter().enumerate() {
        for (i, id) in r.nodes.iter().enumerate() {
            pos[*id] = (k, i);
        }
    }
    let mut data: Vec<PairData> = rings.iter().map(|r| PairData::new(r.nodes.len())).collect();
    for rec in records {
        let ((ks, is), (kd, id)) = (pos[rec.source], pos[rec.detector]);
        if ks != kd || ks == usize::MAX {
            continue;
        }
        if let Some(v) = value(rec) {
            // Line integral over the physical chord = radius * integral over the unit-disc chord.
            let v = v / rings[ks].radius;
            data[ks].set(is, id, v);
            if !data[ks].get(id, is).is_finite() {
                data[ks].set(id, is, v);
            }
        }
    }
    let mut slices = Vec::new();
    let mut sinos = Vec::new();
    let mut gaps = 0;
    for (ring, d) in rings.iter().zip(&data) {
        let (sino, rep) = boundary_pairs_to_sinogram(d, settings.n_angles, settings.n_offsets);
        gaps += rep.gaps;
        let mut image = fbp_invert(&sino, settings.image_size)?;
        image.clamp_nonnegative();
        slices.push(SliceImage { z: ring.z, radius: ring.radius, image });
        sinos.push(sino);
    }
    Ok((slices, sinos, gaps))
}

/// k0 from the front coefficients: P(rho k0) = C / (prefactor E g(v0, v0))
/// per chord, then FBP and division by rho inside the mask radius.
pub fn k0_from_single_scatter(
    acq: &Acquisition,
    records: &[ChordRecord],
    known: &KnownOptics,
    settings: &ReconSettings,
) -> Result<(Vec<SliceImage>, Vec<Sinogram>, usize, usize)> {
    let support = known.support_radius();
    let value = |r: &ChordRecord| -> Option<f64> {
        let chord = Chord::from_endpoints(&acq.nodes[r.source], &acq.nodes[r.detector]).ok()?;
        if chord.offset.norm() >= support {
            return Some(0.0);
        }
        let fit = r.fit?;
        let e = r.e_hat?;
        if !fit.accepted || e < settings.e_floor {
            return None;
        }
        let pref = known.front_prefactor(&chord) * e * known.g_forward(&chord);
        (pref > 1e-12).then(|| fit.coefficient / pref)
    };
    let (mut slices, sinos, gaps) = invert_chord_values(acq, records, settings, value)?;
    let n = known.dim.n() as i32;
    let mut masked = 0;
    for s in &mut slices {
        let img = &mut s.image;
        for j in 0..img.n {
            for i in 0..img.n {
                let u = img.pixel(i, j);
                let y = Vec3::new(s.radius * u.x, s.radius * u.y, s.z);
                let r2 = y.norm_squared();
                let k = j * img.n + i;
                if u.norm_squared() >= 1.0 {
                    img.values[k] = 0.0;
                } else if r2.sqrt() > settings.rho_mask {
                    img.values[k] = 0.0;
                    masked += 1;
                } else {
                    img.values[k] *= (1.0 - r2).powf(0.5 * (n - 1) as f64);
                }
            }
        }
        img.clamp_nonnegative();
    }
    Ok((slices, sinos, gaps, masked))
}

fn boundary_sums(records: &[ChordRecord], acq: &Acquisition, known: &KnownOptics, settings: &ReconSettings) -> Vec<BoundarySum> {
    records
        .iter()
        .filter_map(|r| {
            let chord = Chord::from_endpoints(&acq.nodes[r.source], &acq.nodes[r.detector]).ok()?;
            let fit = r.fit?;
            let e = r.e_hat?;
            if !fit.accepted || e < settings.e_floor {
                return None;
            }
            let pref = known.front_prefactor(&chord) * e * known.g_forward(&chord);
            (pref > 1e-12).then(|| BoundarySum { source: r.source, detector: r.detector, value: fit.coefficient / pref })
        })
        .collect()
}

/// Runs both stages on chord records.
pub fn assemble_report(
    acq: &Acquisition,
    records: Vec<ChordRecord>,
    known: &KnownOptics,
    settings: &ReconSettings,
) -> Result<ReconReport> {
    let mut counts = StageCounts {
        chords: records.len(),
        ballistic_flagged: records.iter().filter(|r| r.ballistic.flagged).count(),
        e_excluded: records.iter().filter(|r| r.e_hat.is_none()).count(),
        fits: records.iter().filter(|r| r.fit.is_some()).count(),
        fits_rejected: records.iter().filter(|r| r.fit.is_some_and(|f| !f.accepted)).count(),
        ..StageCounts::default()
    };
    let (sigma, sigma_sinograms, gaps) = sigma_from_ballistic(acq, &records, settings)?;
    counts.rebin_gaps += gaps;
    let log_front = known.dim == Dim::Three && known.support == SupportMode::H1;
    let (k0, k0_sinograms, sums) = if log_front {
        (None, None, Some(boundary_sums(&records, acq, known, settings)))
    } else {
        let (img, sino, gaps, masked) = k0_from_single_scatter(acq, &records, known, settings)?;
        counts.rebin_gaps += gaps;
        counts.masked_pixels = masked;
        (Some(img), Some(sino), None)
    };
    Ok(ReconReport {
        dim: known.dim,
        support: known.support,
        sigma,
        k0,
        boundary_sums: sums,
        sigma_sinograms,
        k0_sinograms,
        chords: records,
        counts,
        errors: None,
    })
}

pub fn reconstruct_measurements(ms: &MeasurementSet, known: &KnownOptics, settings: &ReconSettings) -> Result<ReconReport> {
    rings_of(&ms.acquisition)?;
    let records = chord_records_from_measurements(ms, known, settings)?;
    assemble_report(&ms.acquisition, records, known, settings)
}

pub fn reconstruct_samples(data: &SingularSamples, known: &KnownOptics, settings: &ReconSettings) -> Result<ReconReport> {
    rings_of(&data.acquisition)?;
    let records = chord_records_from_samples(data, known, settings)?;
    assemble_report(&data.acquisition, records, known, settings)
}

/// Relative L2 error over the slice pixels with |y| < radius.
fn slices_relative_l2<F: Fn(&Vec3) -> f64>(slices: &[SliceImage], truth: F, radius: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for s in slices {
        let area = s.radius * s.radius;
        let img = &s.image;
        for j in 0..img.n {
            for i in 0..img.n {
                let u = img.pixel(i, j);
                if u.norm_squared() >= 1.0 {
                    continue;
                }
                let y = s.point(&u);
                if y.norm() < radius {
                    let t = truth(&y);
                    num += area * (img.get(i, j) - t).powi(2);
                    den += area * t * t;
                }
            }
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

impl ReconReport {
    /// Adds relative L2 errors against a known field: sigma on |y| < the
    /// configured radius, k0 on the support region Z.
    pub fn score(&mut self, truth: &OpticalField, settings: &ReconSettings) {
        let z_radius = match truth.support {
            SupportMode::H1 => settings.sigma_error_radius,
            SupportMode::H2 { delta } => 1.0 - delta,
        };
        self.errors = Some(ErrorNorms {
            sigma_relative_l2: Some(slices_relative_l2(&self.sigma, |y| truth.sigma_at(y), settings.sigma_error_radius)),
            k0_relative_l2: self.k0.as_ref().map(|k| slices_relative_l2(k, |y| truth.k0_at(y), z_radius)),
            sigma_radius: settings.sigma_error_radius,
            k0_radius: z_radius,
        });
    }

    /// Writes image_*.csv, sinogram_*.csv and report.json into `dir`.
    pub fn write_dir(&self, dir: &Path, provenance: &Provenance) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let suffix = |k: usize| if self.sigma.len() == 1 { String::new() } else { format!("_{k}") };
        for (k, s) in self.sigma.iter().enumerate() {
            s.image.write_csv(BufWriter::new(File::create(dir.join(format!("image_sigma{}.csv", suffix(k))))?))?;
        }
        for (k, s) in self.sigma_sinograms.iter().enumerate() {
            s.write_csv(BufWriter::new(File::create(dir.join(format!("sinogram_sigma{}.csv", suffix(k))))?))?;
        }
        if let Some(k0) = &self.k0 {
            for (k, s) in k0.iter().enumerate() {
                s.image.write_csv(BufWriter::new(File::create(dir.join(format!("image_k0{}.csv", suffix(k))))?))?;
            }
        }
        if let Some(sinos) = &self.k0_sinograms {
            for (k, s) in sinos.iter().enumerate() {
                s.write_csv(BufWriter::new(File::create(dir.join(format!("sinogram_k0{}.csv", suffix(k))))?))?;
            }
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            provenance: &'a Provenance,
            dim: Dim,
            support: SupportMode,
            slices: Vec<(f64, f64)>,
            has_k0_image: bool,
            boundary_sums: &'a Option<Vec<BoundarySum>>,
            counts: &'a StageCounts,
            errors: &'a Option<ErrorNorms>,
            fits: Vec<&'a SingularFit>,
        }
        let summary = Summary {
            provenance,
            dim: self.dim,
            support: self.support,
            slices: self.sigma.iter().map(|s| (s.z, s.radius)).collect(),
            has_k0_image: self.k0.is_some(),
            boundary_sums: &self.boundary_sums,
            counts: &self.counts,
            errors: &self.errors,
            fits: self.chords.iter().filter_map(|c| c.fit.as_ref()).collect(),
        };
        let mut f = BufWriter::new(File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

/// Settings of the stability diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySettings {
    /// Boundary nodes of the discrete operator (sources are a subset).
    pub nodes: usize,
    pub sources: Vec<usize>,
    pub dt: f64,
    pub horizon: f64,
    /// Kernel order of the discrete operator.
    pub order: usize,
    pub synthesis: SynthesisSettings,
    pub memory_budget: usize,
    /// Chords (line angles x offsets) and front offsets for the
    /// single-scatter comparison; zero chords skips it.
    pub front_angles: usize,
    pub front_offsets: usize,
    pub front_eps: Vec<f64>,
    pub quadrature: KernelQuadrature,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        StabilitySettings {
            nodes: 32,
            sources: (0..32).step_by(2).collect(),
            dt: 0.05,
            horizon: 2.2,
            order: 2,
            synthesis: SynthesisSettings::default(),
            memory_budget: 1 << 30,
            front_angles: 0,
            front_offsets: 0,
            front_eps: log_spaced(1e-7, 1e-4, 6),
            quadrature: KernelQuadrature::default(),
        }
    }
}

/// Single-scatter comparison: sup over chords of |E P_w k - E~ P_w k~| and
/// the weighted sup of gamma1 - gamma1~ over the same chords and offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontComparison {
    pub lhs: f64,
    pub weighted_sup: f64,
    pub ratio: f64,
    pub chords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sources: Vec<usize>,
    /// int |E - E~| geometry dmu(x) for each source node.
    pub ballistic_lhs: Vec<f64>,
    /// Column sums of the discrete |A - A~| for the same sources.
    pub column_norms: Vec<f64>,
    /// Discrete ||A - A~||: the largest column sum.
    pub operator_norm: f64,
    /// ballistic_lhs / operator_norm per source.
    pub ratios: Vec<f64>,
    /// Whether every ballistic LHS is at most the operator norm.
    pub ballistic_bound_holds: bool,
    pub front: Option<FrontComparison>,
}

/// int over the boundary of |E - E~|(x, x') W S (nu.v0)|nu'.v0| / |x - x'|^{n-1} dmu(x).
pub fn ballistic_difference_integral(a: &OpticalField, b: &OpticalField, source: &BoundaryPoint) -> f64 {
    let xs = source.position;
    let integrand = |x: Vec3| -> f64 {
        let Ok(det) = BoundaryPoint::new(x) else { return 0.0 };
        let Ok(chord) = Chord::from_endpoints(source, &det) else { return 0.0 };
        let ea = (-a.sigma.line_integral(&chord.source, &chord.detector)).exp();
        let eb = (-b.sigma.line_integral(&chord.source, &chord.detector)).exp();
        (ea - eb).abs() * ballistic_geometry(a, &chord)
    };
    let tol = Tolerance::new(1e-13, 1e-9).with_budget(2000);
    match a.dim {
        Dim::Two => {
            let a0 = source.angle();
            integrate(|t| integrand(crate::geometry::planar(a0 + t)), 0.0, 2.0 * PI, tol).value
        }
        Dim::Three => {
            // Polar angle th measured from x'; area element sin th.
            let (e1, e2) = crate::geometry::orthonormal_frame(&xs);
            let rule = gauss_legendre(32);
            integrate(
                |th| {
                    let ring: f64 = rule
                        .on_interval(0.0, 2.0 * PI)
                        .map(|(ph, w)| w * integrand(xs * th.cos() + (e1 * ph.cos() + e2 * ph.sin()) * th.sin()))
                        .sum();
                    ring * th.sin()
                },
                0.0,
                PI,
                tol,
            )
            .value
        }
    }
}

/// Stability diagnostics for two fields with the same known optics.
pub fn stability_report(a: &OpticalField, b: &OpticalField, settings: &StabilitySettings) -> Result<StabilityReport> {
    if a.dim != b.dim || a.support != b.support || a.phase != b.phase || a.source != b.source || a.detector != b.detector {
        return Err(Error::Mismatch("stability comparison needs the same dimension, mode, g, S and W".into()));
    }
    let time = TimeGrid::new(settings.dt, settings.horizon)?;
    let acq = Acquisition::full(a.dim, settings.nodes, time)?.with_sources(settings.sources.clone())?;
    let method = OperatorMethod::Kernel { order: settings.order, settings: settings.synthesis };
    let ma = albedo_matrix(a, &acq, &method, settings.memory_budget)?;
    let mb = albedo_matrix(b, &acq, &method, settings.memory_budget)?;
    let column_norms = ma.difference_column_norms(&mb)?;
    let operator_norm = column_norms.iter().copied().fold(0.0, f64::max);
    let ballistic_lhs: Vec<f64> =
        acq.sources.par_iter().map(|s| ballistic_difference_integral(a, b, &acq.nodes[*s])).collect();
    let ratios: Vec<f64> =
        ballistic_lhs.iter().map(|l| if operator_norm > 0.0 { l / operator_norm } else if *l == 0.0 { 0.0 } else { f64::INFINITY }).collect();
    let ballistic_bound_holds = ballistic_lhs.iter().all(|l| *l <= operator_norm);
    let front = if settings.front_angles > 0 && settings.front_offsets > 0 {
        Some(front_comparison(a, b, settings)?)
    } else {
        None
    };
    Ok(StabilityReport { sources: acq.sources.clone(), ballistic_lhs, column_norms, operator_norm, ratios, ballistic_bound_holds, front })
}

fn front_comparison(a: &OpticalField, b: &OpticalField, s: &StabilitySettings) -> Result<FrontComparison> {
    let known = KnownOptics::of(a);
    let sing = known.singularity();
    let r = known.support_radius();
    let mut chords = Vec::new();
    for i in 0..s.front_angles {
        let ang = 2.0 * PI * i as f64 / s.front_angles as f64;
        for j in 0..s.front_offsets {
            let q = -r + 2.0 * r * (j as f64 + 0.5) / s.front_offsets as f64;
            // For n = 3 the chords of the plane z = 0 are used.
            chords.push(Chord::from_line(ang, q)?);
        }
    }
    let weight = |eps: f64| match a.dim {
        Dim::Two => eps.sqrt(),
        Dim::Three => 1.0,
    };
    let per_chord: Vec<(f64, f64)> = chords
        .par_iter()
        .map(|ch| {
            let src = BoundaryPoint { position: ch.source };
            let det = BoundaryPoint { position: ch.detector };
            let mut va = Vec::with_capacity(s.front_eps.len());
            let mut vb = Vec::with_capacity(s.front_eps.len());
            let mut sup = 0.0f64;
            for e in &s.front_eps {
                let ga = gamma1(a, ch.length + e, &src, &det, &s.quadrature)?.value;
                let gb = gamma1(b, ch.length + e, &src, &det, &s.quadrature)?.value;
                sup = sup.max(weight(*e) * (ga - gb).abs());
                va.push(ga);
                vb.push(gb);
            }
            let ca = fit_front_samples(&s.front_eps, &va, sing)?.coefficient;
            let cb = fit_front_samples(&s.front_eps, &vb, sing)?.coefficient;
            let pref = known.front_prefactor(ch);
            let lhs = if pref > 0.0 { (ca - cb).abs() / pref } else { 0.0 };
            Ok((lhs, sup))
        })
        .collect::<Result<_>>()?;
    let lhs = per_chord.iter().map(|p| p.0).fold(0.0, f64::max);
    let weighted_sup = per_chord.iter().map(|p| p.1).fold(0.0, f64::max);
    let ratio = if weighted_sup > 0.0 { lhs / weighted_sup } else { 0.0 };
    Ok(FrontComparison { lhs, weighted_sup, ratio, chords: chords.len() })
}

/// Convenience: noiseless kernel samples near the fronts on a full 2-D grid
/// (or ring acquisition) for the reconstruction pipeline.
pub fn front_samples_for(
    field: &OpticalField,
    acq: &Acquisition,
    eps: &[f64],
    include_gamma2: bool,
    quad: &KernelQuadrature,
) -> Result<SingularSamples> {
    let g2 = crate::kernels::Gamma2Quadrature::coarse();
    sample_singular_front(field, acq, eps, (include_gamma2 && field.dim == Dim::Two).then_some(&g2), quad)
}

#[cfg(test)]
mod tests;
