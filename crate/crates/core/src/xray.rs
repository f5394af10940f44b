//! X-ray and weighted X-ray transforms on the unit disc/ball, parallel-beam
//! sinograms, filtered backprojection, and rebinning of boundary-pair data.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Chord, Dim, Vec3};
use crate::quadrature::{integrate_pieces, Tolerance};

/// Tolerance used for numerically integrated transforms.
pub const XRAY_TOL: Tolerance = Tolerance { abs: 1e-13, rel: 1e-12, max_subdivisions: 2000 };

/// rho(y) = (1 - |y|^2)^{-(n-1)/2}.
pub fn rho_weight(dim: Dim, y: &Vec3) -> Result<f64> {
    let r2 = y.norm_squared();
    if r2 >= 1.0 {
        return Err(Error::OutsideDomain(r2.sqrt()));
    }
    Ok(match dim {
        Dim::Two => 1.0 / (1.0 - r2).sqrt(),
        Dim::Three => 1.0 / (1.0 - r2),
    })
}

/// Initial panels of the line quadratures, so that features much narrower
/// than the chord are sampled.
const LINE_PANELS: usize = 32;

fn panels(a: f64, b: f64) -> Vec<f64> {
    (0..=LINE_PANELS).map(|i| a + (b - a) * i as f64 / LINE_PANELS as f64).collect()
}

/// Half length of the chord: points are offset + t direction, |t| <= c.
fn half_length(chord: &Chord) -> f64 {
    (1.0 - chord.offset.norm_squared()).max(0.0).sqrt()
}

/// Line integral of `f` along the chord (adaptive quadrature).
pub fn xray_transform<F: Fn(&Vec3) -> f64>(f: F, chord: &Chord) -> f64 {
    let c = half_length(chord);
    integrate_pieces(|t| f(&chord.point(t)), &panels(-c, c), XRAY_TOL).value
}

/// Line integral along the planar line with direction angle `angle` and
/// offset `q`; zero for |q| >= 1.
pub fn xray_line<F: Fn(&Vec3) -> f64>(f: F, angle: f64, q: f64) -> f64 {
    match Chord::from_line(angle, q) {
        Ok(ch) => xray_transform(f, &ch),
        Err(_) => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedXray {
    pub value: f64,
    /// n = 3 only: f does not vanish at the chord ends, so the transform
    /// diverges; `value` is then infinite.
    pub divergent: bool,
}

/// int rho(y) f(y) dt along the chord, via t = c sin(theta). For n = 2 the
/// integrand in theta is f itself; for n = 3 it is f / (c cos(theta)).
pub fn weighted_xray<F: Fn(&Vec3) -> f64>(dim: Dim, f: F, chord: &Chord) -> WeightedXray {
    let c = half_length(chord);
    if c == 0.0 {
        return WeightedXray { value: 0.0, divergent: false };
    }
    let at = |th: f64| chord.point(c * th.sin());
    match dim {
        Dim::Two => {
            let r = integrate_pieces(|th| f(&at(th)), &panels(-FRAC_PI_2, FRAC_PI_2), XRAY_TOL);
            WeightedXray { value: r.value, divergent: false }
        }
        Dim::Three => {
            let ends = [chord.point(-c), chord.point(c)];
            if ends.iter().any(|p| f(p) != 0.0) {
                return WeightedXray { value: f64::INFINITY, divergent: true };
            }
            let r = integrate_pieces(
                |th| {
                    let cs = th.cos();
                    if cs <= 0.0 {
                        0.0
                    } else {
                        f(&at(th)) / (c * cs)
                    }
                },
                &panels(-FRAC_PI_2, FRAC_PI_2),
                XRAY_TOL,
            );
            WeightedXray { value: r.value, divergent: false }
        }
    }
}

/// Parallel-beam data: angles a_i = i pi / n_angles, offsets at cell centers
/// q_j = -1 + (j + 1/2) 2 / n_offsets; values row-major by angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    pub n_angles: usize,
    pub n_offsets: usize,
    pub values: Vec<f64>,
    pub weighted: bool,
}

impl Sinogram {
    pub fn zeros(n_angles: usize, n_offsets: usize) -> Self {
        Sinogram { n_angles, n_offsets, values: vec![0.0; n_angles * n_offsets], weighted: false }
    }

    pub fn angle(&self, i: usize) -> f64 {
        PI * i as f64 / self.n_angles as f64
    }

    pub fn offset(&self, j: usize) -> f64 {
        -1.0 + (j as f64 + 0.5) * self.spacing()
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.n_offsets as f64
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_offsets + j]
    }

    /// Samples `g(angle, q)` on the grid.
    pub fn from_fn<G: Fn(f64, f64) -> f64 + Sync>(n_angles: usize, n_offsets: usize, g: G) -> Self {
        let mut s = Sinogram::zeros(n_angles, n_offsets);
        let grid = s.clone();
        s.values.par_iter_mut().enumerate().for_each(|(k, v)| {
            let (i, j) = (k / n_offsets, k % n_offsets);
            *v = g(grid.angle(i), grid.offset(j));
        });
        s
    }

    /// Line integrals of `f` on the grid.
    pub fn of_field<F: Fn(&Vec3) -> f64 + Sync>(n_angles: usize, n_offsets: usize, f: F) -> Self {
        Sinogram::from_fn(n_angles, n_offsets, |a, q| xray_line(&f, a, q))
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["angle", "q", "value"])?;
        for i in 0..self.n_angles {
            for j in 0..self.n_offsets {
                w.write_record([
                    format!("{:.17e}", self.angle(i)),
                    format!("{:.17e}", self.offset(j)),
                    format!("{:.17e}", self.get(i, j)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Square image on [-1, 1]^2 with pixel centers x_i = -1 + (i + 1/2) 2 / n;
/// values row-major by y (row j), x fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Image {
    pub fn zeros(n: usize) -> Self {
        Image { n, values: vec![0.0; n * n] }
    }

    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * 2.0 / self.n as f64
    }

    pub fn pixel(&self, i: usize, j: usize) -> Vec3 {
        Vec3::new(self.coord(i), self.coord(j), 0.0)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn from_fn<F: Fn(&Vec3) -> f64>(n: usize, f: F) -> Self {
        let mut img = Image::zeros(n);
        for j in 0..n {
            for i in 0..n {
                let p = img.pixel(i, j);
                img.values[j * n + i] = if p.norm_squared() < 1.0 { f(&p) } else { 0.0 };
            }
        }
        img
    }

    /// Bilinear interpolation at y (0 outside the pixel-center hull).
    pub fn sample(&self, y: &Vec3) -> f64 {
        let h = 2.0 / self.n as f64;
        let gx = (y.x + 1.0) / h - 0.5;
        let gy = (y.y + 1.0) / h - 0.5;
        if gx < 0.0 || gy < 0.0 || gx > (self.n - 1) as f64 || gy > (self.n - 1) as f64 {
            return 0.0;
        }
        let i = (gx.floor() as usize).min(self.n - 2);
        let j = (gy.floor() as usize).min(self.n - 2);
        let (fx, fy) = (gx - i as f64, gy - j as f64);
        (1.0 - fy) * ((1.0 - fx) * self.get(i, j) + fx * self.get(i + 1, j))
            + fy * ((1.0 - fx) * self.get(i, j + 1) + fx * self.get(i + 1, j + 1))
    }

    pub fn map_inside<F: Fn(&Vec3, f64) -> f64>(&mut self, radius: f64, f: F) {
        let n = self.n;
        for j in 0..n {
            for i in 0..n {
                let p = self.pixel(i, j);
                let k = j * n + i;
                self.values[k] = if p.norm() < radius { f(&p, self.values[k]) } else { 0.0 };
            }
        }
    }

    pub fn clamp_nonnegative(&mut self) {
        self.values.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Relative L2 error against `truth` over pixels with |y| < radius
    /// (absolute L2 norm of the difference when the truth vanishes there).
    pub fn relative_l2_error<F: Fn(&Vec3) -> f64>(&self, truth: F, radius: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..self.n {
            for i in 0..self.n {
                let p = self.pixel(i, j);
                if p.norm() < radius {
                    let t = truth(&p);
                    num += (self.get(i, j) - t).powi(2);
                    den += t * t;
                }
            }
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            self.l2_norm_within(radius)
        }
    }

    /// Discrete L2 norm (with pixel area) over |y| < radius.
    pub fn l2_norm_within(&self, radius: f64) -> f64 {
        let h2 = (2.0 / self.n as f64).powi(2);
        let mut s = 0.0;
        for j in 0..self.n {
            for i in 0..self.n {
                if self.pixel(i, j).norm() < radius {
                    s += self.get(i, j).powi(2);
                }
            }
        }
        (s * h2).sqrt()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "value"])?;
        for j in 0..self.n {
            for i in 0..self.n {
                w.write_record([i.to_string(), j.to_string(), format!("{:.17e}", self.get(i, j))])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Ram-Lak filtered backprojection with Hann apodization (cutoff at the
/// Nyquist frequency of the offset grid), linear interpolation, disc mask.
pub fn fbp_invert(sino: &Sinogram, image_size: usize) -> Result<Image> {
    if sino.n_angles < 8 {
        return Err(Error::InvalidParameter(format!("FBP needs at least 8 angles, got {}", sino.n_angles)));
    }
    if sino.n_offsets < 2 || image_size < 2 {
        return Err(Error::InvalidParameter("FBP needs at least 2 offsets and 2 pixels".into()));
    }
    let filtered = filter_projections(sino);
    let n = image_size;
    let nq = sino.n_offsets;
    let d = sino.spacing();
    let trig: Vec<(f64, f64)> = (0..sino.n_angles).map(|i| sino.angle(i).sin_cos()).collect();
    let scale = PI / sino.n_angles as f64;
    let mut img = Image::zeros(n);
    let coords: Vec<f64> = (0..n).map(|i| img.coord(i)).collect();
    img.values.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
        let y = coords[j];
        for (i, out) in row.iter_mut().enumerate() {
            let x = coords[i];
            if x * x + y * y >= 1.0 {
                *out = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for (a, (sn, cs)) in trig.iter().enumerate() {
                let q = -x * sn + y * cs;
                let g = (q + 1.0) / d - 0.5;
                if g < 0.0 || g > (nq - 1) as f64 {
                    continue;
                }
                let k = (g.floor() as usize).min(nq - 2);
                let f = g - k as f64;
                let row = &filtered[a * nq..(a + 1) * nq];
                acc += (1.0 - f) * row[k] + f * row[k + 1];
            }
            *out = acc * scale;
        }
    });
    Ok(img)
}

fn filter_projections(sino: &Sinogram) -> Vec<f64> {
    let nq = sino.n_offsets;
    let d = sino.spacing();
    let len = (2 * nq).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(len);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(len);
    // Spatial Ram-Lak kernel, wrapped for circular convolution.
    let mut h = vec![Complex::new(0.0, 0.0); len];
    for (m, hm) in h.iter_mut().enumerate() {
        let k = if m <= len / 2 { m as i64 } else { m as i64 - len as i64 };
        let v = if k == 0 {
            1.0 / (4.0 * d * d)
        } else if k % 2 != 0 {
            -1.0 / (PI * PI * (k * k) as f64 * d * d)
        } else {
            0.0
        };
        *hm = Complex::new(v, 0.0);
    }
    fwd.process(&mut h);
    for (m, hm) in h.iter_mut().enumerate() {
        let k = if m <= len / 2 { m } else { len - m };
        let w = 2.0 * k as f64 / len as f64;
        *hm *= 0.5 * (1.0 + (PI * w).cos()) * d / len as f64;
    }
    let mut out = vec![0.0; sino.n_angles * nq];
    out.par_chunks_mut(nq).enumerate().for_each(|(a, row)| {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for j in 0..nq {
            buf[j] = Complex::new(sino.get(a, j), 0.0);
        }
        fwd.process(&mut buf);
        for (b, hm) in buf.iter_mut().zip(&h) {
            *b *= hm;
        }
        inv.process(&mut buf);
        for j in 0..nq {
            row[j] = buf[j].re;
        }
    });
    out
}

/// Values on ordered pairs of a uniform boundary grid of the circle
/// (node i at angle 2 pi i / n); NaN marks missing entries. `values[s * n + d]`
/// belongs to source s and detector d.
#[derive(Clone, Debug, PartialEq)]
pub struct PairData {
    pub n_nodes: usize,
    pub values: Vec<f64>,
}

impl PairData {
    pub fn new(n_nodes: usize) -> Self {
        PairData { n_nodes, values: vec![f64::NAN; n_nodes * n_nodes] }
    }

    pub fn set(&mut self, src: usize, det: usize, v: f64) {
        self.values[src * self.n_nodes + det] = v;
    }

    pub fn get(&self, src: usize, det: usize) -> f64 {
        self.values[src * self.n_nodes + det]
    }

    /// Interpolated value at fractional node positions (periodic bilinear);
    /// invalid neighbors are dropped and the weights renormalized.
    fn interpolate(&self, gs: f64, gd: f64) -> Option<f64> {
        let n = self.n_nodes;
        let (s0, fs) = (gs.floor(), gs - gs.floor());
        let (d0, fd) = (gd.floor(), gd - gd.floor());
        let idx = |g: f64, o: usize| ((g as i64 + o as i64).rem_euclid(n as i64)) as usize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (os, ws) in [(0usize, 1.0 - fs), (1, fs)] {
            for (od, wd) in [(0usize, 1.0 - fd), (1, fd)] {
                let w = ws * wd;
                if w <= 0.0 {
                    continue;
                }
                let (s, d) = (idx(s0, os), idx(d0, od));
                if s == d {
                    continue;
                }
                let v = self.get(s, d);
                if v.is_finite() {
                    acc += w * v;
                    wsum += w;
                }
            }
        }
        (wsum > 1e-12).then(|| acc / wsum)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RebinReport {
    /// Sinogram bins with no valid neighboring pair.
    pub gaps: usize,
}

/// Rebins boundary-pair data onto the (angle, q) grid. A line (a, q) enters at
/// -c v + q v_perp (source) and leaves at c v + q v_perp (detector); the
/// swapped pair is the same line, and both orientations are averaged.
pub fn boundary_pairs_to_sinogram(data: &PairData, n_angles: usize, n_offsets: usize) -> (Sinogram, RebinReport) {
    let n = data.n_nodes as f64;
    let node_pos = |p: Vec3| p.y.atan2(p.x).rem_euclid(2.0 * PI) / (2.0 * PI) * n;
    let mut sino = Sinogram::zeros(n_angles, n_offsets);
    let grid = sino.clone();
    let gaps: usize = sino
        .values
        .par_iter_mut()
        .enumerate()
        .map(|(k, out)| {
            let (i, j) = (k / n_offsets, k % n_offsets);
            let (a, q) = (grid.angle(i), grid.offset(j));
            let v = Vec3::new(a.cos(), a.sin(), 0.0);
            let vp = Vec3::new(-a.sin(), a.cos(), 0.0);
            let c = (1.0 - q * q).max(0.0).sqrt();
            let gs = node_pos(vp * q - v * c);
            let gd = node_pos(vp * q + v * c);
            let fwd = data.interpolate(gs, gd);
            let bwd = data.interpolate(gd, gs);
            match (fwd, bwd) {
                (Some(x), Some(y)) => {
                    *out = 0.5 * (x + y);
                    0
                }
                (Some(x), None) | (None, Some(x)) => {
                    *out = x;
                    0
                }
                (None, None) => {
                    *out = 0.0;
                    1
                }
            }
        })
        .sum();
    (sino, RebinReport { gaps })
}
