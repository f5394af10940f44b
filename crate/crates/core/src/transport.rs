//! Forward synthesis of averaged albedo measurements: truncated kernel
//! expansions convolved with a source pulse, a Monte Carlo estimator of the
//! full collision series, and the discrete albedo operator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_grid, orthonormal_frame, rot90, BoundaryPoint, Chord, Dim, Vec3};
use crate::kernels::{
    gamma0_chord, gamma1, gamma2, BallisticPulse, Gamma2Quadrature, KernelQuadrature,
};
use crate::optics::OpticalField;
use crate::quadrature::gauss_legendre;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    /// Symmetric triangle on [0, eta], peak 2 / eta.
    Triangle,
    /// Constant 1 / eta on [0, eta].
    Box,
}

/// Temporal source profile phi with unit area, supported in [0, eta], and
/// the measurement horizon T.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePulse {
    pub shape: PulseShape,
    pub eta: f64,
    pub horizon: f64,
}

impl SourcePulse {
    pub fn triangle(eta: f64, horizon: f64) -> Result<Self> {
        let p = SourcePulse { shape: PulseShape::Triangle, eta, horizon };
        p.check()?;
        Ok(p)
    }

    pub fn boxcar(eta: f64, horizon: f64) -> Result<Self> {
        let p = SourcePulse { shape: PulseShape::Box, eta, horizon };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("pulse width eta = {} must be positive", self.eta)));
        }
        if !(self.horizon > 2.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon T = {} must exceed diam = 2", self.horizon)));
        }
        if self.eta >= self.horizon {
            return Err(Error::InvalidParameter("pulse width must be below the horizon".into()));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        if !(0.0..=self.eta).contains(&t) {
            return 0.0;
        }
        match self.shape {
            PulseShape::Box => 1.0 / self.eta,
            PulseShape::Triangle => {
                let h = 0.5 * self.eta;
                (2.0 / self.eta) * (1.0 - (t - h).abs() / h)
            }
        }
    }

    /// int_{-inf}^t phi.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= self.eta {
            return 1.0;
        }
        match self.shape {
            PulseShape::Box => t / self.eta,
            PulseShape::Triangle => {
                let e2 = self.eta * self.eta;
                if t <= 0.5 * self.eta {
                    2.0 * t * t / e2
                } else {
                    1.0 - 2.0 * (self.eta - t).powi(2) / e2
                }
            }
        }
    }

    /// int phi^2.
    pub fn energy(&self) -> f64 {
        match self.shape {
            PulseShape::Box => 1.0 / self.eta,
            PulseShape::Triangle => 4.0 / (3.0 * self.eta),
        }
    }

    /// Points where phi is not smooth.
    fn knots(&self) -> &'static [f64] {
        match self.shape {
            PulseShape::Box => &[0.0, 1.0],
            PulseShape::Triangle => &[0.0, 0.5, 1.0],
        }
    }

    /// Average over bin `b` of phi(t - tau): the weight with which a unit
    /// delta arriving at path length tau enters that bin.
    pub fn bin_weight(&self, time: &TimeGrid, b: usize, tau: f64) -> f64 {
        let lo = time.bin_start(b);
        (self.cdf(lo + time.dt - tau) - self.cdf(lo - tau)) / time.dt
    }

    /// Bins that receive a nonzero share of a delta at tau.
    pub fn bin_range(&self, time: &TimeGrid, tau: f64) -> std::ops::Range<usize> {
        let first = (tau / time.dt).floor().max(0.0) as usize;
        let last = ((tau + self.eta) / time.dt).ceil().max(0.0) as usize;
        first.min(time.n_bins)..last.min(time.n_bins)
    }

    /// Adds `value * delta(t - tau)` convolved with phi to a bin-averaged trace.
    pub fn deposit(&self, time: &TimeGrid, tau: f64, value: f64, trace: &mut [f64]) {
        for b in self.bin_range(time, tau) {
            trace[b] += value * self.bin_weight(time, b, tau);
        }
    }
}

/// Uniform bins [b dt, (b + 1) dt), b < n_bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_bins: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon > dt) {
            return Err(Error::InvalidParameter(format!("time step {dt} must be positive and below the horizon")));
        }
        Ok(TimeGrid { dt, n_bins: (horizon / dt - 1e-9).ceil() as usize })
    }

    pub fn bin_start(&self, b: usize) -> f64 {
        b as f64 * self.dt
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * self.dt
    }

    pub fn end(&self) -> f64 {
        self.n_bins as f64 * self.dt
    }
}

/// Boundary nodes, the subsets used as sources and detectors, and the time bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub dim: Dim,
    pub nodes: Vec<BoundaryPoint>,
    pub sources: Vec<usize>,
    pub detectors: Vec<usize>,
    pub time: TimeGrid,
    /// Ring label per node (n = 3 slice acquisitions); only pairs on the
    /// same ring are synthesized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rings: Option<Vec<usize>>,
}

impl Acquisition {
    /// Every node is both a source and a detector.
    pub fn full(dim: Dim, n_nodes: usize, time: TimeGrid) -> Result<Self> {
        let nodes = boundary_grid(dim, n_nodes)?;
        Ok(Acquisition { dim, nodes, sources: (0..n_nodes).collect(), detectors: (0..n_nodes).collect(), time, rings: None })
    }

    /// n = 3: `n_rings` circles z = const, equally spaced in z, with
    /// `per_ring` equally spaced nodes each (node i of ring k has index
    /// k * per_ring + i).
    pub fn rings(n_rings: usize, per_ring: usize, time: TimeGrid) -> Result<Self> {
        if per_ring < 4 {
            return Err(Error::TooFewPoints(per_ring));
        }
        if n_rings == 0 {
            return Err(Error::InvalidParameter("need at least one ring".into()));
        }
        let mut nodes = Vec::with_capacity(n_rings * per_ring);
        let mut labels = Vec::with_capacity(n_rings * per_ring);
        for k in 0..n_rings {
            let z = ring_height(n_rings, k);
            let r = (1.0 - z * z).sqrt();
            for i in 0..per_ring {
                let a = 2.0 * std::f64::consts::PI * i as f64 / per_ring as f64;
                nodes.push(BoundaryPoint { position: Vec3::new(r * a.cos(), r * a.sin(), z) });
                labels.push(k);
            }
        }
        let n = nodes.len();
        Ok(Acquisition {
            dim: Dim::Three,
            nodes,
            sources: (0..n).collect(),
            detectors: (0..n).collect(),
            time,
            rings: Some(labels),
        })
    }

    /// Whether the ordered pair (source node, detector node) carries data.
    pub fn pair_active(&self, s: usize, d: usize) -> bool {
        s != d && self.rings.as_ref().is_none_or(|r| r[s] == r[d])
    }

    pub fn with_sources(mut self, sources: Vec<usize>) -> Result<Self> {
        self.sources = sources;
        self.check()?;
        Ok(self)
    }

    pub fn with_detectors(mut self, detectors: Vec<usize>) -> Result<Self> {
        self.detectors = detectors;
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.nodes.len();
        if let Some(i) = self.sources.iter().chain(&self.detectors).find(|i| **i >= n) {
            return Err(Error::InvalidParameter(format!("node index {i} out of range (n = {n})")));
        }
        if self.sources.is_empty() || self.detectors.is_empty() {
            return Err(Error::InvalidParameter("need at least one source and one detector".into()));
        }
        Ok(())
    }

    /// Boundary measure per node (the grids are equal-area).
    pub fn node_measure(&self) -> f64 {
        self.dim.sphere_measure() / self.nodes.len() as f64
    }
}

/// Height of ring k of `n_rings`.
pub fn ring_height(n_rings: usize, k: usize) -> f64 {
    -1.0 + (2 * k + 1) as f64 / n_rings as f64
}

/// Data channels: the total trace and its split by scattering order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Total,
    Order0,
    Order1,
    Order2,
    Order3Plus,
}

impl Channel {
    pub const ALL: [Channel; 5] = [Channel::Total, Channel::Order0, Channel::Order1, Channel::Order2, Channel::Order3Plus];

    pub fn label(self) -> &'static str {
        match self {
            Channel::Total => "total",
            Channel::Order0 => "0",
            Channel::Order1 => "1",
            Channel::Order2 => "2",
            Channel::Order3Plus => "3+",
        }
    }

    pub fn from_label(s: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.label() == s)
    }

    fn for_order(m: usize) -> Channel {
        match m {
            0 => Channel::Order0,
            1 => Channel::Order1,
            2 => Channel::Order2,
            _ => Channel::Order3Plus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub channel: Channel,
    pub values: Vec<f64>,
    /// Standard error of each bin (Monte Carlo only).
    pub stderr: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallisticEntry {
    pub source: usize,
    pub detector: usize,
    pub pulse: BallisticPulse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Kernel { order: usize },
    MonteCarlo { particles: u64, seed: u64, max_order: usize },
}

/// Bin-averaged traces M[src, det, t] of the pulse-convolved albedo, per channel,
/// with the ballistic deltas kept symbolically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub acquisition: Acquisition,
    pub pulse: SourcePulse,
    pub method: Method,
    pub channels: Vec<ChannelData>,
    pub ballistic: Vec<BallisticEntry>,
}

impl MeasurementSet {
    pub fn n_bins(&self) -> usize {
        self.acquisition.time.n_bins
    }

    fn offset(&self, si: usize, di: usize) -> usize {
        (si * self.acquisition.detectors.len() + di) * self.n_bins()
    }

    pub fn channel(&self, ch: Channel) -> Option<&ChannelData> {
        self.channels.iter().find(|c| c.channel == ch)
    }

    /// Trace for the `si`-th source and `di`-th detector of the acquisition lists.
    pub fn trace(&self, ch: Channel, si: usize, di: usize) -> Option<&[f64]> {
        let o = self.offset(si, di);
        self.channel(ch).map(|c| &c.values[o..o + self.n_bins()])
    }

    pub fn trace_stderr(&self, ch: Channel, si: usize, di: usize) -> Option<&[f64]> {
        let o = self.offset(si, di);
        self.channel(ch).and_then(|c| c.stderr.as_ref()).map(|s| &s[o..o + self.n_bins()])
    }

    /// Total minus the order-0 channel.
    pub fn scattered_trace(&self, si: usize, di: usize) -> Option<Vec<f64>> {
        let tot = self.trace(Channel::Total, si, di)?;
        let b = self.trace(Channel::Order0, si, di)?;
        Some(tot.iter().zip(b).map(|(a, b)| a - b).collect())
    }

    /// Symbolic ballistic pulse for node indices (source, detector).
    pub fn ballistic_for(&self, source: usize, detector: usize) -> Option<&BallisticPulse> {
        self.ballistic.iter().find(|e| e.source == source && e.detector == detector).map(|e| &e.pulse)
    }

    pub fn check(&self) -> Result<()> {
        let len = self.acquisition.sources.len() * self.acquisition.detectors.len() * self.n_bins();
        for c in &self.channels {
            if c.values.len() != len || c.stderr.as_ref().is_some_and(|s| s.len() != len) {
                return Err(Error::Mismatch(format!("channel {} has the wrong length", c.channel.label())));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Mismatch(format!("channel {} has non-finite values", c.channel.label())));
            }
        }
        if self.channel(Channel::Total).is_none() {
            return Err(Error::Mismatch("missing total channel".into()));
        }
        Ok(())
    }

    /// Long-form CSV (t, det_index, src_index, value, stderr, order); zero bins are omitted.
    pub fn write_traces_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "det_index", "src_index", "value", "stderr", "order"])?;
        let acq = &self.acquisition;
        for c in &self.channels {
            for (si, s) in acq.sources.iter().enumerate() {
                for (di, d) in acq.detectors.iter().enumerate() {
                    let o = self.offset(si, di);
                    for b in 0..self.n_bins() {
                        let v = c.values[o + b];
                        if v == 0.0 {
                            continue;
                        }
                        let se = c.stderr.as_ref().map_or(0.0, |s| s[o + b]);
                        w.write_record([
                            acq.time.bin_center(b).to_string(),
                            d.to_string(),
                            s.to_string(),
                            v.to_string(),
                            se.to_string(),
                            c.channel.label().to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `traces.csv` and `meta.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, provenance: &Provenance) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_traces_csv(BufWriter::new(File::create(dir.join("traces.csv"))?))?;
        let meta = MeasurementMeta {
            provenance: provenance.clone(),
            acquisition: self.acquisition.clone(),
            pulse: self.pulse,
            method: self.method.clone(),
            channels: self.channels.iter().map(|c| (c.channel, c.stderr.is_some())).collect(),
            ballistic: self.ballistic.clone(),
        };
        let mut f = BufWriter::new(File::create(dir.join("meta.json"))?);
        serde_json::to_writer_pretty(&mut f, &meta)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Reads a directory written by `write_dir`.
    pub fn read_dir(dir: &Path) -> Result<(MeasurementSet, Provenance)> {
        let meta: MeasurementMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("meta.json"))?))?;
        let acq = meta.acquisition;
        acq.check()?;
        let nb = acq.time.n_bins;
        let len = acq.sources.len() * acq.detectors.len() * nb;
        let mut channels: Vec<ChannelData> = meta
            .channels
            .iter()
            .map(|(c, has_se)| ChannelData { channel: *c, values: vec![0.0; len], stderr: has_se.then(|| vec![0.0; len]) })
            .collect();
        let pos = |list: &[usize], i: usize| list.iter().position(|x| *x == i);
        let mut rd = csv::Reader::from_reader(BufReader::new(File::open(dir.join("traces.csv"))?));
        for rec in rd.records() {
            let rec = rec?;
            let bad = || Error::Mismatch(format!("malformed trace row {:?}", rec));
            let t: f64 = rec[0].parse().map_err(|_| bad())?;
            let d: usize = rec[1].parse().map_err(|_| bad())?;
            let s: usize = rec[2].parse().map_err(|_| bad())?;
            let v: f64 = rec[3].parse().map_err(|_| bad())?;
            let se: f64 = rec[4].parse().map_err(|_| bad())?;
            let ch = Channel::from_label(&rec[5]).ok_or_else(bad)?;
            let b = (t / acq.time.dt - 0.5).round();
            let (si, di) = (pos(&acq.sources, s).ok_or_else(bad)?, pos(&acq.detectors, d).ok_or_else(bad)?);
            if !(b >= 0.0 && (b as usize) < nb) {
                return Err(bad());
            }
            let c = channels.iter_mut().find(|c| c.channel == ch).ok_or_else(bad)?;
            let i = (si * acq.detectors.len() + di) * nb + b as usize;
            c.values[i] = v;
            if let Some(e) = c.stderr.as_mut() {
                e[i] = se;
            }
        }
        let m = MeasurementSet { acquisition: acq, pulse: meta.pulse, method: meta.method, channels, ballistic: meta.ballistic };
        m.check()?;
        Ok((m, meta.provenance))
    }
}

/// Identification stamped on every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Provenance { tool_version: env!("CARGO_PKG_VERSION").to_string(), config_hash: config_hash.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MeasurementMeta {
    provenance: Provenance,
    acquisition: Acquisition,
    pulse: SourcePulse,
    method: Method,
    channels: Vec<(Channel, bool)>,
    ballistic: Vec<BallisticEntry>,
}

/// Numerical settings of the kernel synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    pub quadrature: KernelQuadrature,
    pub gamma2: Gamma2Quadrature,
    /// gamma2 is evaluated on this many path lengths per chord and interpolated.
    pub gamma2_nodes: usize,
    /// Gauss points per panel of the path-length integral.
    pub nodes_per_panel: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            quadrature: KernelQuadrature::fast(),
            gamma2: Gamma2Quadrature::coarse(),
            gamma2_nodes: 12,
            nodes_per_panel: 3,
        }
    }
}

struct PairTraces {
    ballistic: BallisticPulse,
    orders: Vec<Vec<f64>>,
}

/// Path-length nodes and weights for int_{t0}^{end} f(tau) dtau: panels split at
/// the kinks of the bin weights, graded toward t0, with tau = t0 + u^2 inside.
pub(crate) fn path_nodes(pulse: &SourcePulse, time: &TimeGrid, t0: f64, m: usize) -> Vec<(f64, f64)> {
    let end = time.end();
    if end <= t0 {
        return Vec::new();
    }
    let mut knots = vec![t0, end];
    for b in 0..=time.n_bins {
        for k in pulse.knots() {
            let tau = time.bin_start(b) - k * pulse.eta;
            if tau > t0 && tau < end {
                knots.push(tau);
            }
        }
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let first = knots[1];
    for k in 1..=8 {
        knots.push(t0 + (first - t0) * 4f64.powi(-k));
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rule = gauss_legendre(m);
    let mut out = Vec::with_capacity(knots.len() * m);
    for w in knots.windows(2) {
        let (ua, ub) = ((w[0] - t0).sqrt(), (w[1] - t0).sqrt());
        for (u, wu) in rule.on_interval(ua, ub) {
            out.push((t0 + u * u, 2.0 * u * wu));
        }
    }
    out
}

fn synthesize_pair(
    field: &OpticalField,
    pulse: &SourcePulse,
    time: &TimeGrid,
    order: usize,
    src: &BoundaryPoint,
    det: &BoundaryPoint,
    settings: &SynthesisSettings,
) -> Result<PairTraces> {
    let chord = Chord::from_endpoints(src, det)?;
    let t0 = chord.length;
    let ballistic = gamma0_chord(field, &chord);
    let nb = time.n_bins;
    let mut orders = vec![vec![0.0; nb]; order + 1];
    pulse.deposit(time, t0, ballistic.amplitude, &mut orders[0]);
    if order == 0 || !field.scatters() {
        return Ok(PairTraces { ballistic, orders });
    }
    let nodes = path_nodes(pulse, time, t0, settings.nodes_per_panel.max(1));
    let g2_table = if order >= 2 {
        let n = settings.gamma2_nodes.max(2);
        let span = time.end() - t0;
        let mut tab = Vec::with_capacity(n);
        for j in 0..n {
            let x = j as f64 / (n - 1) as f64;
            let tau = t0 + (span * x * x).max(1e-9);
            tab.push((tau, gamma2(field, tau, src, det, &settings.gamma2)?.value));
        }
        Some(tab)
    } else {
        None
    };
    for (tau, w) in nodes {
        let g1 = gamma1(field, tau, src, det, &settings.quadrature)?.value;
        pulse.deposit(time, tau, w * g1, &mut orders[1]);
        if let Some(tab) = &g2_table {
            let g2 = interpolate_table(tab, tau);
            pulse.deposit(time, tau, w * g2, &mut orders[2]);
        }
    }
    Ok(PairTraces { ballistic, orders })
}

fn interpolate_table(tab: &[(f64, f64)], x: f64) -> f64 {
    let i = tab.partition_point(|(t, _)| *t <= x);
    if i == 0 {
        return tab[0].1;
    }
    if i >= tab.len() {
        return tab[tab.len() - 1].1;
    }
    let ((x0, y0), (x1, y1)) = (tab[i - 1], tab[i]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Truncated expansion sum_{j <= order} gamma_j convolved with the pulse,
/// bin-averaged on the acquisition grid.
pub fn albedo_truncated(
    field: &OpticalField,
    pulse: &SourcePulse,
    order: usize,
    acq: &Acquisition,
    settings: &SynthesisSettings,
) -> Result<MeasurementSet> {
    let max_order = if acq.dim == Dim::Two { 2 } else { 1 };
    if order > max_order {
        return Err(Error::InvalidParameter(format!(
            "kernel synthesis supports order <= {max_order} for n = {}, got {order}",
            acq.dim.n()
        )));
    }
    if field.dim != acq.dim {
        return Err(Error::Mismatch("field and acquisition dimensions differ".into()));
    }
    field.check()?;
    pulse.check()?;
    acq.check()?;
    let nb = acq.time.n_bins;
    let nd = acq.detectors.len();
    let pairs: Vec<(usize, usize)> = (0..acq.sources.len()).flat_map(|s| (0..nd).map(move |d| (s, d))).collect();
    let results: Vec<Option<PairTraces>> = pairs
        .par_iter()
        .map(|&(si, di)| {
            let (s, d) = (acq.sources[si], acq.detectors[di]);
            if !acq.pair_active(s, d) {
                return Ok(None);
            }
            synthesize_pair(field, pulse, &acq.time, order, &acq.nodes[s], &acq.nodes[d], settings).map(Some)
        })
        .collect::<Result<_>>()?;
    let len = pairs.len() * nb;
    let mut per_order = vec![vec![0.0; len]; order + 1];
    let mut ballistic = Vec::new();
    for (k, (r, &(si, di))) in results.iter().zip(&pairs).enumerate() {
        if let Some(r) = r {
            for (m, tr) in r.orders.iter().enumerate() {
                per_order[m][k * nb..(k + 1) * nb].copy_from_slice(tr);
            }
            ballistic.push(BallisticEntry { source: acq.sources[si], detector: acq.detectors[di], pulse: r.ballistic });
        }
    }
    let mut total = vec![0.0; len];
    for tr in &per_order {
        for (t, v) in total.iter_mut().zip(tr) {
            *t += v;
        }
    }
    let mut channels = vec![ChannelData { channel: Channel::Total, values: total, stderr: None }];
    for (m, values) in per_order.into_iter().enumerate() {
        channels.push(ChannelData { channel: Channel::for_order(m), values, stderr: None });
    }
    Ok(MeasurementSet { acquisition: acq.clone(), pulse: *pulse, method: Method::Kernel { order }, channels, ballistic })
}

/// Monte Carlo settings. `particles` is per source node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub particles: u64,
    pub seed: u64,
    /// Weights below this enter Russian roulette.
    pub roulette_threshold: f64,
    /// Survival probability in Russian roulette.
    pub survival: f64,
    pub max_order: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { particles: 100_000, seed: 1, roulette_threshold: 1e-6, survival: 0.5, max_order: 50 }
    }
}

impl McConfig {
    pub fn check(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::InvalidParameter("particle count must be at least 1".into()));
        }
        if !(self.survival > 0.0 && self.survival <= 1.0) {
            return Err(Error::InvalidParameter("roulette survival probability must lie in (0, 1]".into()));
        }
        if !(self.roulette_threshold >= 0.0) {
            return Err(Error::InvalidParameter("roulette threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

const CHUNK: u64 = 4096;
const CHUNKS_PER_ROUND: u64 = 64;

/// Per-source tally sums; scattered channels are orders 1, 2, 3+ and their total.
struct Tally {
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Tally {
    fn new(len: usize) -> Self {
        Tally { sum: vec![0.0; len], sq: vec![0.0; len] }
    }

    fn absorb(&mut self, other: &Tally) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sq.iter_mut().zip(&other.sq) {
            *a += b;
        }
    }
}

/// Cosine-weighted inward direction at boundary point x; returns the
/// direction and the weight S(x, v) times the normalization of |nu . v|.
fn sample_emission<R: Rng>(field: &OpticalField, x: &Vec3, rng: &mut R) -> (Vec3, f64) {
    let inward = -x;
    let (v, norm) = match field.dim {
        Dim::Two => {
            let s = 2.0 * rng.gen::<f64>() - 1.0;
            let c = (1.0 - s * s).max(0.0).sqrt();
            (inward * c + rot90(&inward) * s, 2.0)
        }
        Dim::Three => {
            let u1: f64 = rng.gen();
            let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            let (e1, e2) = orthonormal_frame(&inward);
            let r = u1.sqrt();
            (inward * (1.0 - u1).max(0.0).sqrt() + (e1 * phi.cos() + e2 * phi.sin()) * r, std::f64::consts::PI)
        }
    };
    (v, field.source.eval(x, &v) * norm)
}

/// Segment of the ray y + s v (s >= 0) inside the centered ball of radius r.
fn ball_segment(y: &Vec3, v: &Vec3, r: f64) -> Option<(f64, f64)> {
    let b = y.dot(v);
    let disc = b * b - (y.norm_squared() - r * r);
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (lo, hi) = ((-b - sq).max(0.0), -b + sq);
    (hi > lo).then_some((lo, hi))
}

struct McLayout<'a> {
    field: &'a OpticalField,
    pulse: &'a SourcePulse,
    time: TimeGrid,
    detectors: Vec<Vec3>,
    radius: f64,
    mc: McConfig,
}

impl McLayout<'_> {
    /// Index into a per-source tally: channel c in 0..4 (orders 1, 2, 3+, total).
    fn index(&self, c: usize, d: usize, b: usize) -> usize {
        (c * self.detectors.len() + d) * self.time.n_bins + b
    }

    fn tally_len(&self) -> usize {
        4 * self.detectors.len() * self.time.n_bins
    }

    /// One particle history from source x; pushes (order channel, det, bin, value).
    fn history(&self, x: &Vec3, rng: &mut ChaCha8Rng, out: &mut Vec<(usize, usize, f64)>) {
        let f = self.field;
        let (mut v, mut w) = sample_emission(f, x, rng);
        let mut pos = *x;
        let mut path = 0.0;
        let absorbing = !f.sigma.is_zero();
        let n1 = (f.dim.n() - 1) as i32;
        for order in 1..=self.mc.max_order {
            if w == 0.0 {
                break;
            }
            let Some((s1, s2)) = ball_segment(&pos, &v, self.radius) else { break };
            let len = s2 - s1;
            let s = s1 + len * rng.gen::<f64>();
            let z = pos + v * s;
            let mut wc = w * len;
            if absorbing {
                wc *= (-f.sigma.line_integral(&pos, &z)).exp();
            }
            let k0 = f.k0_at(&z);
            if k0 == 0.0 || wc == 0.0 {
                break;
            }
            let c = order.min(3) - 1;
            for (d, xd) in self.detectors.iter().enumerate() {
                let dz = xd - z;
                let r = dz.norm();
                if r == 0.0 {
                    continue;
                }
                let vd = dz / r;
                let cos = xd.dot(&vd);
                if cos <= 0.0 {
                    continue;
                }
                let mut val = wc * k0 * f.g(&v, &vd) * f.detector.eval(xd, &vd) * cos / r.powi(n1);
                if absorbing {
                    val *= (-f.sigma.line_integral(&z, xd)).exp();
                }
                if val != 0.0 {
                    let tau = path + s + r;
                    for b in self.pulse.bin_range(&self.time, tau) {
                        let bw = self.pulse.bin_weight(&self.time, b, tau);
                        if bw != 0.0 {
                            out.push((c, self.index(0, d, b), val * bw));
                        }
                    }
                }
            }
            w = wc * f.sigma_p(&z);
            v = f.phase.sample(f.dim, &v, rng);
            pos = z;
            path += s;
            if w < self.mc.roulette_threshold {
                if rng.gen::<f64>() < self.mc.survival {
                    w /= self.mc.survival;
                } else {
                    break;
                }
            }
        }
    }

    fn run_chunk(&self, x: &Vec3, stream_base: u64, start: u64, count: u64) -> Tally {
        let mut t = Tally::new(self.tally_len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.mc.seed);
        let mut events = Vec::new();
        let per_channel = self.detectors.len() * self.time.n_bins;
        for i in start..start + count {
            rng.set_stream(stream_base + i);
            rng.set_word_pos(0);
            events.clear();
            self.history(x, &mut rng, &mut events);
            if events.is_empty() {
                continue;
            }
            // Per-particle totals, then squares.
            events.sort_by_key(|e| (e.1, e.0));
            let mut k = 0;
            while k < events.len() {
                let idx = events[k].1;
                let mut tot = 0.0;
                let mut j = k;
                while j < events.len() && events[j].1 == idx {
                    let c = events[j].0;
                    let mut v = 0.0;
                    while j < events.len() && events[j].1 == idx && events[j].0 == c {
                        v += events[j].2;
                        j += 1;
                    }
                    let ci = c * per_channel + idx;
                    t.sum[ci] += v;
                    t.sq[ci] += v * v;
                    tot += v;
                }
                let ti = 3 * per_channel + idx;
                t.sum[ti] += tot;
                t.sq[ti] += tot * tot;
                k = j;
            }
        }
        t
    }

    fn run_source(&self, x: &Vec3, stream_base: u64) -> Tally {
        let n = self.mc.particles;
        let n_chunks = n.div_ceil(CHUNK);
        let mut acc = Tally::new(self.tally_len());
        let mut c0 = 0;
        while c0 < n_chunks {
            let c1 = (c0 + CHUNKS_PER_ROUND).min(n_chunks);
            let parts: Vec<Tally> = (c0..c1)
                .into_par_iter()
                .map(|c| {
                    let start = c * CHUNK;
                    self.run_chunk(x, stream_base, start, CHUNK.min(n - start))
                })
                .collect();
            for p in &parts {
                acc.absorb(p);
            }
            c0 = c1;
        }
        acc
    }
}

/// Monte Carlo estimate of the full albedo with per-order tallies. Each
/// particle follows a forced-collision history (collision point uniform on
/// the flight segment inside the scattering support, weighted by the
/// attenuation and segment length) and scores a next-event estimate at every
/// detector node after each collision. The unscattered part is the exact
/// next-event estimate from the source point (the ballistic closed form).
/// Particle i of source slot s uses RNG stream s * particles + i, and chunk
/// tallies are reduced in a fixed order, so results do not depend on the
/// thread count.
pub fn simulate_albedo_mc(
    field: &OpticalField,
    pulse: &SourcePulse,
    mc: &McConfig,
    acq: &Acquisition,
) -> Result<MeasurementSet> {
    mc.check()?;
    pulse.check()?;
    acq.check()?;
    field.check()?;
    if field.dim != acq.dim {
        return Err(Error::Mismatch("field and acquisition dimensions differ".into()));
    }
    let adm = field.validate_admissible(17);
    if !adm.passed() {
        return Err(Error::InvalidParameter(format!("field is not admissible: {}", adm.violations.join("; "))));
    }
    let nb = acq.time.n_bins;
    let nd = acq.detectors.len();
    let layout = McLayout {
        field,
        pulse,
        time: acq.time,
        detectors: acq.detectors.iter().map(|d| acq.nodes[*d].position).collect(),
        radius: field.scattering_radius(),
        mc: *mc,
    };
    let len = acq.sources.len() * nd * nb;
    let mut vals: Vec<Vec<f64>> = vec![vec![0.0; len]; 5];
    let mut errs: Vec<Vec<f64>> = vec![vec![0.0; len]; 5];
    let mut ballistic = Vec::new();
    let n = mc.particles as f64;
    let per_channel = nd * nb;
    // Channel slots: 0 total, 1 order 0, 2 order 1, 3 order 2, 4 order 3+.
    for (si, &s) in acq.sources.iter().enumerate() {
        let xs = acq.nodes[s];
        for (di, &d) in acq.detectors.iter().enumerate() {
            if s == d {
                continue;
            }
            let chord = Chord::from_endpoints(&xs, &acq.nodes[d])?;
            let bp = gamma0_chord(field, &chord);
            ballistic.push(BallisticEntry { source: s, detector: d, pulse: bp });
            let o = (si * nd + di) * nb;
            pulse.deposit(&acq.time, bp.arrival_time, bp.amplitude, &mut vals[1][o..o + nb]);
        }
        if field.scatters() {
            let t = layout.run_source(&xs.position, si as u64 * mc.particles);
            for c in 0..4 {
                let slot = if c == 3 { 0 } else { c + 2 };
                for k in 0..per_channel {
                    let mean = t.sum[c * per_channel + k] / n;
                    let var = if mc.particles > 1 {
                        ((t.sq[c * per_channel + k] / n - mean * mean) / (n - 1.0)).max(0.0)
                    } else {
                        0.0
                    };
                    vals[slot][si * per_channel + k] = mean;
                    errs[slot][si * per_channel + k] = var.sqrt();
                }
            }
            // A node paired with itself is not a measurement.
            if let Some(di) = acq.detectors.iter().position(|d| *d == s) {
                let o = (si * nd + di) * nb;
                for slot in 0..5 {
                    vals[slot][o..o + nb].fill(0.0);
                    errs[slot][o..o + nb].fill(0.0);
                }
            }
        }
    }
    let (total, rest) = vals.split_at_mut(1);
    for (t, o) in total[0].iter_mut().zip(&rest[0]) {
        *t += o;
    }
    let order = [Channel::Total, Channel::Order0, Channel::Order1, Channel::Order2, Channel::Order3Plus];
    let channels = order
        .into_iter()
        .zip(vals.into_iter().zip(errs))
        .map(|(channel, (values, se))| ChannelData { channel, values, stderr: Some(se) })
        .collect();
    Ok(MeasurementSet {
        acquisition: acq.clone(),
        pulse: *pulse,
        method: Method::MonteCarlo { particles: mc.particles, seed: mc.seed, max_order: mc.max_order },
        channels,
        ballistic,
    })
}

/// Kernel values just behind the ballistic front of one chord:
/// gamma1 (+ gamma2) at tau = t0 + eps for each eps of the set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSamples {
    pub source: usize,
    pub detector: usize,
    pub ballistic: BallisticPulse,
    pub values: Vec<f64>,
}

/// Noiseless kernel data near the fronts, one orientation per unordered pair
/// of active nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularSamples {
    pub acquisition: Acquisition,
    pub eps: Vec<f64>,
    pub includes_gamma2: bool,
    pub pairs: Vec<PairSamples>,
}

/// Log-spaced offsets behind the front.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

/// Samples gamma1 (and, for n = 2, gamma2) at t0 + eps on every unordered
/// active pair. gamma2 is bounded at the front; it is evaluated at the two
/// ends of the eps range and interpolated linearly in between.
pub fn sample_singular_front(
    field: &OpticalField,
    acq: &Acquisition,
    eps: &[f64],
    gamma2_quadrature: Option<&Gamma2Quadrature>,
    quad: &KernelQuadrature,
) -> Result<SingularSamples> {
    field.check()?;
    acq.check()?;
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidParameter("front offsets must be positive".into()));
    }
    if gamma2_quadrature.is_some() && field.dim != Dim::Two {
        return Err(Error::Unsupported("gamma2 quadrature", field.dim.n()));
    }
    let mut pairs = Vec::new();
    for &s in &acq.sources {
        for &d in &acq.detectors {
            let mirrored = s > d && acq.sources.contains(&d) && acq.detectors.contains(&s);
            if acq.pair_active(s, d) && !mirrored {
                pairs.push((s, d));
            }
        }
    }
    let (e_lo, e_hi) = eps.iter().fold((f64::INFINITY, 0.0f64), |(a, b), e| (a.min(*e), b.max(*e)));
    let pairs = pairs
        .par_iter()
        .map(|&(s, d)| {
            let (src, det) = (&acq.nodes[s], &acq.nodes[d]);
            let chord = Chord::from_endpoints(src, det)?;
            let t0 = chord.length;
            let mut values = Vec::with_capacity(eps.len());
            for e in eps {
                values.push(gamma1(field, t0 + e, src, det, quad)?.value);
            }
            if let Some(q) = gamma2_quadrature {
                let a = gamma2(field, t0 + e_lo, src, det, q)?.value;
                let b = gamma2(field, t0 + e_hi, src, det, q)?.value;
                for (v, e) in values.iter_mut().zip(eps) {
                    let x = if e_hi > e_lo { (e - e_lo) / (e_hi - e_lo) } else { 0.0 };
                    *v += a + (b - a) * x;
                }
            }
            Ok(PairSamples { source: s, detector: d, ballistic: gamma0_chord(field, &chord), values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SingularSamples { acquisition: acq.clone(), eps: eps.to_vec(), includes_gamma2: gamma2_quadrature.is_some(), pairs })
}

/// How the discrete albedo operator is synthesized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorMethod {
    Kernel { order: usize, settings: SynthesisSettings },
    MonteCarlo { config: McConfig },
}

/// Discrete albedo operator on L^1(time bins x boundary nodes). The kernel is
/// invariant under time shifts, so only the response to a unit-mass input
/// in the first time bin of each source node is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoMatrix {
    pub response: MeasurementSet,
    pub node_measure: f64,
}

/// Assembles the discrete operator; `budget` bounds the bytes of the stored
/// responses.
pub fn albedo_matrix(
    field: &OpticalField,
    acq: &Acquisition,
    method: &OperatorMethod,
    budget: usize,
) -> Result<AlbedoMatrix> {
    let channels = match method {
        OperatorMethod::Kernel { order, .. } => order + 2,
        OperatorMethod::MonteCarlo { .. } => 10,
    };
    let required = acq.sources.len() * acq.detectors.len() * acq.time.n_bins * channels * 8;
    if required > budget {
        return Err(Error::MemoryBudget {
            required,
            budget,
            detail: format!(
                "{} sources x {} detectors x {} bins x {} channels",
                acq.sources.len(),
                acq.detectors.len(),
                acq.time.n_bins,
                channels
            ),
        });
    }
    let pulse = SourcePulse { shape: PulseShape::Box, eta: acq.time.dt, horizon: acq.time.end() };
    let response = match method {
        OperatorMethod::Kernel { order, settings } => albedo_truncated(field, &pulse, *order, acq, settings)?,
        OperatorMethod::MonteCarlo { config } => simulate_albedo_mc(field, &pulse, config, acq)?,
    };
    Ok(AlbedoMatrix { response, node_measure: acq.node_measure() })
}

impl AlbedoMatrix {
    /// Column sums sum_{t, x} |K| dt dmu per source node.
    pub fn column_norms(&self) -> Vec<f64> {
        column_norms(&self.response, None, self.node_measure)
    }

    /// Discrete L^1 -> L^1 operator norm.
    pub fn l1_norm(&self) -> f64 {
        self.column_norms().into_iter().fold(0.0, f64::max)
    }

    /// Column sums of |K - K~| per source node.
    pub fn difference_column_norms(&self, other: &AlbedoMatrix) -> Result<Vec<f64>> {
        let a = &self.response.acquisition;
        let b = &other.response.acquisition;
        if a != b {
            return Err(Error::Mismatch("operators live on different grids".into()));
        }
        Ok(column_norms(&self.response, Some(&other.response), self.node_measure))
    }

    /// Discrete ||A - A~|| in the L^1 operator norm.
    pub fn difference_l1_norm(&self, other: &AlbedoMatrix) -> Result<f64> {
        Ok(self.difference_column_norms(other)?.into_iter().fold(0.0, f64::max))
    }
}

fn column_norms(a: &MeasurementSet, b: Option<&MeasurementSet>, dmu: f64) -> Vec<f64> {
    let ta = &a.channel(Channel::Total).expect("total channel").values;
    let tb = b.map(|b| &b.channel(Channel::Total).expect("total channel").values);
    let acq = &a.acquisition;
    let per_source = acq.detectors.len() * acq.time.n_bins;
    (0..acq.sources.len())
        .map(|si| {
            let r = si * per_source..(si + 1) * per_source;
            let s: f64 = match tb {
                Some(tb) => ta[r.clone()].iter().zip(&tb[r]).map(|(x, y)| (x - y).abs()).sum(),
                None => ta[r].iter().map(|x| x.abs()).sum(),
            };
            s * acq.time.dt * dmu
        })
        .collect()
}

#[cfg(test)]
mod tests;
