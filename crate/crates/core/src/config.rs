//! Experiment configuration: one JSON document describing the field, pulse,
//! grids and pipeline, with a SHA-256 hash stamped on every output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Dim;
use crate::optics::OpticalField;
use crate::recon::{BallisticMode, FitWindow, KnownOptics, ReconSettings};
use crate::transport::{Acquisition, McConfig, PulseShape, SourcePulse, SynthesisSettings, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    #[serde(default = "default_shape")]
    pub shape: PulseShape,
    pub eta: f64,
}

fn default_shape() -> PulseShape {
    PulseShape::Triangle
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Boundary nodes (n = 2, or per ring when `rings` is set).
    pub boundary_nodes: usize,
    /// n = 3: number of rings z = const; required for reconstruction.
    #[serde(default)]
    pub rings: Option<usize>,
    pub dt: f64,
    #[serde(default = "default_angles")]
    pub sinogram_angles: usize,
    #[serde(default = "default_offsets")]
    pub sinogram_offsets: usize,
    #[serde(default = "default_image")]
    pub image_size: usize,
}

fn default_angles() -> usize {
    180
}

fn default_offsets() -> usize {
    256
}

fn default_image() -> usize {
    128
}

/// Monte Carlo settings; the seed is the top-level one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub particles: u64,
    pub roulette_threshold: f64,
    pub survival: f64,
    pub max_order: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        let m = McConfig::default();
        MonteCarloConfig {
            particles: m.particles,
            roulette_threshold: m.roulette_threshold,
            survival: m.survival,
            max_order: m.max_order,
        }
    }
}

/// Forward method: truncated kernel synthesis of a given order, or Monte Carlo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ForwardMethod {
    Kernel(usize),
    MonteCarlo,
}

impl fmt::Display for ForwardMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForwardMethod::Kernel(k) => write!(f, "{k}"),
            ForwardMethod::MonteCarlo => f.write_str("mc"),
        }
    }
}

impl FromStr for ForwardMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" | "1" | "2" => Ok(ForwardMethod::Kernel(s.parse().expect("digit"))),
            "mc" => Ok(ForwardMethod::MonteCarlo),
            _ => Err(Error::Config(format!("order must be one of 0, 1, 2, mc (got {s:?})"))),
        }
    }
}

impl From<ForwardMethod> for String {
    fn from(m: ForwardMethod) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for ForwardMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub order: ForwardMethod,
    pub synthesis: SynthesisSettings,
    pub ballistic: BallisticMode,
    pub fit_window: Option<FitWindow>,
    pub max_residual: f64,
    /// Report errors against the configured phantoms.
    pub score: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let r = ReconSettings::default();
        PipelineConfig {
            order: ForwardMethod::Kernel(2),
            synthesis: SynthesisSettings::default(),
            ballistic: r.ballistic,
            fit_window: None,
            max_residual: r.max_residual,
            score: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub field: OpticalField,
    pub pulse: PulseConfig,
    pub horizon: f64,
    pub grids: GridConfig,
    #[serde(default)]
    pub mc: MonteCarloConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.field.check().map_err(wrap)?;
        if !(self.horizon > 2.0) {
            return Err(Error::Config(format!("horizon {} must exceed the diameter 2", self.horizon)));
        }
        self.pulse().map_err(wrap)?;
        self.acquisition().map_err(wrap)?;
        self.mc_config().check().map_err(wrap)?;
        let g = &self.grids;
        if g.sinogram_angles == 0 || g.sinogram_offsets == 0 || g.image_size < 2 {
            return Err(Error::Config("sinogram and image sizes must be positive".into()));
        }
        if let ForwardMethod::Kernel(k) = self.pipeline.order {
            let max = if self.field.dim == Dim::Two { 2 } else { 1 };
            if k > max {
                return Err(Error::Config(format!("kernel order {k} is not available for n = {}", self.field.dim.n())));
            }
        }
        if g.rings.is_some() && self.field.dim == Dim::Two {
            return Err(Error::Config("rings apply to n = 3 only".into()));
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON of the experiment. The output
    /// directory and the forward method are excluded, so runs of one
    /// experiment with different methods share the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.pipeline.order = ForwardMethod::Kernel(0);
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pulse(&self) -> Result<SourcePulse> {
        match self.pulse.shape {
            PulseShape::Triangle => SourcePulse::triangle(self.pulse.eta, self.horizon),
            PulseShape::Box => SourcePulse::boxcar(self.pulse.eta, self.horizon),
        }
    }

    pub fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grids.dt, self.horizon)
    }

    pub fn acquisition(&self) -> Result<Acquisition> {
        let time = self.time()?;
        match self.grids.rings {
            Some(k) => Acquisition::rings(k, self.grids.boundary_nodes, time),
            None => Acquisition::full(self.field.dim, self.grids.boundary_nodes, time),
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            particles: self.mc.particles,
            seed: self.seed,
            roulette_threshold: self.mc.roulette_threshold,
            survival: self.mc.survival,
            max_order: self.mc.max_order,
        }
    }

    pub fn known_optics(&self) -> KnownOptics {
        KnownOptics::of(&self.field)
    }

    pub fn recon_settings(&self) -> ReconSettings {
        ReconSettings {
            n_angles: self.grids.sinogram_angles,
            n_offsets: self.grids.sinogram_offsets,
            image_size: self.grids.image_size,
            ballistic: self.pipeline.ballistic,
            window: self.pipeline.fit_window,
            max_residual: self.pipeline.max_residual,
            ..ReconSettings::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "field": { "dim": 2, "sigma": { "type": "constant", "value": 0.0 }, "k0": { "type": "constant", "value": 0.0 } },
        "pulse": { "eta": 0.05 },
        "horizon": 3.0,
        "grids": { "boundary_nodes": 16, "dt": 0.02 }
    }"#;

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.pipeline.order, ForwardMethod::Kernel(2));
        assert_eq!(c.grids.sinogram_angles, 180);
        assert_eq!(c.seed, 0);
        assert_eq!(c.acquisition().unwrap().nodes.len(), 16);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn schema_errors() {
        let bad = [
            MINIMAL.replace("\"horizon\": 3.0", "\"horizon\": 1.5"),
            MINIMAL.replace("\"eta\": 0.05", "\"eta\": 5.0"),
            MINIMAL.replace("\"dt\": 0.02", "\"dt\": 0.02, \"colour\": 1"),
            MINIMAL.replace("\"boundary_nodes\": 16", "\"boundary_nodes\": 3"),
            MINIMAL.replace("\"dim\": 2", "\"dim\": 4"),
        ];
        for b in bad {
            assert!(matches!(ExperimentConfig::from_json(&b), Err(Error::Config(_))), "{b}");
        }
    }

    #[test]
    fn hash_ignores_method_and_output() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.pipeline.order = ForwardMethod::MonteCarlo;
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn method_labels() {
        for s in ["0", "1", "2", "mc"] {
            assert_eq!(s.parse::<ForwardMethod>().unwrap().to_string(), s);
        }
        assert!("3".parse::<ForwardMethod>().is_err());
    }
}
