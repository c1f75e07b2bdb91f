//! End-to-end runs: scene → patches → kernel → feedback matrix → tracing →
//! render, driven by one [`RunConfig`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::air::AirAbsorption;
use crate::kernel::{compute_kernel, enumerate_paths, KernelConfig, KernelMatrix, PathTable};
use crate::matrices::{Design, UnilosslessConfig};
use crate::network::{build_network, default_length, AirMode, Network, NetworkConfig, Rir};
use crate::scene::{discretize, PatchSet, Scene, DEFAULT_SAMPLE_SPACING};
use crate::tracing::{TraceConfig, DEFAULT_RAYS};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub design: Design,
    /// Injection order `K`.
    pub order: usize,
    pub spread: bool,
    /// Longest patch edge, in metres.
    pub max_edge: f64,
    pub sample_spacing: f64,
    pub n_rays: usize,
    pub fs: f64,
    pub seed: u64,
    /// Render length in seconds; `None` picks twice the Eyring estimate.
    pub length: Option<f64>,
    pub air: AirMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            design: Design::Householder,
            order: 1,
            spread: false,
            max_edge: 6.0,
            sample_spacing: DEFAULT_SAMPLE_SPACING,
            n_rays: DEFAULT_RAYS,
            fs: 48000.0,
            seed: 0,
            length: None,
            air: AirMode::Auto,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.max_edge > 0.0) {
            return bad("max_edge must be positive");
        }
        if !(self.sample_spacing > 0.0) {
            return bad("sample_spacing must be positive");
        }
        if self.n_rays == 0 {
            return bad("n_rays must be at least 1");
        }
        if !(self.fs > 0.0) {
            return bad("fs must be positive");
        }
        if let Some(l) = self.length {
            if !(l > 0.0) {
                return bad("length must be positive");
            }
        }
        Ok(())
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig { sample_spacing: self.sample_spacing, seed: self.seed, fs: self.fs }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            design: self.design,
            order: self.order,
            trace: TraceConfig { n_rays: self.n_rays, seed: self.seed, fs: self.fs, spread: self.spread, air: None },
            air_mode: self.air,
            air: AirAbsorption::default(),
            unilossless: UnilosslessConfig { seed: self.seed, ..UnilosslessConfig::default() },
        }
    }

    pub fn length_samples(&self, scene: &Scene) -> usize {
        match self.length {
            Some(s) => ((s * self.fs).round() as usize).max(1),
            None => default_length(scene, self.fs),
        }
    }
}

/// Geometry-dependent stages, shared by runs that differ only in design,
/// injection order or tracing options.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: Scene,
    pub patches: PatchSet,
    pub paths: PathTable,
    pub kernel: KernelMatrix,
    pub seconds: f64,
}

pub fn prepare(scene: &Scene, max_edge: f64, sample_spacing: f64, fs: f64, seed: u64) -> Result<Prepared, Error> {
    let start = Instant::now();
    let patches = discretize(scene, max_edge)?.with_sample_spacing(scene, sample_spacing);
    let paths = enumerate_paths(&patches, scene, fs)?;
    let kernel = compute_kernel(&patches, &paths, scene, &KernelConfig { sample_spacing, seed, fs })?;
    Ok(Prepared { scene: scene.clone(), patches, paths, kernel, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub prepare_s: f64,
    pub build_s: f64,
    pub render_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub network: Network,
    pub rir: Rir,
    pub patches: usize,
    pub lines: usize,
    pub timings: Timings,
}

/// Builds and renders a network on already prepared geometry.
pub fn run_prepared(prepared: &Prepared, cfg: &RunConfig) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let start = Instant::now();
    let network = build_network(&prepared.scene, &prepared.patches, &prepared.paths, &prepared.kernel, &cfg.network_config())?;
    let build_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let rir = network.render(cfg.length_samples(&prepared.scene))?;
    Ok(RunOutput {
        patches: prepared.patches.len(),
        lines: prepared.paths.len(),
        network,
        rir,
        timings: Timings { prepare_s: prepared.seconds, build_s, render_s: start.elapsed().as_secs_f64() },
    })
}

/// The whole pipeline for one configuration.
pub fn run(scene: &Scene, cfg: &RunConfig) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let prepared = prepare(scene, cfg.max_edge, cfg.sample_spacing, cfg.fs, cfg.seed)?;
    run_prepared(&prepared, cfg)
}
