//! Flag definitions and config resolution (flags over config file over
//! defaults).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rarenet::matrices::Design;
use rarenet::network::AirMode;
use rarenet::pipeline::RunConfig;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "rarenet", version, about = "Room acoustic rendering networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one room impulse response.
    Render(RenderArgs),
    /// Decay and echo-density metrics of WAV files.
    Metrics(MetricsArgs),
    /// Kernel energy and feedback-matrix checks.
    Validate(ValidateArgs),
    /// Render and analyse a grid of configurations in parallel.
    Sweep(SweepArgs),
}

/// Run parameters shared by every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config file; may also hold `scene` and `out`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene JSON file.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// householder, sinkhorn or uniform.
    #[arg(long, value_parser = parse_design)]
    pub design: Option<Design>,
    /// Injection order K.
    #[arg(long, short = 'k')]
    pub order: Option<usize>,
    /// Spread injectors (`--spread`, `--spread false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub spread: Option<bool>,
    /// Longest patch edge in metres.
    #[arg(long)]
    pub max_edge: Option<f64>,
    /// Kernel sample spacing in metres.
    #[arg(long)]
    pub sample_spacing: Option<f64>,
    /// Injection rays per run.
    #[arg(long = "rays")]
    pub n_rays: Option<usize>,
    /// Sample rate in hertz.
    #[arg(long)]
    pub fs: Option<f64>,
    /// Top-level random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Render length in seconds, or `auto`.
    #[arg(long, value_parser = parse_length)]
    pub length: Option<Length>,
    /// off, broadband, banded or auto.
    #[arg(long, value_parser = parse_air)]
    pub air: Option<AirMode>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Length {
    Auto,
    Seconds(f64),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also write kernel, matrix, filter and raw sample CSV dumps.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// WAV files to analyse.
    #[arg(required = true)]
    pub wavs: Vec<PathBuf>,
    /// Output directory (default: current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Echo-density window in milliseconds.
    #[arg(long, default_value_t = rarenet::metrics::DEFAULT_NED_WINDOW_MS)]
    pub window_ms: f64,
    /// Restrict rows to these bands (Hz or `broadband`), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub bands: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Designs to check, comma separated (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_design)]
    pub designs: Vec<Design>,
    /// Kernel CSV (`from_line,to_line,value`) to check instead of computing one.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Additional scene files.
    #[arg(long = "scenes", value_delimiter = ',')]
    pub scenes: Vec<PathBuf>,
    /// Designs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_design)]
    pub designs: Vec<Design>,
    /// Injection orders, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub orders: Vec<usize>,
    /// Spread settings, e.g. `false,true`.
    #[arg(long = "spreads", value_delimiter = ',')]
    pub spreads: Vec<bool>,
    /// Longest patch edges in metres, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub max_edges: Vec<f64>,
}

fn parse_design(s: &str) -> Result<Design, String> {
    s.parse().map_err(|e: rarenet::Error| e.to_string())
}

fn parse_air(s: &str) -> Result<AirMode, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown air mode {s:?} (expected off, broadband, banded or auto)"))
}

fn parse_length(s: &str) -> Result<Length, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Length::Auto);
    }
    s.parse().map(Length::Seconds).map_err(|_| format!("invalid length {s:?} (seconds or auto)"))
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub config: RunConfig,
}

impl RunArgs {
    /// Merges the config file (if any) under the flags.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut map = match &self.config {
            Some(path) => read_config(path)?,
            None => Map::new(),
        };
        let take_path = |map: &mut Map<String, Value>, key: &str| -> Result<Option<PathBuf>, CliError> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(other) => Err(CliError::Usage(format!("config key {key:?} must be a string, got {other}"))),
            }
        };
        let file_scene = take_path(&mut map, "scene")?;
        let file_out = take_path(&mut map, "out")?;
        let mut config: RunConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| CliError::Usage(format!("config file: {e}")))?;
        if let Some(v) = self.design {
            config.design = v;
        }
        if let Some(v) = self.order {
            config.order = v;
        }
        if let Some(v) = self.spread {
            config.spread = v;
        }
        if let Some(v) = self.max_edge {
            config.max_edge = v;
        }
        if let Some(v) = self.sample_spacing {
            config.sample_spacing = v;
        }
        if let Some(v) = self.n_rays {
            config.n_rays = v;
        }
        if let Some(v) = self.fs {
            config.fs = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        match self.length {
            Some(Length::Auto) => config.length = None,
            Some(Length::Seconds(s)) => config.length = Some(s),
            None => {}
        }
        if let Some(v) = self.air {
            config.air = v;
        }
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if config.fs.fract() != 0.0 || config.fs > u32::MAX as f64 {
            return Err(CliError::Usage(format!("fs must be a whole number of hertz, got {}", config.fs)));
        }
        let base = self.config.as_deref().and_then(Path::parent);
        let rebase = |p: PathBuf| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        };
        Ok(Resolved {
            scene: self.scene.clone().or(file_scene.map(rebase)),
            out: self.out.clone().or(file_out.map(rebase)),
            config,
        })
    }
}

fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("config {} must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}
