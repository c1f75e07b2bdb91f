//! Room acoustic rendering networks.
//!
//! A recursive delay network approximating acoustic radiance transfer: the
//! room boundary is split into patches, every ordered pair of mutually
//! visible patches becomes a delay line, and a block-sparse unilossless
//! feedback matrix redistributes energy between the lines meeting at each
//! patch.
//!
//! The pipeline, stage by stage:
//!
//! - [`scene`]: load a polygonal room, split it into patches.
//! - [`kernel`]: delay lines, integer delays and the energy reflection kernel.
//! - [`matrices`]: Householder, Sinkhorn-Knopp and uniform feedback matrices.
//! - [`tracing`]: injection of order `K`, detection, image-source bypass.
//! - [`network`]: assemble the network and render an impulse response.
//! - [`metrics`]: EDC, T30, EDT, echo density, octave filterbank.
//!
//! [`pipeline`] wires the stages together from a single [`pipeline::RunConfig`].

pub mod air;
pub mod geometry;
pub mod kernel;
pub mod matrices;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod scene;
pub mod seed;
pub mod tracing;

pub use geometry::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("polygon {polygon} is not planar (deviation {deviation:.3e} m)")]
    NonPlanar { polygon: usize, deviation: f64 },
    #[error("polygon {polygon} is not convex")]
    NonConvex { polygon: usize },
    #[error("polygon {polygon} is degenerate: {reason}")]
    DegeneratePolygon { polygon: usize, reason: &'static str },
    #[error("polygon {polygon} uses unknown material {name:?}")]
    UnknownMaterial { polygon: usize, name: String },
    #[error("material {0:?} has coefficients outside [0, 1]")]
    InvalidMaterial(String),
    #[error("source outside boundary at {0}")]
    SourceOutside(String),
    #[error("receiver outside boundary at {0}")]
    ReceiverOutside(String),
    #[error("open scene: {0}")]
    OpenScene(String),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("isolated patch {patch}: incoming energy cannot be reflected to any line")]
    IsolatedPatch { patch: usize },
    #[error("no total support{}: {detail}", patch.map(|p| format!(" at patch {p}")).unwrap_or_default())]
    NoTotalSupport { patch: Option<usize>, detail: String },
    #[error("closest unilossless iteration did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("receiver occluded everywhere")]
    ReceiverOccluded,
    #[error("instability detected at sample {sample}")]
    Unstable { sample: usize },
    #[error("metric error: {0}")]
    Metric(String),
}
