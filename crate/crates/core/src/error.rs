use crate::geom::Vec3;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// Numeric kernels are written to be total on their documented domains; the
/// variants here mark the few places where a caller can genuinely ask for
/// something undefined (a normal at a singular point, a surface that does
/// not exist) or where external input is malformed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The analytic gradient vanishes at this point (e.g. a sphere centre),
    /// so no unit normal exists.
    #[error("gradient is singular at ({}, {}, {}); no unit normal exists", p.x, p.y, p.z)]
    SingularPoint { p: Vec3 },

    /// Two buffers that must agree in length do not.
    #[error("shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    /// A normal map is too small to split into the critic's 3x3 patch grid.
    #[error("normal map {w}x{h} is too small to patch; both sides must be >= {min}")]
    MapTooSmall { w: usize, h: usize, min: usize },

    /// The field has no zero crossing inside the domain.
    #[error("field has no zero level set inside the domain; nothing to extract")]
    EmptySurface,

    /// A mesh operation was asked to run on a mesh with no triangles.
    #[error("mesh has no triangles")]
    EmptyMesh,

    /// A loss became non-finite during training.
    #[error("training diverged at epoch {epoch}, step {step}: total loss = {value}")]
    DivergenceDetected { epoch: usize, step: usize, value: f64 },

    /// A configuration combination that cannot be run.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Malformed text input (scene description or key=value config).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed binary input (checkpoint or image file).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
