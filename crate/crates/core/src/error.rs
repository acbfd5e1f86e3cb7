use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The selected minor passed the determinant threshold but `FᵀAGᵀ` could not be inverted.
    #[error("degenerate minor selection at enumeration index {minor_index}")]
    DegenerateSelection { minor_index: usize },

    #[error("matrix too large for minor enumeration: {rows}x{cols} (limit 8x8)")]
    MinorEnumerationTooLarge { rows: usize, cols: usize },

    #[error("non-finite coefficient `{name}` at t={t}, x={x:?}, y={y:?}")]
    ModelEvaluation {
        name: &'static str,
        t: f64,
        x: Vec<f64>,
        y: Vec<f64>,
    },

    #[error("path explosion at step {step} (|state| > 1e12)")]
    Explosion { step: usize },

    #[error("all {n_particles} particles exploded")]
    AllParticlesExploded { n_particles: usize },

    #[error("degenerate measure: total mass is {mass}")]
    DegenerateMeasure { mass: f64 },

    #[error("mass process lost positivity at step {step} (j = {value}); reduce dt or use the log-Euler variant")]
    PositivityLoss { step: usize, value: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("particle support not covered by grid: {0}")]
    SupportCoverage(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
