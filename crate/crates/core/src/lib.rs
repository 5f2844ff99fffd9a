//! Height-driven BEV feature construction. Per-cell anchor heights pick the
//! image evidence each BEV query gathers; a small recursive predictor learns
//! those heights from the queries themselves.

pub mod bevgrid;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod pgm;
pub mod pipeline;
pub mod predictor;
pub mod sampling;
pub mod synthscene;

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Grid(#[from] bevgrid::GridError),
    #[error(transparent)]
    Scene(#[from] synthscene::SceneError),
    #[error(transparent)]
    Predictor(#[from] predictor::PredictorError),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Predictor(
                predictor::PredictorError::DivergenceDetected(_)
                    | predictor::PredictorError::NonFiniteLoss
                    | predictor::PredictorError::NonFiniteGradient
            )
        )
    }
}
