use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("singular configuration: C1 = {c1:.3e}")]
    SingularConfiguration { c1: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible nominal path: {0}")]
    InfeasiblePath(String),

    #[error("projection onto the nominal path lost near s = {s_prev:.3} m")]
    ProjectionLost { s_prev: f64 },

    #[error("station {s:.4} m outside path domain [{start:.4}, {end:.4}]")]
    OutOfDomain { s: f64, start: f64, end: f64 },

    #[error("Frenet transformation invalid: 1 - kappa*z = {margin:.4}, |theta error| = {heading:.4}")]
    ValidityViolated { margin: f64, heading: f64 },

    #[error("nominal joint angles outside the joint-angle polytope at row {row} (slack {slack:.4})")]
    NominalOutsidePolytope { row: usize, slack: f64 },

    #[error("prediction horizon runs past the end of the path at s = {s:.3} m")]
    PathExhausted { s: f64 },

    #[error("Riccati iteration did not converge in {iterations} iterations")]
    RiccatiDiverged { iterations: usize },

    #[error("stable and visible region is empty at margin {margin} rad")]
    EmptyRegion { margin: f64 },

    #[error("QP solver: {0}")]
    Qp(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
