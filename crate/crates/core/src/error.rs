use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Engine errors. The `module` prefix in each message names the engine that
/// raised it so that CLI output keeps its provenance.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("symbolic_base: invalid base system: {}", .0.join("; "))]
    InvalidBase(Vec<String>),

    #[error("symbolic_base: singular point {x} lies on a breakpoint")]
    SingularPoint { x: f64 },

    #[error("symbolic_base: point {x} outside [0,1)")]
    OutOfDomain { x: f64 },

    #[error("fiber_extension: invalid fiber action: {}", .0.join("; "))]
    InvalidAction(Vec<String>),

    #[error("fiber_extension: window underflow: {0}; use a larger window L")]
    WindowUnderflow(String),

    #[error("{module}: hypothesis not met: {reason}")]
    HypothesisNotMet { module: &'static str, reason: String },

    #[error("decomposition: inconclusive, enlarge window: {0}")]
    Inconclusive(String),

    #[error("decomposition: unsupported classification: {0}")]
    Unsupported(String),

    #[error("decomposition: exactness certification failed for atom {atom}: {reason}")]
    CertificationFailed { atom: usize, reason: String },

    #[error("decomposition: slow mixing on atom {atom}: norm {norm:e} after {max_power} powers, raise max_power")]
    SlowMixing { atom: usize, norm: f64, max_power: usize },

    #[error("k_quotient: action is not measurable w.r.t. the retained coordinates: {0}")]
    NotBMeasurable(String),

    #[error("k_quotient: {0}")]
    Quotient(String),

    #[error("lorentz_gas: invalid configuration: {}", .0.join("; "))]
    InvalidLorentz(Vec<String>),

    #[error("lorentz_gas: horizon escape: no scatterer hit within {cells} cells")]
    HorizonEscape { cells: u32 },

    #[error("lorentz_gas: singular trajectory: {0}")]
    Singular(String),

    #[error("cli_io: invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("cli_io: {0}")]
    Io(String),
}
