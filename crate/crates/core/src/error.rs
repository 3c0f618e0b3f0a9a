use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("expression error: {0}")]
    Expr(String),

    #[error("assembly of coefficient `{coefficient}` produced a non-finite entry at t = {t}")]
    Assembly { coefficient: String, t: f64 },

    #[error("certification failed: {0}")]
    Certification(CertificationFailure),

    #[error("propagation failed at step {step} (t = {t}){context}")]
    Propagation {
        step: usize,
        t: f64,
        context: String,
    },

    #[error("manufactured solution is outside the basis span (projection defect {defect:.3e} at t = {t})")]
    OutsideSpan { defect: f64, t: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Witness attached to a failed certification.
#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertificationFailure {
    /// A coefficient sample fell outside its declared bounds.
    CoefficientBound {
        symbol: String,
        t: f64,
        x: f64,
        y: f64,
        value: f64,
        lower: f64,
        upper: f64,
    },
    /// The shifted form is not coercive; `witness` holds coordinates of the offending vector.
    Coercivity { t: f64, alpha: f64, witness: Vec<f64> },
}

impl std::fmt::Display for CertificationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::CoefficientBound {
                symbol,
                t,
                x,
                y,
                value,
                lower,
                upper,
            } => write!(
                f,
                "coefficient {symbol} = {value} at (t, x, y) = ({t}, {x}, {y}) leaves declared range [{lower}, {upper}]"
            ),
            Self::Coercivity { t, alpha, .. } => {
                write!(f, "coercivity constant {alpha} <= 0 at t = {t}")
            }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
