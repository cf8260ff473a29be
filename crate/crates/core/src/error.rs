use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A problem exceeds an enumeration or memory cap.
    #[error("size limit exceeded: {0}")]
    Size(String),

    /// Shapes of matrices or sample sets disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A factorization or iterative solve failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Input data violate a structural requirement (constant trace, bad labels, ...).
    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Size(_) => "size",
            Error::Dimension(_) => "dimension",
            Error::Numerical(_) => "numerical",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !($cond) {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
