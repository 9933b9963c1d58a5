use thiserror::Error;

/// Error type shared by every fallible operation in the crate.
///
/// The four variants map one-to-one onto the CLI exit-code contract:
/// `Io`, `Manifest` and `Data` are "the inputs are unusable" (exit 2),
/// `Numerical` is "the inputs were readable but the computation could not
/// be carried out" (exit 3) — rank-deficient overlaps, singular Gram
/// matrices, failed factorizations and the like.
#[derive(Debug, Error)]
pub enum CmmiError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CmmiError>;

/// Non-fatal diagnostics go to stderr so they never disturb output files.
pub(crate) fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}
