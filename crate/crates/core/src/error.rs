//! Error type shared by all numerical operations.

/// Errors produced by the channel, guidance, sampler and oracle operations.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Vector lengths or matrix shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar argument is outside its valid range (step index, variance, ...).
    #[error("range error: {0}")]
    Range(String),
    /// A matrix that must be invertible is singular (zero diagonal, coincident nodes).
    #[error("singular: {0}")]
    Singular(String),
    /// The multistep coefficient system could not be solved.
    #[error("coefficient system: {0}")]
    Coefficient(String),
    /// A linear-algebra routine failed (non-SPD matrix, failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// An iteration produced non-finite values.
    #[error("divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(name: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Dimension(format!(
            "{name}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}
