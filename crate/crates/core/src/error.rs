//! Error taxonomy shared across the crate.
//!
//! `Domain` covers parameter and precondition violations (negative masses,
//! imaginary-time offsets outside the KMS strip, truncation guards),
//! `Numeric` covers non-finite values surfacing from quadrature or Monte
//! Carlo, and `Parse` covers malformed scenario input. The CLI maps the
//! variants onto distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QstError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl QstError {
    pub fn domain(msg: impl Into<String>) -> Self {
        QstError::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        QstError::Numeric(msg.into())
    }

    /// Guard a computed value against NaN/Inf.
    pub fn check_finite(value: num_complex::Complex64, context: &str) -> Result<num_complex::Complex64, QstError> {
        if value.re.is_finite() && value.im.is_finite() {
            Ok(value)
        } else {
            Err(QstError::Numeric(format!("non-finite value in {context}: {value}")))
        }
    }
}
