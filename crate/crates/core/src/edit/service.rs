//! Edit and critic service endpoints, with bounded retry on transport errors.

use std::thread;
use std::time::Duration;

use log::warn;
use thiserror::Error;

use super::protocol::{CritiqueRequest, CritiqueResponse, EditRequest, EditResponse};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ServiceError {
    /// Connection, timeout or server-side failure; worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The service answered, but not with something we can use.
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl ServiceError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_))
    }
}

pub trait EditService: Send + Sync {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse, ServiceError>;
}

pub trait CriticService: Send + Sync {
    fn critique(&self, request: &CritiqueRequest) -> Result<CritiqueResponse, ServiceError>;
}

impl<T: EditService + ?Sized> EditService for Box<T> {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse, ServiceError> {
        (**self).edit(request)
    }
}

impl<T: CriticService + ?Sized> CriticService for Box<T> {
    fn critique(&self, request: &CritiqueRequest) -> Result<CritiqueResponse, ServiceError> {
        (**self).critique(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles afterwards.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    pub fn run<T>(&self, what: &str, mut call: impl FnMut() -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self.base_delay * 2u32.saturating_pow(attempt - 1);
                    warn!("{what}: attempt {attempt}/{attempts} failed, retrying in {delay:?}: {e}");
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_transport_errors_up_to_limit() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(3).run("t", || {
            calls.set(calls.get() + 1);
            Err(ServiceError::Transport("down".into()))
        });
        assert_eq!(calls.get(), 3);
        assert!(result.is_err());
    }

    #[test]
    fn malformed_is_not_retried() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(5).run("t", || {
            calls.set(calls.get() + 1);
            Err(ServiceError::Malformed("junk".into()))
        });
        assert_eq!(calls.get(), 1);
        assert_eq!(result, Err(ServiceError::Malformed("junk".into())));
    }

    #[test]
    fn recovers_after_transient_failure() {
        let calls = Cell::new(0);
        let result = RetryPolicy::immediate(3).run("t", || {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(ServiceError::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(result, Ok(7));
        assert_eq!(calls.get(), 2);
    }
}
