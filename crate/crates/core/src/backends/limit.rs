use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BackendError;

/// Counting semaphore capping the requests outstanding against one backend.
#[derive(Debug)]
pub struct InflightLimiter {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl InflightLimiter {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "in-flight capacity must be at least 1");
        Self {
            capacity,
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut in_use = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        while *in_use >= self.capacity {
            in_use = self.freed.wait(in_use).unwrap_or_else(|e| e.into_inner());
        }
        *in_use += 1;
        InflightPermit { limiter: self }
    }

    fn release(&self) {
        let mut in_use = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        *in_use -= 1;
        self.freed.notify_one();
    }
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        self.limiter.release();
    }
}

/// Exponential backoff for retryable backend failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_retries: u32) -> Self {
        Self {
            max_retries,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget runs out. `target` names the item in the final error.
    pub fn run<T>(
        &self,
        target: impl FnOnce() -> String,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) if attempts > self.max_retries => {
                    return Err(BackendError::Exhausted {
                        target: target(),
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => {
                    log::debug!("retryable backend failure (attempt {attempts}): {e}");
                    let wait = self.backoff(attempts - 1);
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                }
            }
        }
    }
}
