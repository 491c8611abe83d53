//! Bounded retries with seeded, jittered exponential backoff, plus the
//! blocking HTTP agent shared by the provider clients.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_ms: u64,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 100,
            max_delay_ms: 5_000,
            timeout_ms: 30_000,
            seed: 0,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests against local mocks.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
            ..Self::default()
        }
    }

    fn delay(&self, key: u64, attempt: u32) -> Duration {
        if self.base_delay_ms == 0 {
            return Duration::ZERO;
        }
        let jitter: f64 = rng_for(self.seed, &[key, u64::from(attempt)]).random_range(0.5..1.5);
        let exp = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
        Duration::from_millis(((exp as f64 * jitter) as u64).min(self.max_delay_ms))
    }

    pub(crate) fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.timeout_ms)))
            .build()
            .into()
    }

    /// Run `op` until it succeeds, fails fatally, or the attempt budget is
    /// spent. `key` separates the jitter streams of concurrent callers.
    pub(crate) fn run<T>(&self, key: u64, mut op: impl FnMut() -> Result<T, Attempt>) -> Result<T, String> {
        let attempts = self.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(msg)) => return Err(msg),
                Err(Attempt::Retry(msg)) => last = msg,
            }
            if attempt + 1 < attempts {
                std::thread::sleep(self.delay(key, attempt));
            }
        }
        Err(format!("gave up after {attempts} attempts: {last}"))
    }
}

#[derive(Debug)]
pub(crate) enum Attempt {
    Retry(String),
    Fatal(String),
}

impl From<ureq::Error> for Attempt {
    fn from(e: ureq::Error) -> Self {
        match e {
            ureq::Error::StatusCode(code) if code < 500 => Attempt::Fatal(format!("HTTP {code}")),
            ureq::Error::StatusCode(code) => Attempt::Retry(format!("HTTP {code}")),
            other => Attempt::Retry(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_until_budget() {
        let policy = RetryPolicy::immediate(3);
        let mut calls = 0;
        let r: Result<(), _> = policy.run(0, || {
            calls += 1;
            Err(Attempt::Retry("down".into()))
        });
        assert_eq!(calls, 3);
        assert!(r.unwrap_err().contains("3 attempts"));
    }

    #[test]
    fn fatal_stops_early() {
        let policy = RetryPolicy::immediate(5);
        let mut calls = 0;
        let r: Result<(), _> = policy.run(0, || {
            calls += 1;
            Err(Attempt::Fatal("bad request".into()))
        });
        assert_eq!((calls, r.unwrap_err().as_str()), (1, "bad request"));
    }

    #[test]
    fn jitter_is_seeded_and_bounded() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(4, 1), p.delay(4, 1));
        assert!(p.delay(4, 1) >= Duration::from_millis(100) && p.delay(4, 1) <= Duration::from_millis(300));
        assert!(p.delay(4, 20) <= Duration::from_millis(5_000));
    }
}
