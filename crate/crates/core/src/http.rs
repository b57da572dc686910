//! Blocking JSON-over-HTTP plumbing shared by the remote encoder and the
//! remote completion backend: bearer auth, retry with exponential backoff,
//! a minimum spacing between requests, and a bound on in-flight requests.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug)]
pub(crate) enum HttpFailure {
    /// Retries exhausted on transport errors, 429s or 5xx responses.
    Exhausted(String),
    /// A non-retryable status; carries status and body.
    Rejected(u16, String),
    /// The response body did not decode.
    Decode(String),
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub(crate) struct JsonClient {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    min_interval: Duration,
    next_slot: Mutex<Instant>,
    gate: Gate,
}

impl JsonClient {
    pub(crate) fn new(
        url: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
        requests_per_second: Option<f64>,
        max_in_flight: usize,
    ) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        let min_interval = match requests_per_second {
            Some(rps) if rps > 0.0 => Duration::from_secs_f64(1.0 / rps),
            _ => Duration::ZERO,
        };
        Ok(Self {
            client,
            url: url.into(),
            api_key,
            retry,
            min_interval,
            next_slot: Mutex::new(Instant::now()),
            gate: Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit: max_in_flight.max(1),
            },
        })
    }

    fn wait_for_slot(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + self.min_interval;
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }

    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, HttpFailure> {
        let _permit = self.gate.acquire();
        let mut last_error = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(self.retry.delay(attempt - 1));
            }
            self.wait_for_slot();
            let mut request = self.client.post(&self.url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let response = match request.send() {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("request to {} failed (attempt {}): {e}", self.url, attempt + 1);
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            let text = response.text().unwrap_or_default();
            if status.is_success() {
                return serde_json::from_str(&text).map_err(|e| HttpFailure::Decode(e.to_string()));
            }
            if status.as_u16() == 429 || status.is_server_error() {
                log::warn!("{} returned {status} (attempt {})", self.url, attempt + 1);
                last_error = format!("{status}: {text}");
                continue;
            }
            return Err(HttpFailure::Rejected(status.as_u16(), text));
        }
        Err(HttpFailure::Exhausted(last_error))
    }
}
