//! Shared HTTP/JSON plumbing for the score, mask and plan services.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

const MAX_BODY_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("schema violation in `{field}`: {detail}")]
    Schema { field: String, detail: String },
    #[error("provider error: {0}")]
    Provider(String),
}

impl WireError {
    pub fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        WireError::Schema {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    pub base_delay_secs: f64,
    pub timeout_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay_secs: 0.5,
            timeout_secs: 120.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `n` (0-based): `base · 2ⁿ`.
    pub fn delay(&self, n: u32) -> Duration {
        Duration::from_secs_f64(self.base_delay_secs * 2f64.powi(n as i32))
    }
}

/// Blocking JSON-over-HTTP client with retry on transport failure and 5xx.
#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(retry.timeout_secs)))
            .build()
            .into();
        Self { agent, retry }
    }

    pub fn retry(&self) -> &RetryPolicy {
        &self.retry
    }

    /// POSTs `body` and returns the parsed JSON reply. A reply carrying an
    /// `error` string becomes [`WireError::Provider`].
    pub fn post(&self, url: &str, body: &[u8]) -> Result<Value, WireError> {
        let mut last = String::new();
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            let resp = self
                .agent
                .post(url)
                .header("Content-Type", "application/json")
                .send(body);
            let mut resp = match resp {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("POST {url} attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let bytes = match resp.body_mut().with_config().limit(MAX_BODY_BYTES).read_to_vec() {
                Ok(b) => b,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let parsed: Option<Value> = serde_json::from_slice(&bytes).ok();
            if let Some(msg) = parsed
                .as_ref()
                .and_then(|v| v.get("error"))
                .and_then(Value::as_str)
            {
                return Err(WireError::Provider(msg.to_string()));
            }
            if status >= 500 {
                last = format!("HTTP {status}");
                log::warn!("POST {url} attempt {} returned {status}", attempt + 1);
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(WireError::Provider(format!(
                    "HTTP {status}: {}",
                    excerpt(&String::from_utf8_lossy(&bytes))
                )));
            }
            return parsed.ok_or_else(|| {
                WireError::schema(
                    "body",
                    format!("not JSON: {}", excerpt(&String::from_utf8_lossy(&bytes))),
                )
            });
        }
        Err(WireError::Transport {
            attempts: self.retry.retries + 1,
            message: last,
        })
    }
}

/// First 200 characters of `s`, for error messages.
pub fn excerpt(s: &str) -> String {
    let mut out: String = s.chars().take(200).collect();
    if s.chars().count() > 200 {
        out.push('…');
    }
    out
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(field: &str, s: &str) -> Result<Vec<u8>, WireError> {
    STANDARD
        .decode(s)
        .map_err(|e| WireError::schema(field, format!("invalid base64: {e}")))
}

/// Little-endian f32 bytes of `values`.
pub fn f32_le_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn f32_le_values(field: &str, bytes: &[u8], expected: usize) -> Result<Vec<f64>, WireError> {
    if bytes.len() != expected * 4 {
        return Err(WireError::schema(
            field,
            format!("expected {} bytes ({expected} f32), got {}", expected * 4, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(WireError::schema(field, "non-finite value"));
    }
    Ok(values)
}

pub fn str_field<'a>(v: &'a Value, field: &str) -> Result<&'a str, WireError> {
    v.get(field)
        .ok_or_else(|| WireError::schema(field, "missing"))?
        .as_str()
        .ok_or_else(|| WireError::schema(field, "not a string"))
}
