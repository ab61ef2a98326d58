//! Blocking JSON-over-HTTP client shared by the remote embedding provider,
//! remote LM oracle and remote query rewriter.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            retries: 2,
            backoff: Duration::from_millis(100),
            timeout: Duration::from_secs(60),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteClient {
    endpoint: String,
    http: reqwest::blocking::Client,
    options: RemoteOptions,
    permits: Permits,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>, options: RemoteOptions) -> Result<Self> {
        let endpoint = endpoint.into();
        let http = reqwest::blocking::Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(|e| Error::RemoteUnavailable {
                endpoint: endpoint.clone(),
                status: e.to_string(),
            })?;
        Ok(Self {
            permits: Permits {
                free: Mutex::new(options.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            endpoint,
            http,
            options,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// POSTs `body` as JSON. Transport errors and 5xx responses are retried with
    /// exponential backoff; 4xx responses fail immediately.
    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp> {
        let _permit = self.permits.acquire();
        let mut attempt = 0;
        loop {
            let outcome = self.http.post(&self.endpoint).json(body).send();
            let status = match outcome {
                Ok(resp) if resp.status().is_success() => {
                    let bytes = resp.bytes().map_err(|e| self.unavailable(e.to_string()))?;
                    return serde_json::from_slice(&bytes)
                        .map_err(|e| self.unavailable(format!("invalid response body: {e}")));
                }
                Ok(resp) if resp.status().is_client_error() => {
                    return Err(self.unavailable(resp.status().to_string()));
                }
                Ok(resp) => resp.status().to_string(),
                Err(e) => e.to_string(),
            };
            if attempt >= self.options.retries {
                return Err(self.unavailable(status));
            }
            std::thread::sleep(self.options.backoff * 2u32.pow(attempt));
            attempt += 1;
        }
    }

    fn unavailable(&self, status: String) -> Error {
        Error::RemoteUnavailable {
            endpoint: self.endpoint.clone(),
            status,
        }
    }
}
