//! Client for an external teacher model serving single-line rewrites and
//! test proposals over HTTP.
//!
//! Request: `POST endpoint` with `{"mode", "line", "context", "problem"}`.
//! Response: `{"rewritten_line": ...}` for mutate/refactor, `{"assertion": ...}`
//! for testgen. Any non-200 status is treated as unavailability.

use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("teacher unavailable: {0}")]
    Unavailable(String),
    #[error("malformed teacher response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct TeacherRequest {
    pub mode: String,
    pub line: String,
    pub context: String,
    pub problem: String,
}

#[derive(Clone)]
pub struct TeacherClient {
    endpoint: String,
    agent: ureq::Agent,
    max_in_flight: usize,
}

impl std::fmt::Debug for TeacherClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeacherClient")
            .field("endpoint", &self.endpoint)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl TeacherClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
    pub const DEFAULT_IN_FLIGHT: usize = 4;

    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_limits(endpoint, Self::DEFAULT_TIMEOUT, Self::DEFAULT_IN_FLIGHT)
    }

    pub fn with_limits(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint: endpoint.into(), agent, max_in_flight: max_in_flight.max(1) }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Sends one request and returns the named string field of the reply.
    pub fn request_field(&self, req: &TeacherRequest, field: &str) -> Result<String, TeacherError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| TeacherError::Unavailable(e.to_string()))?;
        if resp.status().as_u16() != 200 {
            return Err(TeacherError::Unavailable(format!("HTTP {}", resp.status())));
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TeacherError::MalformedResponse(e.to_string()))?;
        body.get(field)
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| TeacherError::MalformedResponse(format!("missing string field `{field}`")))
    }

    /// Runs `f` over `items` with at most `max_in_flight` concurrent calls,
    /// preserving input order in the output.
    pub fn map_bounded<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&TeacherClient, T) -> R + Sync,
    {
        let n = items.len();
        let queue = Mutex::new(items.into_iter().enumerate());
        let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..self.max_in_flight.min(n.max(1)) {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap().next();
                    let Some((i, item)) = next else { break };
                    let r = f(self, item);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results.into_inner().unwrap().into_iter().map(|r| r.expect("every item processed")).collect()
    }
}

#[cfg(test)]
pub(crate) mod testserver {
    //! A throwaway HTTP/1.1 server returning canned bodies.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    pub struct Canned {
        pub url: String,
        pub requests: Arc<Mutex<Vec<String>>>,
    }

    /// Serves `responses` in order (status, body); the last one repeats.
    pub fn serve(responses: Vec<(u16, String)>) -> Canned {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/rewrite", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        std::thread::spawn(move || {
            let mut idx = 0;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                log.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                let (status, resp) = responses[idx.min(responses.len() - 1)].clone();
                idx += 1;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{resp}",
                    resp.len()
                );
            }
        });
        Canned { url, requests }
    }
}
