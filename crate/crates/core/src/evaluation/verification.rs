//! Face-verification score over HTTP.
//!
//! Contract: `POST <endpoint>` with a JSON body
//! `{"image_a": <base64 PNG>, "image_b": <base64 PNG>}` and, when credentials
//! are configured, an `Authorization: Bearer <token>` header. A successful
//! reply is `200` with `{"confidence": <number in [0, 100]>}`.

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{squared_distance, Embedder, PixelStatsEmbedder};
use crate::data::{rgb_to_tensor, tensor_to_rgb};
use crate::model::ImageBatch;

/// Environment variable holding the bearer token for the verification backend.
pub const CREDENTIALS_ENV: &str = "USGAN_VERIFY_TOKEN";

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("verification request timed out")]
    Timeout,
    #[error("verification transport failure: {0}")]
    Transport(String),
    #[error("verification backend answered HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("verification protocol error: {0}")]
    Protocol(String),
    #[error("cannot encode image for verification: {0}")]
    Encode(String),
}

impl VerifyError {
    /// Whether repeating the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            VerifyError::Timeout | VerifyError::Transport(_) => true,
            VerifyError::Status { status, .. } => *status == 429 || *status >= 500,
            VerifyError::Protocol(_) | VerifyError::Encode(_) => false,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub image_a: String,
    pub image_b: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub confidence: f64,
}

/// Image `n` of a batch as base64 PNG.
pub fn encode_png_base64(images: &ImageBatch, n: usize) -> Result<String, VerifyError> {
    let mut buf = Cursor::new(Vec::new());
    tensor_to_rgb(images.tensor(), n)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| VerifyError::Encode(e.to_string()))?;
    Ok(BASE64.encode(buf.into_inner()))
}

#[derive(Clone, Debug)]
pub struct VerificationClient {
    pub endpoint: String,
    pub credentials: Option<String>,
    pub timeout: Duration,
    agent: ureq::Agent,
}

impl VerificationClient {
    pub fn new(endpoint: impl Into<String>, credentials: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build();
        Self { endpoint: endpoint.into(), credentials, timeout, agent: ureq::Agent::new_with_config(config) }
    }

    /// Credentials come from [`CREDENTIALS_ENV`] when set.
    pub fn from_env(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self::new(endpoint, std::env::var(CREDENTIALS_ENV).ok().filter(|t| !t.is_empty()), timeout)
    }

    /// Similarity in `[0, 100]` between image `i` of `x` and image `i` of `y`.
    pub fn score(&self, x: &ImageBatch, y: &ImageBatch, i: usize) -> Result<f64, VerifyError> {
        let body = serde_json::to_string(&VerifyRequest { image_a: encode_png_base64(x, i)?, image_b: encode_png_base64(y, i)? })
            .expect("request serializes");
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(token) = &self.credentials {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body.as_str()).map_err(|e| match e {
            ureq::Error::Timeout(_) => VerifyError::Timeout,
            other => VerifyError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => VerifyError::Timeout,
            other => VerifyError::Transport(other.to_string()),
        })?;
        if status != 200 {
            return Err(VerifyError::Status { status, body: text });
        }
        let parsed: VerifyResponse =
            serde_json::from_str(&text).map_err(|e| VerifyError::Protocol(format!("{e} in response {text:?}")))?;
        if !(0.0..=100.0).contains(&parsed.confidence) {
            return Err(VerifyError::Protocol(format!("confidence {} outside [0, 100]", parsed.confidence)));
        }
        Ok(parsed.confidence)
    }

    /// Score every pair with at most `max_in_flight` concurrent requests.
    /// Results are in pair order.
    pub fn score_all(&self, x: &ImageBatch, y: &ImageBatch, max_in_flight: usize) -> Vec<Result<f64, VerifyError>> {
        let n = x.len().min(y.len());
        let width = max_in_flight.max(1);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(width) {
            let end = (start + width).min(n);
            let chunk: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = (start..end).map(|i| s.spawn(move || self.score(x, y, i))).collect();
                handles.into_iter().map(|h| h.join().expect("verification worker panicked")).collect()
            });
            out.extend(chunk);
        }
        out
    }
}

/// Local backend implementing the contract with
/// `100 · exp(−‖φ(a) − φ(b)‖²)` over the pixel-statistics embedder.
pub struct MockVerificationServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

impl MockVerificationServer {
    /// Serve on an ephemeral localhost port. With `token`, requests lacking the
    /// matching bearer header get `401`.
    pub fn start(token: Option<String>) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server.server_addr().to_ip().expect("bound to an IP address");
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let worker = std::thread::spawn(move || {
            let embedder = PixelStatsEmbedder::default();
            while !flag.load(Ordering::Relaxed) {
                let Ok(Some(mut request)) = server.recv_timeout(Duration::from_millis(50)) else {
                    continue;
                };
                let authorized = token.as_ref().is_none_or(|t| {
                    let want = format!("Bearer {t}");
                    request.headers().iter().any(|h| h.field.equiv("Authorization") && h.value.as_str() == want)
                });
                let (code, body) = if !authorized {
                    (401, r#"{"error":"unauthorized"}"#.to_string())
                } else {
                    let mut text = String::new();
                    match request.as_reader().read_to_string(&mut text) {
                        Ok(_) => match mock_confidence(&embedder, &text) {
                            Ok(c) => (200, serde_json::to_string(&VerifyResponse { confidence: c }).unwrap()),
                            Err(e) => (400, serde_json::json!({ "error": e }).to_string()),
                        },
                        Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
                    }
                };
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                let _ = request.respond(tiny_http::Response::from_string(body).with_status_code(code).with_header(header));
            }
        });
        Ok(Self { addr, stop, worker: Some(worker) })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/verify", self.addr)
    }
}

impl Drop for MockVerificationServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn decode(field: &str) -> Result<ImageBatch, String> {
    let bytes = BASE64.decode(field).map_err(|e| format!("bad base64: {e}"))?;
    let img = image::load_from_memory(&bytes).map_err(|e| format!("bad image: {e}"))?.to_rgb8();
    if img.width() != img.height() {
        return Err(format!("image is {}x{}, expected square", img.width(), img.height()));
    }
    ImageBatch::new(rgb_to_tensor(&img)).map_err(|e| e.to_string())
}

/// Confidence the mock backend assigns to a request body.
pub fn mock_confidence(embedder: &dyn Embedder, body: &str) -> Result<f64, String> {
    let req: VerifyRequest = serde_json::from_str(body).map_err(|e| format!("bad request: {e}"))?;
    let (a, b) = (decode(&req.image_a)?, decode(&req.image_b)?);
    let fa = embedder.embed(&a, 0).map_err(|e| e.to_string())?;
    let fb = embedder.embed(&b, 0).map_err(|e| e.to_string())?;
    Ok(100.0 * (-squared_distance(&fa, &fb).map_err(|e| e.to_string())?).exp())
}
