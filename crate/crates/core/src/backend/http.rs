//! JSON-over-HTTP clients for real model servers.
//!
//! Every backend is a single `POST` endpoint. Requests carry
//! `{prompt | image_b64, seed, size | domain}` and responses
//! `{image_b64 | embedding | caption | text}`. A timed-out request is retried
//! once after a jittered backoff; HTTP error statuses are never retried.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, BackendKind, Captioner, Embedder, Rewriter, StyleTransfer, TextToImage};
use crate::error::{Error, Result};
use crate::model::{Embedding, PromptRecord};
use crate::prompt::{template, RewriteRequest};

/// Counting semaphore bounding in-flight requests per backend.
#[derive(Debug)]
struct Admission {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Admission);

impl Admission {
    fn new(n: usize) -> Self {
        Admission {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    kind: BackendKind,
    auth_token: Option<String>,
    admission: Admission,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("endpoint", &self.endpoint)
            .field("kind", &self.kind)
            .finish()
    }
}

impl HttpClient {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient {
            agent,
            endpoint: config.base_url.clone().expect("validated http config"),
            kind: config.kind,
            auth_token: config.auth_token.clone(),
            admission: Admission::new(config.max_parallel),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn send_once<Req: Serialize>(&self, body: &Req) -> std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(token) = &self.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        request.send_json(body)
    }

    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp> {
        let _permit = self.admission.acquire();
        let mut response = match self.send_once(body) {
            Err(ureq::Error::Timeout(_)) => {
                let jitter = rand::rng().random_range(0..100);
                std::thread::sleep(Duration::from_millis(100 + jitter));
                self.send_once(body)
            }
            other => other,
        }
        .map_err(|e| Error::backend(&self.endpoint, None, e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::backend(&self.endpoint, Some(status), detail));
        }
        response
            .body_mut()
            .read_json::<Resp>()
            .map_err(|e| Error::backend(&self.endpoint, Some(status), format!("malformed payload: {e}")))
    }

    fn decode_b64(&self, text: &str) -> Result<Vec<u8>> {
        B64.decode(text)
            .map_err(|e| Error::backend(&self.endpoint, None, format!("malformed payload: {e}")))
    }

    fn identifier(&self) -> String {
        format!("http:{}", self.endpoint)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    seed: u64,
    size: u32,
}

#[derive(Serialize)]
struct ImageRequest<'a> {
    image_b64: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<&'a str>,
}

#[derive(Serialize)]
struct RewriteBody<'a> {
    prompt: &'a str,
    template_id: &'a str,
    max_terms: usize,
}

#[derive(Deserialize)]
struct ImageResponse {
    image_b64: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Debug)]
pub struct HttpTextToImage(pub HttpClient);

impl TextToImage for HttpTextToImage {
    fn generate(&self, prompt: &PromptRecord, seed: u64, size: u32) -> Result<Vec<u8>> {
        let text = prompt.text();
        let resp: ImageResponse = self.0.post_json(&GenerateRequest { prompt: &text, seed, size })?;
        self.0.decode_b64(&resp.image_b64)
    }

    fn identifier(&self) -> String {
        self.0.identifier()
    }
}

#[derive(Debug)]
pub struct HttpEmbedder(pub HttpClient);

impl Embedder for HttpEmbedder {
    fn embed(&self, image: &[u8]) -> Result<Embedding> {
        let b64 = B64.encode(image);
        let resp: EmbeddingResponse = self.0.post_json(&ImageRequest { image_b64: &b64, domain: None })?;
        let v = resp.embedding;
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::backend(self.0.endpoint(), None, "embedding has zero or non-finite norm"));
        }
        Embedding::new(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
            .map_err(|e| Error::backend(self.0.endpoint(), None, e.to_string()))
    }

    fn identifier(&self) -> String {
        self.0.identifier()
    }
}

#[derive(Debug)]
pub struct HttpCaptioner(pub HttpClient);

impl Captioner for HttpCaptioner {
    fn caption(&self, image: &[u8]) -> Result<String> {
        let b64 = B64.encode(image);
        let resp: CaptionResponse = self.0.post_json(&ImageRequest { image_b64: &b64, domain: None })?;
        Ok(resp.caption)
    }

    fn identifier(&self) -> String {
        self.0.identifier()
    }
}

#[derive(Debug)]
pub struct HttpRewriter(pub HttpClient);

impl Rewriter for HttpRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String> {
        let tpl = template(&request.instruction_template_id).ok_or_else(|| {
            Error::validation("instruction_template_id", format!("unknown template `{}`", request.instruction_template_id))
        })?;
        let prompt = tpl.render(request);
        let resp: TextResponse = self.0.post_json(&RewriteBody {
            prompt: &prompt,
            template_id: tpl.id,
            max_terms: request.max_terms,
        })?;
        Ok(resp.text)
    }

    fn identifier(&self) -> String {
        self.0.identifier()
    }
}

#[derive(Debug)]
pub struct HttpStyleTransfer(pub HttpClient);

impl StyleTransfer for HttpStyleTransfer {
    fn transfer(&self, image: &[u8], target_domain: &str) -> Result<Vec<u8>> {
        let b64 = B64.encode(image);
        let resp: ImageResponse = self.0.post_json(&ImageRequest {
            image_b64: &b64,
            domain: Some(target_domain),
        })?;
        self.0.decode_b64(&resp.image_b64)
    }

    fn identifier(&self) -> String {
        self.0.identifier()
    }
}
