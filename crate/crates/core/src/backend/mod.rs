//! Interfaces to the external model capabilities.
//!
//! Each capability is a trait with two implementations: a deterministic mock
//! (pure function of its inputs) and an HTTP client speaking a small JSON
//! protocol. [`Backends`] bundles one of each kind for the pipeline.

pub mod http;
pub mod mock;
pub mod pngio;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_id, sha256_hex, Embedding, ImageRecord, PromptRecord, PromptSource};
use crate::prompt::{self, RewriteRequest};

/// Square output sizes accepted by [`generate_image`].
pub const IMAGE_SIZES: [u32; 3] = [256, 512, 1024];

pub trait TextToImage: Send + Sync {
    fn generate(&self, prompt: &PromptRecord, seed: u64, size: u32) -> Result<Vec<u8>>;
    fn identifier(&self) -> String;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, image: &[u8]) -> Result<Embedding>;
    fn identifier(&self) -> String;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &[u8]) -> Result<String>;
    fn identifier(&self) -> String;
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String>;
    fn identifier(&self) -> String;
}

pub trait StyleTransfer: Send + Sync {
    fn transfer(&self, image: &[u8], target_domain: &str) -> Result<Vec<u8>>;
    fn identifier(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    TextToImage,
    Embedder,
    Captioner,
    Rewriter,
    StyleTransfer,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::TextToImage,
        BackendKind::Embedder,
        BackendKind::Captioner,
        BackendKind::Rewriter,
        BackendKind::StyleTransfer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::TextToImage => "text_to_image",
            BackendKind::Embedder => "embedder",
            BackendKind::Captioner => "captioner",
            BackendKind::Rewriter => "rewriter",
            BackendKind::StyleTransfer => "style_transfer",
        }
    }

    fn url_env(self) -> &'static str {
        match self {
            BackendKind::TextToImage => "AIR_T2I_URL",
            BackendKind::Embedder => "AIR_EMBED_URL",
            BackendKind::Captioner => "AIR_CAPTION_URL",
            BackendKind::Rewriter => "AIR_REWRITE_URL",
            BackendKind::StyleTransfer => "AIR_STYLE_URL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub mode: BackendMode,
    pub base_url: Option<String>,
    pub timeout_secs: f64,
    pub max_parallel: usize,
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
}

impl BackendConfig {
    pub fn mock(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            mode: BackendMode::Mock,
            base_url: None,
            timeout_secs: 60.0,
            max_parallel: 8,
            auth_token: None,
        }
    }

    pub fn http(kind: BackendKind, base_url: impl Into<String>) -> Self {
        BackendConfig {
            mode: BackendMode::Http,
            base_url: Some(base_url.into()),
            ..Self::mock(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == BackendMode::Http && self.base_url.is_none() {
            return Err(Error::validation(
                format!("backends.{}.base_url", self.kind.as_str()),
                "http mode requires a base URL",
            ));
        }
        if self.max_parallel == 0 {
            return Err(Error::validation(format!("backends.{}.max_parallel", self.kind.as_str()), "must be ≥ 1"));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::validation(format!("backends.{}.timeout", self.kind.as_str()), "must be positive"));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// One backend of each kind, shareable across workers.
#[derive(Clone)]
pub struct Backends {
    pub text_to_image: Arc<dyn TextToImage>,
    pub embedder: Arc<dyn Embedder>,
    pub captioner: Arc<dyn Captioner>,
    pub rewriter: Arc<dyn Rewriter>,
    pub style_transfer: Arc<dyn StyleTransfer>,
    /// Smallest `max_parallel` across the bundle; pipeline parallelism may not exceed it.
    pub max_parallel: usize,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.identifiers()).finish()
    }
}

impl Backends {
    /// All-mock bundle with the default embedding noise.
    pub fn mock() -> Self {
        Self::mock_with_sigma(mock::DEFAULT_EMBED_SIGMA)
    }

    pub fn mock_with_sigma(sigma: f64) -> Self {
        Backends {
            text_to_image: Arc::new(mock::MockTextToImage),
            embedder: Arc::new(mock::MockEmbedder::new(sigma)),
            captioner: Arc::new(mock::MockCaptioner),
            rewriter: Arc::new(mock::MockRewriter),
            style_transfer: Arc::new(mock::MockStyleTransfer),
            max_parallel: 64,
        }
    }

    pub fn from_configs(configs: &[BackendConfig], mock_sigma: f64) -> Result<Self> {
        let mut out = Self::mock_with_sigma(mock_sigma);
        let mut limits = Vec::new();
        for cfg in configs {
            cfg.validate()?;
            limits.push(cfg.max_parallel);
            if cfg.mode == BackendMode::Mock {
                continue;
            }
            let client = http::HttpClient::new(cfg)?;
            match cfg.kind {
                BackendKind::TextToImage => out.text_to_image = Arc::new(http::HttpTextToImage(client)),
                BackendKind::Embedder => out.embedder = Arc::new(http::HttpEmbedder(client)),
                BackendKind::Captioner => out.captioner = Arc::new(http::HttpCaptioner(client)),
                BackendKind::Rewriter => out.rewriter = Arc::new(http::HttpRewriter(client)),
                BackendKind::StyleTransfer => out.style_transfer = Arc::new(http::HttpStyleTransfer(client)),
            }
        }
        if let Some(min) = limits.into_iter().min() {
            out.max_parallel = min;
        }
        Ok(out)
    }

    /// Reads `AIR_BACKEND_MODE` (mock|http, default mock) and the per-kind URL
    /// variables. In http mode, kinds without a URL stay mocked.
    /// `AIR_MOCK_EMBED_SIGMA` overrides the mock embedder noise.
    pub fn from_env() -> Result<Self> {
        let mode = std::env::var("AIR_BACKEND_MODE").unwrap_or_else(|_| "mock".into());
        let sigma = match std::env::var("AIR_MOCK_EMBED_SIGMA") {
            Ok(s) => s
                .parse::<f64>()
                .map_err(|_| Error::validation("AIR_MOCK_EMBED_SIGMA", format!("not a number: `{s}`")))?,
            Err(_) => mock::DEFAULT_EMBED_SIGMA,
        };
        let token = std::env::var("AIR_BACKEND_TOKEN").ok();
        let configs: Vec<BackendConfig> = match mode.as_str() {
            "mock" => BackendKind::ALL.iter().map(|k| BackendConfig::mock(*k)).collect(),
            "http" => BackendKind::ALL
                .iter()
                .map(|k| match std::env::var(k.url_env()) {
                    Ok(url) => BackendConfig {
                        auth_token: token.clone(),
                        ..BackendConfig::http(*k, url)
                    },
                    Err(_) => BackendConfig::mock(*k),
                })
                .collect(),
            other => return Err(Error::validation("AIR_BACKEND_MODE", format!("expected mock|http, got `{other}`"))),
        };
        Self::from_configs(&configs, sigma)
    }

    pub fn identifiers(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("captioner".to_string(), self.captioner.identifier()),
            ("embedder".to_string(), self.embedder.identifier()),
            ("rewriter".to_string(), self.rewriter.identifier()),
            ("style_transfer".to_string(), self.style_transfer.identifier()),
            ("text_to_image".to_string(), self.text_to_image.identifier()),
        ])
    }

    pub fn is_all_mock(&self) -> bool {
        self.identifiers().values().all(|id| id.starts_with("mock"))
    }
}

/// Generates a `size`×`size` PNG for `prompt`.
pub fn generate_image(backend: &dyn TextToImage, prompt: &PromptRecord, seed: u64, size: u32) -> Result<Vec<u8>> {
    if !IMAGE_SIZES.contains(&size) {
        return Err(Error::validation("size", format!("image size {size} not in {IMAGE_SIZES:?}")));
    }
    prompt::serialize_prompt(&prompt.terms)?;
    let bytes = backend.generate(prompt, seed, size)?;
    let decoded = pngio::decode(&bytes).map_err(|e| Error::backend(backend.identifier(), None, e.to_string()))?;
    if decoded.width != size || decoded.height != size {
        return Err(Error::backend(
            backend.identifier(),
            None,
            format!("expected {size}x{size}, got {}x{}", decoded.width, decoded.height),
        ));
    }
    Ok(bytes)
}

pub fn embed_image(backend: &dyn Embedder, image: &[u8]) -> Result<Embedding> {
    backend.embed(image)
}

/// Captions a source image into an extracted prompt labelled with the source class.
///
/// Reserved prompt characters in the caption are replaced by spaces so the
/// caption always parses.
pub fn caption_image(backend: &dyn Captioner, image: &[u8], source: &ImageRecord) -> Result<PromptRecord> {
    let raw = backend.caption(image)?;
    let cleaned: String = raw.chars().map(|c| if c == '(' || c == ')' { ' ' } else { c }).collect();
    let terms = prompt::parse_prompt(&cleaned)?;
    if terms.is_empty() {
        return Err(Error::backend(backend.identifier(), None, "empty caption"));
    }
    Ok(PromptRecord {
        id: derive_id("p", &[b"extracted", source.id.as_bytes(), sha256_hex(image).as_bytes()]),
        terms,
        source: PromptSource::Extracted,
        combination: None,
        class_label: source.class_label.clone(),
    })
}

pub fn rewrite(backend: &dyn Rewriter, request: &RewriteRequest) -> Result<String> {
    request.validate()?;
    backend.rewrite(request)
}

pub fn style_transfer(backend: &dyn StyleTransfer, image: &[u8], target_domain: &str) -> Result<Vec<u8>> {
    backend.transfer(image, target_domain)
}
