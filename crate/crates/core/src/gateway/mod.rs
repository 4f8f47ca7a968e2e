//! Client layer for every external expert model: detectors, OCR, the region
//! captioner, the OCR verifier and the caption integrator.
//!
//! All five roles speak the same chat-completion request shape (see
//! [`wire`]). A [`Gateway`] call goes cache lookup -> admission (in-flight +
//! per-minute limits) -> transport -> retry on retryable failures -> cache
//! insert.

pub mod cache;
pub mod clock;
pub mod http;
pub mod limiter;
pub mod stub;
pub mod wire;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ClientError, ClientErrorKind, Error, Result};
use crate::model::{BBox, DenseCaption, Detection, GeneratorMeta, OcrEntry};
use crate::templates::{self, template_version};
use crate::tokenizer::Tokenizer;

use cache::{request_hash, CacheEntry, ResponseCache};
use clock::{Clock, SystemClock};
use limiter::EndpointLimiter;
use wire::{ChatMessage, ChatRequest, ChatResponse};

pub use stub::{StubBehavior, StubTransport};

/// Environment variable holding the bearer token unless overridden.
pub const DEFAULT_AUTH_ENV: &str = "FULLANNO_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Decoding {
    /// Defaults for short per-region answers (descriptions, OCR checks,
    /// structured detector/OCR output).
    pub const REGION: Decoding = Decoding {
        temperature: 0.2,
        max_output_tokens: 512,
    };
    /// Defaults for dense-caption integration.
    pub const INTEGRATION: Decoding = Decoding {
        temperature: 0.7,
        max_output_tokens: 1024,
    };
}

fn default_auth_env() -> String {
    DEFAULT_AUTH_ENV.to_string()
}
fn default_in_flight() -> usize {
    4
}
fn default_rpm() -> usize {
    600
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub endpoint_id: String,
    #[serde(default)]
    pub base_url: String,
    #[serde(default = "default_auth_env")]
    pub auth_env_var: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Milliseconds; attempt `k` (0-based) waits `backoff_base * 2^k`.
    #[serde(default = "default_backoff")]
    pub backoff_base: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Filled from the endpoint's role when absent.
    #[serde(default)]
    pub decoding: Option<Decoding>,
    /// Behavior when served by the stub transport (`--dry-run`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub: Option<StubBehavior>,
}

impl EndpointConfig {
    pub fn new(endpoint_id: impl Into<String>) -> Self {
        Self {
            endpoint_id: endpoint_id.into(),
            base_url: String::new(),
            auth_env_var: default_auth_env(),
            model: String::new(),
            max_in_flight: default_in_flight(),
            requests_per_minute: default_rpm(),
            max_retries: default_retries(),
            backoff_base: default_backoff(),
            timeout_ms: default_timeout(),
            decoding: None,
            stub: None,
        }
    }

    pub fn with_stub(mut self, stub: StubBehavior) -> Self {
        self.stub = Some(stub);
        self
    }

    pub fn decoding(&self) -> Decoding {
        self.decoding.unwrap_or(Decoding::REGION)
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint_id.is_empty() {
            return Err(Error::Config("endpoint_id must be non-empty".into()));
        }
        if self.max_in_flight < 1 || self.requests_per_minute < 1 {
            return Err(Error::Config(format!(
                "endpoint {}: max_in_flight and requests_per_minute must be >= 1",
                self.endpoint_id
            )));
        }
        Ok(())
    }

    /// Delay before retry number `attempt + 1`. Non-decreasing, capped at 60 s.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.backoff_base.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(60_000))
    }
}

/// Failure reported by a [`Transport`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Status(u16, String),
    Timeout,
    Network(String),
}

impl TransportError {
    /// Timeouts, HTTP 429, HTTP 5xx and connection failures.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status(code, _) => *code == 429 || (500..600).contains(code),
            TransportError::Timeout | TransportError::Network(_) => true,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            TransportError::Timeout => write!(f, "timeout"),
            TransportError::Network(m) => write!(f, "network: {m}"),
        }
    }
}

/// Moves request bytes to an endpoint and returns the response body.
pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &EndpointConfig, body: &[u8]) -> std::result::Result<Vec<u8>, TransportError>;
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub network_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub retries: AtomicU64,
    pub clamped_boxes: AtomicU64,
    pub dropped_boxes: AtomicU64,
    backoffs: Mutex<Vec<Duration>>,
}

impl GatewayStats {
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn backoffs(&self) -> Vec<Duration> {
        self.backoffs.lock().unwrap().clone()
    }
}

/// The image a request is about.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// Text answer plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedText {
    pub text: String,
    pub generator: GeneratorMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayResponse {
    pub content: String,
    pub timestamp: u64,
    pub from_cache: bool,
}

struct Endpoint {
    config: EndpointConfig,
    limiter: EndpointLimiter,
}

pub struct Gateway {
    endpoints: HashMap<String, Endpoint>,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    cache: Option<ResponseCache>,
    fixed_timestamp: Option<u64>,
    image_root: String,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(endpoints: Vec<EndpointConfig>, transport: Arc<dyn Transport>) -> Result<Self> {
        let mut map = HashMap::new();
        for config in endpoints {
            config.validate()?;
            let limiter = EndpointLimiter::new(config.max_in_flight, config.requests_per_minute);
            let id = config.endpoint_id.clone();
            if map.insert(id.clone(), Endpoint { config, limiter }).is_some() {
                return Err(Error::Config(format!("duplicate endpoint id `{id}`")));
            }
        }
        Ok(Self {
            endpoints: map,
            transport,
            clock: Arc::new(SystemClock::new()),
            cache: None,
            fixed_timestamp: None,
            image_root: String::new(),
            stats: GatewayStats::default(),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Stamp every response with this time instead of the clock's.
    pub fn with_fixed_timestamp(mut self, ts: Option<u64>) -> Self {
        self.fixed_timestamp = ts;
        self
    }

    /// Directory or URL prefix that image file names are resolved against.
    pub fn with_image_root(mut self, root: impl Into<String>) -> Self {
        self.image_root = root.into();
        self
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn timestamp(&self) -> u64 {
        self.fixed_timestamp.unwrap_or_else(|| self.clock.unix_now())
    }

    pub fn endpoint(&self, id: &str) -> Result<&EndpointConfig> {
        self.endpoints
            .get(id)
            .map(|e| &e.config)
            .ok_or_else(|| Error::Config(format!("unknown endpoint `{id}`")))
    }

    /// URL for an image, with an optional `#xywh=` media fragment for crops.
    pub fn image_url(&self, file_name: &str, crop: Option<&BBox>) -> String {
        let root = self.image_root.trim_end_matches('/');
        let mut url = if root.starts_with("http://") || root.starts_with("https://") || root.starts_with("file://") {
            format!("{root}/{file_name}")
        } else if root.is_empty() {
            format!("file://{file_name}")
        } else {
            format!("file://{root}/{file_name}")
        };
        if let Some(b) = crop {
            url.push_str(&format!("#xywh={},{},{},{}", b.x, b.y, b.w, b.h));
        }
        url
    }

    fn request(&self, endpoint: &EndpointConfig, system: &str, user: ChatMessage) -> ChatRequest {
        let decoding = endpoint.decoding();
        ChatRequest {
            model: endpoint.model.clone(),
            messages: vec![ChatMessage::system(system), user],
            temperature: decoding.temperature,
            max_tokens: decoding.max_output_tokens,
        }
    }

    fn meta(&self, endpoint: &EndpointConfig, timestamp: u64) -> GeneratorMeta {
        let decoding = endpoint.decoding();
        GeneratorMeta {
            endpoint_id: endpoint.endpoint_id.clone(),
            model: endpoint.model.clone(),
            temperature: decoding.temperature,
            max_output_tokens: decoding.max_output_tokens,
            template_version: template_version().to_string(),
            timestamp,
        }
    }

    /// Send one chat request through cache, limits and retries.
    pub fn call(&self, endpoint_id: &str, request: &ChatRequest) -> Result<GatewayResponse> {
        let ep = self
            .endpoints
            .get(endpoint_id)
            .ok_or_else(|| Error::Config(format!("unknown endpoint `{endpoint_id}`")))?;
        let body = request.to_bytes();
        let hash = request_hash(endpoint_id, template_version(), &body);

        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&hash)) {
            if let Ok(content) = parse_content(endpoint_id, entry.response.as_bytes()) {
                self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(GatewayResponse {
                    content,
                    timestamp: entry.timestamp,
                    from_cache: true,
                });
            }
        }

        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = ep.limiter.acquire(self.clock.as_ref());
                self.stats.network_calls.fetch_add(1, Ordering::SeqCst);
                self.transport.send(&ep.config, &body)
            };
            match result {
                Ok(bytes) => {
                    let content = parse_content(endpoint_id, &bytes)?;
                    let timestamp = self.timestamp();
                    let timestamp = match &self.cache {
                        Some(cache) => {
                            let response = String::from_utf8(bytes).map_err(|_| Error::MalformedResponse {
                                endpoint_id: endpoint_id.to_string(),
                                message: "response is not UTF-8".into(),
                            })?;
                            cache
                                .put(CacheEntry {
                                    request_hash: hash,
                                    response,
                                    timestamp,
                                })?
                                .timestamp
                        }
                        None => timestamp,
                    };
                    return Ok(GatewayResponse {
                        content,
                        timestamp,
                        from_cache: false,
                    });
                }
                Err(err) if err.is_retryable() && attempt < ep.config.max_retries => {
                    let delay = ep.config.backoff(attempt);
                    self.stats.retries.fetch_add(1, Ordering::SeqCst);
                    self.stats.backoffs.lock().unwrap().push(delay);
                    self.clock.sleep(delay);
                    attempt += 1;
                }
                Err(err) => {
                    let kind = if err.is_retryable() {
                        ClientErrorKind::FatalAfterRetry
                    } else {
                        ClientErrorKind::Fatal
                    };
                    return Err(ClientError {
                        endpoint_id: endpoint_id.to_string(),
                        kind,
                        attempts: attempt + 1,
                        message: err.to_string(),
                    }
                    .into());
                }
            }
        }
    }

    fn malformed(endpoint_id: &str, message: impl Into<String>) -> Error {
        Error::MalformedResponse {
            endpoint_id: endpoint_id.to_string(),
            message: message.into(),
        }
    }

    fn image_request(&self, endpoint: &EndpointConfig, system: &str, image: &ImageRef) -> ChatRequest {
        let descriptor = json!({
            "image": image.file_name,
            "width": image.width,
            "height": image.height,
        });
        let user = ChatMessage::user_with_image(descriptor.to_string(), self.image_url(&image.file_name, None));
        self.request(endpoint, templates::body(system), user)
    }

    /// Clamp a reported box to the image; `None` (and a counted drop) when
    /// nothing with area remains.
    fn admit_box(&self, bbox: BBox, image: &ImageRef) -> Option<BBox> {
        match bbox.clamp_to(image.width as f64, image.height as f64) {
            Some(b) => {
                if b != bbox {
                    self.stats.clamped_boxes.fetch_add(1, Ordering::SeqCst);
                }
                Some(b)
            }
            None => {
                self.stats.dropped_boxes.fetch_add(1, Ordering::SeqCst);
                None
            }
        }
    }

    pub fn detect(&self, image: &ImageRef, endpoint_id: &str) -> Result<Vec<Detection>> {
        let ep = self.endpoint(endpoint_id)?;
        let req = self.image_request(ep, templates::DETECTION, image);
        let resp = self.call(endpoint_id, &req)?;
        let payload = parse_json_payload(endpoint_id, &resp.content)?;
        let items = payload
            .get("detections")
            .and_then(Value::as_array)
            .ok_or_else(|| Self::malformed(endpoint_id, "missing `detections` array"))?;
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let bbox = parse_bbox(item).ok_or_else(|| Self::malformed(endpoint_id, format!("detections[{i}].bbox")))?;
            let category = item
                .get("category")
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Self::malformed(endpoint_id, format!("detections[{i}].category")))?;
            let score = item
                .get("score")
                .and_then(Value::as_f64)
                .filter(|s| (0.0..=1.0).contains(s))
                .ok_or_else(|| Self::malformed(endpoint_id, format!("detections[{i}].score")))?;
            if let Some(bbox) = self.admit_box(bbox, image) {
                out.push(Detection::new(bbox, category, score, endpoint_id));
            }
        }
        Ok(out)
    }

    /// OCR entries come back unverified with `ocr_id` 0; callers assign ids.
    pub fn recognize_text(&self, image: &ImageRef, endpoint_id: &str) -> Result<Vec<OcrEntry>> {
        let ep = self.endpoint(endpoint_id)?;
        let req = self.image_request(ep, templates::OCR, image);
        let resp = self.call(endpoint_id, &req)?;
        let payload = parse_json_payload(endpoint_id, &resp.content)?;
        let items = payload
            .get("texts")
            .and_then(Value::as_array)
            .ok_or_else(|| Self::malformed(endpoint_id, "missing `texts` array"))?;
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let bbox = parse_bbox(item).ok_or_else(|| Self::malformed(endpoint_id, format!("texts[{i}].bbox")))?;
            let text = item
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| Self::malformed(endpoint_id, format!("texts[{i}].text")))?;
            let confidence = match item.get("confidence") {
                None => 1.0,
                Some(v) => v
                    .as_f64()
                    .filter(|c| (0.0..=1.0).contains(c))
                    .ok_or_else(|| Self::malformed(endpoint_id, format!("texts[{i}].confidence")))?,
            };
            if text.trim().is_empty() {
                continue;
            }
            if let Some(bbox) = self.admit_box(bbox, image) {
                out.push(OcrEntry {
                    ocr_id: 0,
                    bbox,
                    text: text.to_string(),
                    confidence,
                    source_id: endpoint_id.to_string(),
                    verified: false,
                    corrected_text: None,
                    verification_failed: false,
                    matched_object_id: None,
                });
            }
        }
        Ok(out)
    }

    /// Describe a context-padded crop. Empty answers are an error.
    pub fn describe_region(&self, image: &ImageRef, crop: &BBox, prompt: &str, endpoint_id: &str) -> Result<GeneratedText> {
        let ep = self.endpoint(endpoint_id)?;
        let user = ChatMessage::user_with_image(prompt, self.image_url(&image.file_name, Some(crop)));
        let req = ChatRequest {
            model: ep.model.clone(),
            messages: vec![user],
            temperature: ep.decoding().temperature,
            max_tokens: ep.decoding().max_output_tokens,
        };
        let resp = self.call(endpoint_id, &req)?;
        let text = resp.content.trim();
        if text.is_empty() {
            return Err(Error::EmptyResponse(endpoint_id.to_string()));
        }
        Ok(GeneratedText {
            text: text.to_string(),
            generator: self.meta(ep, resp.timestamp),
        })
    }

    /// Ask the verifier to read `text` in `crop`. The answer may be empty.
    pub fn verify_text(&self, image: &ImageRef, crop: &BBox, text: &str, endpoint_id: &str) -> Result<GeneratedText> {
        let ep = self.endpoint(endpoint_id)?;
        let prompt = templates::body(templates::OCR_VERIFICATION).replace("{text}", text);
        let user = ChatMessage::user_with_image(prompt, self.image_url(&image.file_name, Some(crop)));
        let req = ChatRequest {
            model: ep.model.clone(),
            messages: vec![user],
            temperature: ep.decoding().temperature,
            max_tokens: ep.decoding().max_output_tokens,
        };
        let resp = self.call(endpoint_id, &req)?;
        Ok(GeneratedText {
            text: resp.content.trim().to_string(),
            generator: self.meta(ep, resp.timestamp),
        })
    }

    pub fn integrate_caption(
        &self,
        message: &crate::enrich::IntegrationMessage,
        endpoint_id: &str,
        tokenizer: &dyn Tokenizer,
    ) -> Result<DenseCaption> {
        let ep = self.endpoint(endpoint_id)?;
        if message.content.trim().is_empty() {
            return Err(Error::EmptyBundle);
        }
        let req = self.request(ep, &message.system_preamble, ChatMessage::user_text(message.content.clone()));
        let resp = self.call(endpoint_id, &req)?;
        let text = resp.content.trim();
        if text.is_empty() {
            return Err(Error::EmptyResponse(endpoint_id.to_string()));
        }
        Ok(DenseCaption {
            text: text.to_string(),
            token_length: tokenizer.count(text),
            generator: self.meta(ep, resp.timestamp),
            prompt_hash: message.hash.clone(),
        })
    }
}

fn parse_content(endpoint_id: &str, bytes: &[u8]) -> Result<String> {
    let resp: ChatResponse = serde_json::from_slice(bytes).map_err(|e| Gateway::malformed(endpoint_id, e.to_string()))?;
    resp.first_content()
        .map(str::to_string)
        .ok_or_else(|| Gateway::malformed(endpoint_id, "no choices[0].message.content"))
}

/// Structured answers may arrive wrapped in a Markdown code fence.
fn parse_json_payload(endpoint_id: &str, content: &str) -> Result<Value> {
    let trimmed = content.trim();
    let inner = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    serde_json::from_str(inner.trim()).map_err(|e| Gateway::malformed(endpoint_id, e.to_string()))
}

fn parse_bbox(item: &Value) -> Option<BBox> {
    let arr = item.get("bbox")?.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let v: Vec<f64> = arr.iter().map(Value::as_f64).collect::<Option<_>>()?;
    v.iter().all(|x| x.is_finite()).then(|| BBox::new(v[0], v[1], v[2], v[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::clock::SimClock;
    use crate::gateway::stub::{StubBox, StubText};
    use crate::tokenizer::WhitespaceTokenizer;
    use std::collections::BTreeMap;

    fn image() -> ImageRef {
        ImageRef {
            file_name: "a.jpg".into(),
            width: 100,
            height: 100,
        }
    }

    fn gateway(endpoints: Vec<EndpointConfig>) -> (Gateway, Arc<StubTransport>) {
        let clock = Arc::new(SimClock::new());
        let stub = Arc::new(StubTransport::from_endpoints(&endpoints, clock.clone()));
        let gw = Gateway::new(endpoints, stub.clone()).unwrap().with_clock(clock);
        (gw, stub)
    }

    fn canned_boxes(boxes: Vec<StubBox>) -> StubBehavior {
        StubBehavior::CannedDetections {
            by_image: BTreeMap::new(),
            default: boxes,
        }
    }

    #[test]
    fn stub_detector_returns_canned_boxes() {
        let ep = EndpointConfig::new("det").with_stub(canned_boxes(vec![
            StubBox::new([1.0, 1.0, 10.0, 10.0], "dog", 0.9),
            StubBox::new([50.0, 50.0, 10.0, 10.0], "cat", 0.8),
        ]));
        let (gw, _) = gateway(vec![ep]);
        let dets = gw.detect(&image(), "det").unwrap();
        assert_eq!(dets.len(), 2);
        assert!(dets.iter().all(|d| d.source_id == "det"));
    }

    #[test]
    fn out_of_frame_detection_is_clamped() {
        let ep = EndpointConfig::new("det").with_stub(canned_boxes(vec![StubBox::new([90.0, 90.0, 20.0, 20.0], "dog", 0.9)]));
        let (gw, _) = gateway(vec![ep]);
        let dets = gw.detect(&image(), "det").unwrap();
        assert_eq!(dets[0].bbox, BBox::new(90.0, 90.0, 10.0, 10.0));
        assert_eq!(gw.stats().clamped_boxes.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn persistent_500_is_fatal_after_retry() {
        let mut ep = EndpointConfig::new("det").with_stub(canned_boxes(vec![]));
        ep.max_retries = 2;
        let (gw, stub) = gateway(vec![ep]);
        stub.fail_next("det", vec![TransportError::Status(500, "boom".into()); 3]);
        match gw.detect(&image(), "det") {
            Err(Error::Client(e)) => {
                assert_eq!(e.kind, ClientErrorKind::FatalAfterRetry);
                assert_eq!(e.attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(stub.calls("det"), 3);
    }

    #[test]
    fn client_error_is_not_retried() {
        let ep = EndpointConfig::new("det").with_stub(canned_boxes(vec![]));
        let (gw, stub) = gateway(vec![ep]);
        stub.fail_next("det", vec![TransportError::Status(401, "no".into())]);
        match gw.detect(&image(), "det") {
            Err(Error::Client(e)) => assert_eq!((e.kind, e.attempts), (ClientErrorKind::Fatal, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ocr_stub_and_malformed_payload() {
        let ok = EndpointConfig::new("ocr").with_stub(StubBehavior::CannedText {
            by_image: BTreeMap::new(),
            default: vec![StubText::new([5.0, 5.0, 10.0, 4.0], "13", 0.9)],
        });
        let empty = EndpointConfig::new("ocr-empty").with_stub(StubBehavior::CannedText {
            by_image: BTreeMap::new(),
            default: vec![],
        });
        let bad = EndpointConfig::new("ocr-bad").with_stub(StubBehavior::Fixed {
            content: r#"{"texts":[{"bbox":[1,1,2,2],"confidence":0.5}]}"#.into(),
        });
        let (gw, _) = gateway(vec![ok, empty, bad]);
        let entries = gw.recognize_text(&image(), "ocr").unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].text, "13");
        assert!(!entries[0].verified);
        assert!(gw.recognize_text(&image(), "ocr-empty").unwrap().is_empty());
        assert!(matches!(
            gw.recognize_text(&image(), "ocr-bad"),
            Err(Error::MalformedResponse { .. })
        ));
    }

    #[test]
    fn describe_region_is_cached_and_retried() {
        let ep = EndpointConfig::new("cap").with_stub(StubBehavior::EchoRegion);
        let (gw, stub) = gateway(vec![ep]);
        let gw = gw.with_cache(ResponseCache::in_memory());
        let crop = BBox::new(0.0, 0.0, 10.0, 10.0);
        let prompt = crate::enrich::build_region_prompt("dog").unwrap();
        stub.fail_next("cap", vec![TransportError::Status(429, "slow down".into())]);
        let first = gw.describe_region(&image(), &crop, &prompt, "cap").unwrap();
        assert_eq!(stub.calls("cap"), 2);
        assert_eq!(gw.stats().retries.load(Ordering::SeqCst), 1);
        let second = gw.describe_region(&image(), &crop, &prompt, "cap").unwrap();
        assert_eq!(first, second);
        assert_eq!(stub.calls("cap"), 2);
        assert_eq!(gw.stats().cache_hits(), 1);
        assert!(first.text.contains("dog"));
    }

    #[test]
    fn empty_region_answer_is_an_error() {
        let ep = EndpointConfig::new("cap").with_stub(StubBehavior::Fixed { content: "  ".into() });
        let (gw, _) = gateway(vec![ep]);
        let r = gw.describe_region(&image(), &BBox::new(0.0, 0.0, 1.0, 1.0), "p", "cap");
        assert!(matches!(r, Err(Error::EmptyResponse(_))));
    }

    #[test]
    fn integration_records_decoding() {
        let mut ep = EndpointConfig::new("llm").with_stub(StubBehavior::ConcatIntegrator);
        ep.decoding = Some(Decoding::INTEGRATION);
        let (gw, _) = gateway(vec![ep]);
        let gw = gw.with_fixed_timestamp(Some(42));
        let msg = crate::enrich::IntegrationMessage::new("sys".into(), "Text in image (OCR):\n- \"13\" (unattached)".into());
        let cap = gw.integrate_caption(&msg, "llm", &WhitespaceTokenizer).unwrap();
        assert_eq!(cap.generator.temperature, 0.7);
        assert_eq!(cap.generator.max_output_tokens, 1024);
        assert_eq!(cap.generator.timestamp, 42);
        assert_eq!(cap.prompt_hash, msg.hash);
        assert!(cap.text.contains("13"));
        assert_eq!(cap.token_length, WhitespaceTokenizer.count(&cap.text));
    }

    #[test]
    fn backoff_is_non_decreasing_and_capped() {
        let ep = EndpointConfig::new("x");
        let delays: Vec<_> = (0..30).map(|k| ep.backoff(k)).collect();
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*delays.last().unwrap(), Duration::from_secs(60));
    }

    #[test]
    fn fenced_json_is_accepted() {
        let v = parse_json_payload("e", "```json\n{\"texts\": []}\n```").unwrap();
        assert!(v["texts"].as_array().unwrap().is_empty());
    }
}
