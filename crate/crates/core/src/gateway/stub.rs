//! Deterministic in-process stand-ins for the expert models.
//!
//! The stub sits at the transport layer: it receives the same request bytes
//! a live endpoint would and answers with a chat-completion body, so cache,
//! limits, retries and response parsing are exercised exactly as in a live
//! run.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::clock::Clock;
use super::wire::{ChatRequest, ChatResponse};
use super::{EndpointConfig, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubBox {
    pub bbox: [f64; 4],
    pub category: String,
    pub score: f64,
}

impl StubBox {
    pub fn new(bbox: [f64; 4], category: impl Into<String>, score: f64) -> Self {
        Self {
            bbox,
            category: category.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubText {
    pub bbox: [f64; 4],
    pub text: String,
    pub confidence: f64,
}

impl StubText {
    pub fn new(bbox: [f64; 4], text: impl Into<String>, confidence: f64) -> Self {
        Self {
            bbox,
            text: text.into(),
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StubBehavior {
    /// Fixed boxes per image file name, `default` for any other image.
    CannedDetections {
        #[serde(default)]
        by_image: BTreeMap<String, Vec<StubBox>>,
        #[serde(default)]
        default: Vec<StubBox>,
    },
    /// Pseudo-random boxes seeded by the image file name.
    SyntheticDetections {
        per_image: usize,
        categories: Vec<String>,
        #[serde(default)]
        seed: u64,
    },
    CannedText {
        #[serde(default)]
        by_image: BTreeMap<String, Vec<StubText>>,
        #[serde(default)]
        default: Vec<StubText>,
    },
    SyntheticText {
        max_per_image: usize,
        words: Vec<String>,
        #[serde(default)]
        seed: u64,
    },
    /// Region captioner answering with a sentence built from the prompt.
    EchoRegion,
    /// OCR verifier echoing the text, with optional replacements. Mapping a
    /// text to `""` simulates a refusal.
    Verifier {
        #[serde(default)]
        corrections: BTreeMap<String, String>,
    },
    /// Integrator joining the prompt's facts into sentences.
    ConcatIntegrator,
    Fixed { content: String },
}

pub struct StubTransport {
    behaviors: HashMap<String, StubBehavior>,
    failures: Mutex<HashMap<String, VecDeque<TransportError>>>,
    calls: Mutex<HashMap<String, u64>>,
    log: Mutex<Vec<(String, Duration)>>,
    clock: Arc<dyn Clock>,
    latency: Option<Duration>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl StubTransport {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            behaviors: HashMap::new(),
            failures: Mutex::new(HashMap::new()),
            calls: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            clock,
            latency: None,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    /// Uses each endpoint's `stub` behavior; endpoints without one answer 404.
    pub fn from_endpoints(endpoints: &[EndpointConfig], clock: Arc<dyn Clock>) -> Self {
        let mut t = Self::new(clock);
        for ep in endpoints {
            if let Some(b) = &ep.stub {
                t.behaviors.insert(ep.endpoint_id.clone(), b.clone());
            }
        }
        t
    }

    pub fn with_behavior(mut self, endpoint_id: impl Into<String>, behavior: StubBehavior) -> Self {
        self.behaviors.insert(endpoint_id.into(), behavior);
        self
    }

    /// Block each call for `d` of real time (to create overlap in tests).
    pub fn with_latency(mut self, d: Duration) -> Self {
        self.latency = Some(d);
        self
    }

    /// Queue failures returned before any successful answer.
    pub fn fail_next(&self, endpoint_id: &str, errors: Vec<TransportError>) {
        self.failures
            .lock()
            .unwrap()
            .entry(endpoint_id.to_string())
            .or_default()
            .extend(errors);
    }

    pub fn calls(&self, endpoint_id: &str) -> u64 {
        self.calls.lock().unwrap().get(endpoint_id).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> u64 {
        self.calls.lock().unwrap().values().sum()
    }

    /// `(endpoint_id, clock time)` of every call, in arrival order.
    pub fn call_log(&self) -> Vec<(String, Duration)> {
        self.log.lock().unwrap().clone()
    }

    pub fn max_observed_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// The wire response this stub would send, without counting a call or
    /// consuming scripted failures.
    pub fn respond(&self, endpoint_id: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.answer(endpoint_id, body)
            .map(|content| serde_json::to_vec(&ChatResponse::from_content(content)).expect("serializes"))
    }

    fn answer(&self, endpoint_id: &str, body: &[u8]) -> Result<String, TransportError> {
        let behavior = self
            .behaviors
            .get(endpoint_id)
            .ok_or_else(|| TransportError::Status(404, format!("no stub for `{endpoint_id}`")))?;
        let req: ChatRequest =
            serde_json::from_slice(body).map_err(|e| TransportError::Status(400, e.to_string()))?;
        let user = req
            .last_user()
            .ok_or_else(|| TransportError::Status(400, "no user message".into()))?;
        let text = user.text();
        Ok(match behavior {
            StubBehavior::CannedDetections { by_image, default } => {
                let image = image_name(&text)?;
                let boxes = by_image.get(&image).unwrap_or(default);
                json!({ "detections": boxes }).to_string()
            }
            StubBehavior::SyntheticDetections {
                per_image,
                categories,
                seed,
            } => {
                let (image, w, h) = image_descriptor(&text)?;
                let mut rng = seeded_rng(*seed, &image);
                let boxes: Vec<StubBox> = (0..*per_image)
                    .map(|_| {
                        let bbox = random_box(&mut rng, w, h, 0.1, 0.4);
                        let category = if categories.is_empty() {
                            "object".to_string()
                        } else {
                            categories[rng.gen_range(0..categories.len())].clone()
                        };
                        let score = round_to(rng.gen_range(0.35..0.99), 100.0);
                        StubBox::new(bbox, category, score)
                    })
                    .collect();
                json!({ "detections": boxes }).to_string()
            }
            StubBehavior::CannedText { by_image, default } => {
                let image = image_name(&text)?;
                let texts = by_image.get(&image).unwrap_or(default);
                json!({ "texts": texts }).to_string()
            }
            StubBehavior::SyntheticText {
                max_per_image,
                words,
                seed,
            } => {
                let (image, w, h) = image_descriptor(&text)?;
                let mut rng = seeded_rng(seed.wrapping_add(1), &image);
                let n = rng.gen_range(0..=*max_per_image);
                let texts: Vec<StubText> = (0..n)
                    .filter(|_| !words.is_empty())
                    .map(|_| {
                        let bbox = random_box(&mut rng, w, h, 0.05, 0.15);
                        let word = words[rng.gen_range(0..words.len())].clone();
                        StubText::new(bbox, word, round_to(rng.gen_range(0.5..0.99), 100.0))
                    })
                    .collect();
                json!({ "texts": texts }).to_string()
            }
            StubBehavior::EchoRegion => {
                let category = between(&text, "saw a ", ". Please").unwrap_or("thing").to_string();
                format!("A {category} is visible in this part of the image, shown together with its immediate surroundings.")
            }
            StubBehavior::Verifier { corrections } => {
                let read = between_last(&text, "read the text \"", "\" in this image region")
                    .ok_or_else(|| TransportError::Status(400, "no OCR text in prompt".into()))?;
                corrections.get(read).cloned().unwrap_or_else(|| read.to_string())
            }
            StubBehavior::ConcatIntegrator => concat_facts(&text),
            StubBehavior::Fixed { content } => content.clone(),
        })
    }
}

impl Transport for StubTransport {
    fn send(&self, endpoint: &EndpointConfig, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let id = endpoint.endpoint_id.as_str();
        *self.calls.lock().unwrap().entry(id.to_string()).or_default() += 1;
        self.log.lock().unwrap().push((id.to_string(), self.clock.now()));
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let scripted = self
            .failures
            .lock()
            .unwrap()
            .get_mut(id)
            .and_then(VecDeque::pop_front);
        let result = match scripted {
            Some(err) => Err(err),
            None => self.respond(id, body),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

fn image_descriptor(text: &str) -> Result<(String, f64, f64), TransportError> {
    let v: Value = serde_json::from_str(text).map_err(|e| TransportError::Status(400, e.to_string()))?;
    let name = v["image"].as_str().unwrap_or_default().to_string();
    let w = v["width"].as_f64().unwrap_or(0.0);
    let h = v["height"].as_f64().unwrap_or(0.0);
    if name.is_empty() || w <= 0.0 || h <= 0.0 {
        return Err(TransportError::Status(400, "bad image descriptor".into()));
    }
    Ok((name, w, h))
}

fn image_name(text: &str) -> Result<String, TransportError> {
    image_descriptor(text).map(|(n, _, _)| n)
}

fn seeded_rng(seed: u64, image: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn round_to(v: f64, scale: f64) -> f64 {
    (v * scale).round() / scale
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64, min_frac: f64, max_frac: f64) -> [f64; 4] {
    let bw = round_to(w * rng.gen_range(min_frac..max_frac), 10.0).max(1.0);
    let bh = round_to(h * rng.gen_range(min_frac..max_frac), 10.0).max(1.0);
    let x = round_to(rng.gen_range(0.0..(w - bw).max(0.0) + f64::EPSILON), 10.0);
    let y = round_to(rng.gen_range(0.0..(h - bh).max(0.0) + f64::EPSILON), 10.0);
    [x, y, bw, bh]
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let len = text[from..].find(end)?;
    Some(&text[from..from + len])
}

fn between_last<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let to = text.rfind(end)?;
    (to >= from).then(|| &text[from..to])
}

/// Builds a caption from the labeled sections of an integration prompt.
fn concat_facts(content: &str) -> String {
    let mut section = "";
    let mut categories = Vec::new();
    let mut sentences = Vec::new();
    let mut texts = Vec::new();
    let mut references = Vec::new();
    for line in content.lines() {
        if !line.starts_with("- ") {
            section = line.trim_end();
            continue;
        }
        let item = &line[2..];
        if item == "none" {
            continue;
        }
        match section {
            "Objects:" => {
                if let Some((cat, _)) = item.split_once(" @ ") {
                    categories.push(cat.to_string());
                }
            }
            "Region descriptions:" => {
                if let Some((_, desc)) = item.split_once(": ") {
                    sentences.push(desc.to_string());
                }
            }
            "Text in image (OCR):" => {
                let mut stream = serde_json::Deserializer::from_str(item).into_iter::<String>();
                if let Some(Ok(text)) = stream.next() {
                    let owner = item[stream.byte_offset()..]
                        .trim()
                        .trim_start_matches('(')
                        .trim_end_matches(')')
                        .to_string();
                    texts.push((text, owner));
                }
            }
            "Reference captions:" => references.push(item.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    if !categories.is_empty() {
        out.push(format!("The image shows {}.", join_with_articles(&categories)));
    }
    out.extend(sentences);
    for (text, owner) in texts {
        if owner == crate::model::UNATTACHED || owner.is_empty() {
            out.push(format!("The text \"{text}\" appears in the image."));
        } else {
            out.push(format!("The text \"{text}\" appears on the {owner}."));
        }
    }
    for r in references {
        out.push(format!("In short: {r}"));
    }
    out.join(" ")
}

fn join_with_articles(items: &[String]) -> String {
    let with: Vec<String> = items.iter().map(|c| format!("a {c}")).collect();
    match with.len() {
        0 => String::new(),
        1 => with[0].clone(),
        n => format!("{} and {}", with[..n - 1].join(", "), with[n - 1]),
    }
}
