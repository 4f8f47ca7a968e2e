use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enrich::{DEFAULT_CONTEXT_RATIO, DEFAULT_MAX_SIMPLE_CAPTIONS};
use crate::error::{Error, Result};
use crate::gateway::{Decoding, EndpointConfig, StubBehavior};
use crate::geometry::{DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use crate::ingest::ENGINE_VERSION;
use crate::model::sha256_hex;
use crate::templates::template_version;
use crate::tokenizer::TokenizerSpec;

pub const DEFAULT_CHECKPOINT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInput {
    /// COCO detection JSON (`images` / `annotations` / `categories`).
    pub instances: String,
    /// Optional COCO captions JSON.
    #[serde(default)]
    pub captions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Defaults to `<work_dir>/cache`.
    #[serde(default)]
    pub dir: Option<String>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dir: None,
        }
    }
}

fn yes() -> bool {
    true
}
fn default_name() -> String {
    "dataset".into()
}
fn default_conf() -> f64 {
    DEFAULT_CONF_THRESHOLD
}
fn default_iou() -> f64 {
    DEFAULT_IOU_THRESHOLD
}
fn default_context() -> f64 {
    DEFAULT_CONTEXT_RATIO
}
fn default_captions() -> usize {
    DEFAULT_MAX_SIMPLE_CAPTIONS
}
fn default_workers() -> usize {
    4
}
fn default_batch() -> usize {
    DEFAULT_CHECKPOINT_BATCH
}
fn default_work_dir() -> String {
    "work".into()
}
fn default_output() -> String {
    "enriched.jsonl".into()
}

/// Everything a run needs. Loaded from a JSON document; relative paths are
/// resolved against the document's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_name")]
    pub dataset_name: String,
    #[serde(default)]
    pub inputs: Vec<DatasetInput>,
    /// Visual Genome region descriptions; loaded and reported at ingest.
    #[serde(default)]
    pub vg_regions: Option<String>,
    /// Directory or URL prefix for image files.
    #[serde(default)]
    pub image_root: String,
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    /// Detector endpoint ids, highest priority first.
    #[serde(default)]
    pub detectors: Vec<String>,
    #[serde(default)]
    pub ocr: Vec<String>,
    pub region_captioner: String,
    pub ocr_verifier: String,
    pub integrator: String,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default)]
    pub class_agnostic_nms: bool,
    #[serde(default = "default_context")]
    pub context_ratio: f64,
    #[serde(default = "default_captions")]
    pub max_simple_captions: usize,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    #[serde(default = "default_batch")]
    pub checkpoint_batch: usize,
    #[serde(default = "default_work_dir")]
    pub work_dir: String,
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub cache: CacheConfig,
    /// Unix seconds stamped on every generated item instead of wall time.
    #[serde(default)]
    pub fixed_timestamp: Option<u64>,
    /// Serve every endpoint from the in-process stubs.
    #[serde(default)]
    pub dry_run: bool,
}

/// Subset of the config that determines output content. Worker count,
/// batch size, paths and cache settings are excluded so a checkpoint can be
/// resumed with different values for them.
#[derive(Serialize)]
struct HashedView<'a> {
    engine_version: &'a str,
    template_version: &'a str,
    dataset_name: &'a str,
    inputs: &'a [DatasetInput],
    vg_regions: &'a Option<String>,
    image_root: &'a str,
    endpoints: Vec<HashedEndpoint<'a>>,
    detectors: &'a [String],
    ocr: &'a [String],
    region_captioner: &'a str,
    ocr_verifier: &'a str,
    integrator: &'a str,
    conf_threshold: f64,
    iou_threshold: f64,
    class_agnostic_nms: bool,
    context_ratio: f64,
    max_simple_captions: usize,
    tokenizer: &'a TokenizerSpec,
    fixed_timestamp: Option<u64>,
    dry_run: bool,
}

#[derive(Serialize)]
struct HashedEndpoint<'a> {
    endpoint_id: &'a str,
    base_url: &'a str,
    model: &'a str,
    decoding: Decoding,
    stub: Option<&'a StubBehavior>,
}

/// Which role an endpoint plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Detector,
    Ocr,
    RegionCaptioner,
    OcrVerifier,
    Integrator,
}

impl Role {
    pub fn default_decoding(self) -> Decoding {
        match self {
            Role::Integrator => Decoding::INTEGRATION,
            _ => Decoding::REGION,
        }
    }

    pub fn default_stub(self) -> StubBehavior {
        let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            Role::Detector => StubBehavior::SyntheticDetections {
                per_image: 2,
                categories: strings(&["person", "car", "dog", "bus", "bicycle", "chair", "bottle", "sign"]),
                seed: 0,
            },
            Role::Ocr => StubBehavior::SyntheticText {
                max_per_image: 2,
                words: strings(&["13", "Carwford", "STOP", "EXIT", "Main St", "OPEN", "42", "CAFE"]),
                seed: 0,
            },
            Role::RegionCaptioner => StubBehavior::EchoRegion,
            Role::OcrVerifier => StubBehavior::Verifier {
                corrections: Default::default(),
            },
            Role::Integrator => StubBehavior::ConcatIntegrator,
        }
    }
}

impl PipelineConfig {
    /// Minimal config wired to the given endpoints.
    pub fn new(region_captioner: &str, ocr_verifier: &str, integrator: &str) -> Self {
        serde_json::from_value(serde_json::json!({
            "region_captioner": region_captioner,
            "ocr_verifier": ocr_verifier,
            "integrator": integrator,
        }))
        .expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file, resolving relative paths against its directory
    /// so the result does not depend on the working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut String| {
            if !p.is_empty() && Path::new(p).is_relative() {
                *p = base.join(&*p).display().to_string();
            }
        };
        for input in &mut self.inputs {
            fix(&mut input.instances);
            if let Some(c) = &mut input.captions {
                fix(c);
            }
        }
        if let Some(v) = &mut self.vg_regions {
            fix(v);
        }
        fix(&mut self.work_dir);
        fix(&mut self.output);
        if let Some(d) = &mut self.cache.dir {
            fix(d);
        }
        if let TokenizerSpec::Bpe { merges } = &mut self.tokenizer {
            fix(merges);
        }
        if !self.image_root.contains("://") {
            fix(&mut self.image_root);
        }
    }

    pub fn roles(&self) -> Vec<(&str, Role)> {
        let mut out: Vec<(&str, Role)> = Vec::new();
        out.extend(self.detectors.iter().map(|d| (d.as_str(), Role::Detector)));
        out.extend(self.ocr.iter().map(|d| (d.as_str(), Role::Ocr)));
        out.push((&self.region_captioner, Role::RegionCaptioner));
        out.push((&self.ocr_verifier, Role::OcrVerifier));
        out.push((&self.integrator, Role::Integrator));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("iou_threshold {} not in [0,1]", self.iou_threshold)));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config(format!("conf_threshold {} not in [0,1]", self.conf_threshold)));
        }
        if self.worker_count < 1 {
            return Err(Error::Config("worker_count must be >= 1".into()));
        }
        if self.checkpoint_batch < 1 {
            return Err(Error::Config("checkpoint_batch must be >= 1".into()));
        }
        if self.context_ratio.is_nan() || self.context_ratio < 0.0 {
            return Err(Error::Config("context_ratio must be >= 0".into()));
        }
        for (id, _) in self.roles() {
            if !self.endpoints.iter().any(|e| e.endpoint_id == id) {
                return Err(Error::Config(format!("role refers to unknown endpoint `{id}`")));
            }
        }
        if self.detectors.iter().any(|d| d == crate::ingest::GROUND_TRUTH_SOURCE) {
            return Err(Error::Config("`coco-gt` is reserved for ground truth".into()));
        }
        Ok(())
    }

    /// Endpoints with role defaults filled in: decoding always, and stub
    /// behavior when running dry.
    pub fn resolved_endpoints(&self) -> Vec<EndpointConfig> {
        let roles = self.roles();
        self.endpoints
            .iter()
            .map(|ep| {
                let mut ep = ep.clone();
                if let Some((_, role)) = roles.iter().find(|(id, _)| *id == ep.endpoint_id) {
                    if ep.decoding.is_none() {
                        ep.decoding = Some(role.default_decoding());
                    }
                    if self.dry_run && ep.stub.is_none() {
                        ep.stub = Some(role.default_stub());
                    }
                }
                ep
            })
            .collect()
    }

    /// Timestamp override in effect; dry runs default to the epoch.
    pub fn effective_timestamp(&self) -> Option<u64> {
        self.fixed_timestamp.or(self.dry_run.then_some(0))
    }

    pub fn config_hash(&self) -> String {
        let endpoints = self.resolved_endpoints();
        let view = HashedView {
            engine_version: ENGINE_VERSION,
            template_version: template_version(),
            dataset_name: &self.dataset_name,
            inputs: &self.inputs,
            vg_regions: &self.vg_regions,
            image_root: &self.image_root,
            endpoints: endpoints
                .iter()
                .map(|e| HashedEndpoint {
                    endpoint_id: &e.endpoint_id,
                    base_url: &e.base_url,
                    model: &e.model,
                    decoding: e.decoding(),
                    stub: if self.dry_run { e.stub.as_ref() } else { None },
                })
                .collect(),
            detectors: &self.detectors,
            ocr: &self.ocr,
            region_captioner: &self.region_captioner,
            ocr_verifier: &self.ocr_verifier,
            integrator: &self.integrator,
            conf_threshold: self.conf_threshold,
            iou_threshold: self.iou_threshold,
            class_agnostic_nms: self.class_agnostic_nms,
            context_ratio: self.context_ratio,
            max_simple_captions: self.max_simple_captions,
            tokenizer: &self.tokenizer,
            fixed_timestamp: self.effective_timestamp(),
            dry_run: self.dry_run,
        };
        sha256_hex(&serde_json::to_vec(&view).expect("config serializes"))
    }

    pub fn work_dir(&self) -> PathBuf {
        PathBuf::from(&self.work_dir)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.work_dir().join("checkpoint.json")
    }

    pub fn state_path(&self) -> PathBuf {
        self.work_dir().join("state.jsonl")
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.cache.dir {
            Some(d) => PathBuf::from(d),
            None => self.work_dir().join("cache"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PipelineConfig {
        let mut c = PipelineConfig::new("cap", "ver", "llm");
        c.endpoints = ["cap", "ver", "llm"].iter().map(|id| EndpointConfig::new(*id)).collect();
        c
    }

    #[test]
    fn defaults() {
        let c = cfg();
        assert_eq!(c.iou_threshold, 0.75);
        assert_eq!(c.conf_threshold, 0.3);
        assert_eq!(c.context_ratio, 0.2);
        assert_eq!(c.max_simple_captions, 2);
        assert_eq!(c.checkpoint_batch, 64);
        c.validate().unwrap();
    }

    #[test]
    fn integrator_gets_integration_decoding() {
        let eps = cfg().resolved_endpoints();
        let llm = eps.iter().find(|e| e.endpoint_id == "llm").unwrap();
        assert_eq!(llm.decoding(), Decoding::INTEGRATION);
        let cap = eps.iter().find(|e| e.endpoint_id == "cap").unwrap();
        assert_eq!(cap.decoding(), Decoding::REGION);
    }

    #[test]
    fn hash_ignores_workers_but_not_thresholds() {
        let a = cfg();
        let mut b = cfg();
        b.worker_count = 16;
        b.checkpoint_batch = 3;
        assert_eq!(a.config_hash(), b.config_hash());
        b.iou_threshold = 0.5;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = cfg();
        c.iou_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.worker_count = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.detectors.push("nope".into());
        assert!(c.validate().is_err());
        assert!(PipelineConfig::from_json(r#"{"region_captioner":"a","ocr_verifier":"b","integrator":"c","bogus":1}"#).is_err());
    }

    #[test]
    fn load_does_not_depend_on_how_the_path_is_spelled() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let mut c = cfg();
        c.inputs.push(DatasetInput {
            instances: "instances.json".into(),
            captions: None,
        });
        std::fs::write(dir.path().join("config.json"), serde_json::to_vec(&c).unwrap()).unwrap();
        let direct = PipelineConfig::load(&dir.path().join("config.json")).unwrap();
        let detour = PipelineConfig::load(&dir.path().join("sub/../config.json")).unwrap();
        assert_eq!(direct.config_hash(), detour.config_hash());
        assert_eq!(direct.inputs, detour.inputs);
        assert!(Path::new(&direct.inputs[0].instances).is_absolute());
        assert!(!detour.work_dir.contains(".."));
    }
}
