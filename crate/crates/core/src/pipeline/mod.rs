//! Stage orchestration: ingestion, the three enrichment stages,
//! checkpointing and the final write.

pub mod checkpoint;
pub mod config;
pub mod stats;

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

pub use checkpoint::{Checkpointer, PipelineCheckpoint};
pub use config::{CacheConfig, DatasetInput, PipelineConfig, Role};
pub use stats::{compute_stats, render_table};

use crate::enrich::{apply_matches, build_bundle, build_integration_prompt, build_region_prompt, crop_with_context, match_ocr_to_objects, verify_ocr};
use crate::error::{Error, Result};
use crate::gateway::cache::ResponseCache;
use crate::gateway::clock::SystemClock;
use crate::gateway::http::HttpTransport;
use crate::gateway::{Gateway, ImageRef, StubTransport, Transport};
use crate::geometry::{aggregate_sources_origin, NmsParams, SourcePriorities};
use crate::ingest::{compose_id, load_coco, load_vg_regions, next_seq, union_by_file_name, write_enriched, DatasetHandle, LoadReport, Manifest, GROUND_TRUTH_SOURCE};
use crate::model::{Detection, EnrichedImageAnnotation, ImageId, ObjectAnnotation, StageFailure};
use crate::par::{map_ordered, Execution};
use crate::tokenizer::Tokenizer;

/// What to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One(u8),
    All,
}

impl StageSelection {
    pub fn stages(self) -> Vec<u8> {
        match self {
            StageSelection::One(k) => vec![k],
            StageSelection::All => vec![1, 2, 3],
        }
    }
}

/// Hook for stopping a run early, used to exercise resume.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Stop with [`Error::Interrupted`] after this many checkpointed batches.
    pub stop_after_batches: Option<usize>,
    batches: usize,
}

impl RunControl {
    pub fn stop_after(batches: usize) -> Self {
        Self {
            stop_after_batches: Some(batches),
            batches: 0,
        }
    }

    fn tick(&mut self) -> Result<()> {
        self.batches += 1;
        match self.stop_after_batches {
            Some(n) if self.batches >= n => Err(Error::Interrupted { batches: self.batches }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub load: LoadReport,
    pub vg_regions: u64,
    pub vg_skipped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageFailure {
    pub image_id: ImageId,
    pub file_name: String,
    pub stage: u8,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub processed: u64,
    pub failed: u64,
    pub skipped_failed_earlier: u64,
    pub already_done: u64,
    pub batches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub config_hash: String,
    pub resumed: bool,
    pub ingest: Option<IngestReport>,
    pub stages: Vec<StageReport>,
    pub failures: Vec<ImageFailure>,
    pub manifest: Option<Manifest>,
    pub network_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
}

/// Every image whose provenance records a failure.
pub fn failure_report(handle: &DatasetHandle) -> Vec<ImageFailure> {
    handle
        .images
        .iter()
        .filter_map(|r| {
            r.provenance.failure.as_ref().map(|f| ImageFailure {
                image_id: r.image_id,
                file_name: r.file_name.clone(),
                stage: f.stage,
                error: f.error.clone(),
            })
        })
        .collect()
}

pub struct Engine {
    cfg: PipelineConfig,
    config_hash: String,
    gateway: Gateway,
    tokenizer: Box<dyn Tokenizer>,
    exec: Execution,
}

impl Engine {
    /// Build the gateway from the config: stubs under `dry_run`, HTTP
    /// otherwise, with the on-disk cache when enabled.
    pub fn from_config(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let endpoints = cfg.resolved_endpoints();
        let clock = Arc::new(SystemClock::new());
        let transport: Arc<dyn Transport> = if cfg.dry_run {
            Arc::new(StubTransport::from_endpoints(&endpoints, clock.clone()))
        } else {
            Arc::new(HttpTransport::new().map_err(|e| Error::Config(format!("http client: {e}")))?)
        };
        let mut gateway = Gateway::new(endpoints, transport)?.with_clock(clock);
        if cfg.cache.enabled {
            gateway = gateway.with_cache(ResponseCache::on_disk(cfg.cache_dir())?);
        }
        Self::with_gateway(cfg, gateway)
    }

    /// Use a prepared gateway. Its endpoints must cover every role; the
    /// config's timestamp override and image root are applied to it.
    pub fn with_gateway(cfg: PipelineConfig, gateway: Gateway) -> Result<Self> {
        cfg.validate()?;
        for (id, _) in cfg.roles() {
            gateway.endpoint(id)?;
        }
        let tokenizer = cfg.tokenizer.build()?;
        let gateway = gateway
            .with_fixed_timestamp(cfg.effective_timestamp())
            .with_image_root(cfg.image_root.clone());
        Ok(Self {
            config_hash: cfg.config_hash(),
            exec: Execution::from_workers(cfg.worker_count),
            cfg,
            gateway,
            tokenizer,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn checkpointer(&self) -> Checkpointer {
        Checkpointer::new(self.cfg.checkpoint_path(), self.cfg.state_path(), self.config_hash.clone())
    }

    /// Load and union every configured input.
    pub fn ingest(&self) -> Result<(DatasetHandle, IngestReport)> {
        if self.cfg.inputs.is_empty() {
            return Err(Error::Config("no inputs configured".into()));
        }
        let mut report = IngestReport::default();
        let mut parts = Vec::new();
        for input in &self.cfg.inputs {
            let (handle, load) = load_coco(
                Path::new(&input.instances),
                input.captions.as_deref().map(Path::new),
                self.tokenizer(),
            )?;
            report.load.merge(&load);
            parts.push(handle);
        }
        let (handle, dups) = union_by_file_name(&self.cfg.dataset_name, parts)?;
        report.load.duplicate_images += dups;
        if let Some(vg) = &self.cfg.vg_regions {
            let regions = load_vg_regions(Path::new(vg))?;
            report.vg_regions = regions.len() as u64;
            report.vg_skipped = regions.skipped;
        }
        Ok((handle, report))
    }

    fn image_ref(rec: &EnrichedImageAnnotation) -> ImageRef {
        ImageRef {
            file_name: rec.file_name.clone(),
            width: rec.width,
            height: rec.height,
        }
    }

    fn nms_params(&self) -> NmsParams {
        NmsParams {
            iou_threshold: self.cfg.iou_threshold,
            class_agnostic: self.cfg.class_agnostic_nms,
        }
    }

    /// Stage 1 for one image: ground truth plus every detector, thresholded
    /// and deduplicated. Surviving ground-truth objects keep their ids; new
    /// ones get fresh ids in output order.
    pub fn stage1_image(&self, rec: &EnrichedImageAnnotation) -> Result<EnrichedImageAnnotation> {
        let image = Self::image_ref(rec);
        let mut per_source: Vec<(String, Vec<Detection>)> = Vec::with_capacity(self.cfg.detectors.len() + 1);
        per_source.push((
            GROUND_TRUTH_SOURCE.to_string(),
            rec.objects.iter().map(ObjectAnnotation::to_detection).collect(),
        ));
        for id in &self.cfg.detectors {
            per_source.push((id.clone(), self.gateway.detect(&image, id)?));
        }
        let priorities = SourcePriorities::from_order(per_source.iter().map(|(id, _)| id.clone()));
        let kept = aggregate_sources_origin(&per_source, self.cfg.conf_threshold, &self.nms_params(), &priorities)?;

        let mut out = rec.clone();
        let mut seq = next_seq(rec.objects.iter().map(|o| o.object_id));
        out.objects = kept
            .into_iter()
            .map(|(s, i)| {
                if s == 0 {
                    rec.objects[i].clone()
                } else {
                    let det = Detection {
                        source_id: per_source[s].0.clone(),
                        ..per_source[s].1[i].clone()
                    };
                    let obj = ObjectAnnotation::from_detection(compose_id(rec.image_id, seq), det);
                    seq += 1;
                    obj
                }
            })
            .collect();
        out.provenance.mark(1);
        out.canonicalize();
        Ok(out)
    }

    /// Stage 2 for one image: read text, verify it, describe every object
    /// region, then link text to the smallest containing object.
    pub fn stage2_image(&self, rec: &EnrichedImageAnnotation) -> Result<EnrichedImageAnnotation> {
        let image = Self::image_ref(rec);
        let dims = (rec.width, rec.height);
        let mut out = rec.clone();

        let mut per_source = Vec::with_capacity(self.cfg.ocr.len());
        for id in &self.cfg.ocr {
            per_source.push((id.clone(), self.gateway.recognize_text(&image, id)?));
        }
        // Same text read twice by different engines collapses like a
        // duplicate detection, with the text as its category.
        let as_dets: Vec<(String, Vec<Detection>)> = per_source
            .iter()
            .map(|(id, entries)| {
                let dets = entries
                    .iter()
                    .map(|e| Detection::new(e.bbox, e.text.clone(), e.confidence, id.clone()))
                    .collect();
                (id.clone(), dets)
            })
            .collect();
        let priorities = SourcePriorities::from_order(self.cfg.ocr.iter().cloned());
        let params = NmsParams {
            iou_threshold: self.cfg.iou_threshold,
            class_agnostic: false,
        };
        let kept = aggregate_sources_origin(&as_dets, 0.0, &params, &priorities)?;
        let first = next_seq(rec.ocr.iter().map(|e| e.ocr_id));
        for (seq, (s, i)) in (first..).zip(kept) {
            let mut entry = per_source[s].1[i].clone();
            entry.ocr_id = compose_id(rec.image_id, seq);
            let crop = crop_with_context(dims, &entry.bbox, self.cfg.context_ratio)?;
            out.ocr.push(verify_ocr(&entry, &image, &crop, &self.gateway, &self.cfg.ocr_verifier)?);
        }
        if !out.ocr.is_empty() {
            out.provenance.ocr_verified_at = Some(self.gateway.timestamp());
        }

        for obj in &mut out.objects {
            let crop = crop_with_context(dims, &obj.bbox, self.cfg.context_ratio)?;
            let prompt = build_region_prompt(&obj.category)?;
            let answer = self.gateway.describe_region(&image, &crop, &prompt, &self.cfg.region_captioner)?;
            obj.region_token_length = Some(self.tokenizer.count(&answer.text));
            obj.region_description = Some(answer.text);
            let newer = match &out.provenance.region_generator {
                Some(g) => answer.generator.timestamp >= g.timestamp,
                None => true,
            };
            if newer {
                out.provenance.region_generator = Some(answer.generator);
            }
        }

        let matches = match_ocr_to_objects(&out.ocr, &out.objects);
        apply_matches(&mut out, &matches);
        if !out.ocr.is_empty() {
            out.provenance.ocr_matched_at = Some(self.gateway.timestamp());
        }
        out.provenance.mark(2);
        out.canonicalize();
        Ok(out)
    }

    /// Stage 3 for one image: bundle the priors and ask the integrator.
    pub fn stage3_image(&self, rec: &EnrichedImageAnnotation) -> Result<EnrichedImageAnnotation> {
        let bundle = build_bundle(rec, self.cfg.max_simple_captions)?;
        let message = build_integration_prompt(&bundle)?;
        let caption = self
            .gateway
            .integrate_caption(&message, &self.cfg.integrator, self.tokenizer())?;
        let mut out = rec.clone();
        out.dense_caption = Some(caption);
        out.provenance.mark(3);
        Ok(out)
    }

    fn stage_image(&self, stage: u8, rec: &EnrichedImageAnnotation) -> Result<EnrichedImageAnnotation> {
        match stage {
            1 => self.stage1_image(rec),
            2 => self.stage2_image(rec),
            3 => self.stage3_image(rec),
            k => Err(Error::StageViolation(format!("no stage {k}"))),
        }
    }

    /// Run one stage over every pending image, in batches.
    ///
    /// Images that failed earlier are skipped; an image that fails here keeps
    /// its previous content and records the failure. After each batch the
    /// checkpoint (when given) is saved and `control` may interrupt.
    pub fn run_stage(
        &self,
        stage: u8,
        mut handle: DatasetHandle,
        mut checkpoint: Option<&mut Checkpointer>,
        control: &mut RunControl,
    ) -> Result<(DatasetHandle, StageReport)> {
        if !(1..=3).contains(&stage) {
            return Err(Error::StageViolation(format!("no stage {stage}")));
        }
        let mut report = StageReport {
            stage,
            ..Default::default()
        };
        let mut pending = Vec::new();
        for (idx, rec) in handle.images.iter().enumerate() {
            if rec.provenance.is_failed() {
                report.skipped_failed_earlier += 1;
            } else if rec.provenance.completed(stage) {
                report.already_done += 1;
            } else if !rec.provenance.completed(stage - 1) {
                return Err(Error::StageViolation(format!(
                    "image {} has not completed stage {}",
                    rec.image_id,
                    stage - 1
                )));
            } else {
                pending.push(idx);
            }
        }

        for batch in pending.chunks(self.cfg.checkpoint_batch) {
            let results = map_ordered(self.exec, batch, |&idx| self.stage_image(stage, &handle.images[idx]));
            for (&idx, result) in batch.iter().zip(results) {
                report.processed += 1;
                match result {
                    Ok(rec) => handle.images[idx] = rec,
                    Err(e) => {
                        report.failed += 1;
                        handle.images[idx].provenance.failure = Some(StageFailure {
                            stage,
                            error: format!("{}: {e}", e.kind()),
                        });
                    }
                }
            }
            report.batches += 1;
            if let Some(cp) = checkpoint.as_deref_mut() {
                cp.save(&handle)?;
            }
            control.tick()?;
        }
        Ok((handle, report))
    }

    pub fn run_stage1(&self, handle: DatasetHandle) -> Result<DatasetHandle> {
        Ok(self.run_stage(1, handle, None, &mut RunControl::default())?.0)
    }

    pub fn run_stage2(&self, handle: DatasetHandle) -> Result<DatasetHandle> {
        Ok(self.run_stage(2, handle, None, &mut RunControl::default())?.0)
    }

    pub fn run_stage3(&self, handle: DatasetHandle) -> Result<DatasetHandle> {
        Ok(self.run_stage(3, handle, None, &mut RunControl::default())?.0)
    }

    /// Write the enriched file and manifest to the configured output.
    pub fn export(&self, handle: &DatasetHandle, out: &Path) -> Result<Manifest> {
        write_enriched(handle, out, &self.tokenizer.id(), &self.config_hash)
    }

    /// Full run with checkpointing.
    ///
    /// A fresh run ingests and starts from stage 1; stage 2 or 3 alone
    /// requires `resume`. The output file is written once stage 3 has run
    /// for every image.
    pub fn run(&self, selection: StageSelection, resume: bool, control: &mut RunControl) -> Result<RunOutcome> {
        let mut cp = self.checkpointer();
        let (mut handle, ingest) = if resume {
            match cp.load()? {
                Some((_, handle)) => (handle, None),
                None => return Err(Error::Config(format!("no checkpoint at {}", self.cfg.checkpoint_path().display()))),
            }
        } else {
            if selection != StageSelection::All && selection != StageSelection::One(1) {
                return Err(Error::Config("running stage 2 or 3 alone needs --resume".into()));
            }
            let (handle, report) = self.ingest()?;
            cp.save(&handle)?;
            (handle, Some(report))
        };

        let mut stages = Vec::new();
        for k in selection.stages() {
            let (next, report) = self.run_stage(k, handle, Some(&mut cp), control)?;
            handle = next;
            stages.push(report);
        }

        let finished = handle
            .images
            .iter()
            .all(|r| r.provenance.stage3 || r.provenance.is_failed());
        let manifest = if finished && selection.stages().contains(&3) {
            Some(self.export(&handle, Path::new(&self.cfg.output))?)
        } else {
            None
        };
        let stats = self.gateway.stats();
        Ok(RunOutcome {
            config_hash: self.config_hash.clone(),
            resumed: resume,
            ingest,
            stages,
            failures: failure_report(&handle),
            manifest,
            network_calls: stats.network_calls(),
            cache_hits: stats.cache_hits(),
            retries: stats.retries.load(std::sync::atomic::Ordering::SeqCst),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::stub::{StubBox, StubText};
    use crate::gateway::{EndpointConfig, StubBehavior};
    use crate::model::BBox;
    use std::collections::BTreeMap;

    fn config() -> PipelineConfig {
        let mut cfg = PipelineConfig::new("cap", "ver", "llm");
        cfg.detectors = vec!["det".into()];
        cfg.ocr = vec!["ocr".into()];
        cfg.worker_count = 1;
        cfg.fixed_timestamp = Some(7);
        cfg
    }

    fn engine(det: Vec<StubBox>, texts: Vec<StubText>) -> Engine {
        let cfg = config();
        let eps = vec![
            EndpointConfig::new("det").with_stub(StubBehavior::CannedDetections {
                by_image: BTreeMap::new(),
                default: det,
            }),
            EndpointConfig::new("ocr").with_stub(StubBehavior::CannedText {
                by_image: BTreeMap::new(),
                default: texts,
            }),
            EndpointConfig::new("cap").with_stub(StubBehavior::EchoRegion),
            EndpointConfig::new("ver").with_stub(StubBehavior::Verifier {
                corrections: BTreeMap::from([("Crawfrod".to_string(), "Crawford".to_string())]),
            }),
            EndpointConfig::new("llm").with_stub(StubBehavior::ConcatIntegrator),
        ];
        let mut cfg = cfg;
        cfg.endpoints = eps.clone();
        let clock = Arc::new(SystemClock::new());
        let gw = Gateway::new(cfg.resolved_endpoints(), Arc::new(StubTransport::from_endpoints(&eps, clock))).unwrap();
        Engine::with_gateway(cfg, gw).unwrap()
    }

    fn record() -> EnrichedImageAnnotation {
        let mut r = EnrichedImageAnnotation::new(3, "x.jpg", 200, 100);
        r.objects.push(ObjectAnnotation::from_detection(
            compose_id(3, 1),
            Detection::new(BBox::new(10.0, 10.0, 80.0, 60.0), "bus", 1.0, GROUND_TRUTH_SOURCE),
        ));
        r
    }

    #[test]
    fn stage1_drops_duplicates_and_keeps_ground_truth() {
        let e = engine(
            vec![
                StubBox::new([11.0, 10.0, 80.0, 60.0], "bus", 0.95),
                StubBox::new([120.0, 20.0, 40.0, 40.0], "dog", 0.8),
                StubBox::new([150.0, 50.0, 10.0, 10.0], "cup", 0.1),
            ],
            vec![],
        );
        let out = e.stage1_image(&record()).unwrap();
        assert_eq!(out.objects.len(), 2);
        assert_eq!(out.objects[0].source_id, GROUND_TRUTH_SOURCE);
        assert_eq!(out.objects[0].object_id, compose_id(3, 1));
        assert_eq!(out.objects[1].category, "dog");
        assert_eq!(out.objects[1].object_id, compose_id(3, 2));
        assert_eq!(out.objects[1].source_id, "det");
        assert!(out.provenance.stage1);
    }

    #[test]
    fn stage2_verifies_describes_and_links() {
        let e = engine(
            vec![],
            vec![
                StubText::new([20.0, 20.0, 10.0, 5.0], "Crawfrod", 0.9),
                StubText::new([150.0, 80.0, 10.0, 5.0], "13", 0.9),
            ],
        );
        let mut rec = e.stage1_image(&record()).unwrap();
        rec = e.stage2_image(&rec).unwrap();
        assert_eq!(rec.ocr.len(), 2);
        let linked = rec.ocr.iter().find(|o| o.text == "Crawfrod").unwrap();
        assert_eq!(linked.corrected_text.as_deref(), Some("Crawford"));
        assert_eq!(linked.matched_object_id, Some(compose_id(3, 1)));
        let loose = rec.ocr.iter().find(|o| o.text == "13").unwrap();
        assert_eq!(loose.matched_object_id, None);
        assert!(rec.objects[0].region_description.as_deref().unwrap().contains("bus"));
        assert_eq!(rec.provenance.ocr_verified_at, Some(7));
        assert!(crate::model::validate(&rec).is_empty());
    }

    #[test]
    fn stage3_needs_stage2() {
        let e = engine(vec![], vec![]);
        let rec = e.stage1_image(&record()).unwrap();
        assert!(matches!(e.stage3_image(&rec), Err(Error::StageViolation(_))));
    }

    #[test]
    fn run_stage_rejects_unprepared_input() {
        let e = engine(vec![], vec![]);
        let mut h = DatasetHandle::empty("d");
        h.images.push(record());
        assert!(matches!(e.run_stage2(h), Err(Error::StageViolation(_))));
    }

    #[test]
    fn failing_image_is_recorded_and_skipped() {
        let e = engine(vec![], vec![]);
        let mut h = DatasetHandle::empty("d");
        h.images.push(record());
        // no objects and no captions: stage 3 has nothing to integrate
        h.images.push(EnrichedImageAnnotation::new(4, "empty.jpg", 50, 50));
        let h = e.run_stage1(h).unwrap();
        let h = e.run_stage2(h).unwrap();
        let (h, report) = e.run_stage(3, h, None, &mut RunControl::default()).unwrap();
        assert_eq!(report.failed, 1);
        assert!(h.images[0].dense_caption.is_some());
        let failures = failure_report(&h);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].image_id, 4);
        assert_eq!(failures[0].stage, 3);
        assert!(failures[0].error.starts_with("empty_bundle"));
    }

    #[test]
    fn interruption_stops_after_requested_batches() {
        let mut e = engine(vec![], vec![]);
        e.cfg.checkpoint_batch = 1;
        let mut h = DatasetHandle::empty("d");
        for i in 1..=3 {
            let mut r = record();
            r.image_id = i;
            r.file_name = format!("{i}.jpg");
            r.objects[0].object_id = compose_id(i, 1);
            h.images.push(r);
        }
        let err = e.run_stage(1, h, None, &mut RunControl::stop_after(2)).unwrap_err();
        assert!(matches!(err, Error::Interrupted { batches: 2 }));
    }
}
