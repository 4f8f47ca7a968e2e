//! Domain types shared by every stage of the engine, plus the canonical
//! JSON form used for the enriched dataset file.
//!
//! Canonical form: one JSON object per record, keys in struct declaration
//! order, `objects` sorted by `object_id`, `ocr` sorted by `ocr_id`, and each
//! `matched_ocr_ids` list sorted ascending. Optional fields are always
//! emitted (as `null`) except the opaque `segmentation` payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry;
use crate::tokenizer::Tokenizer;

pub type ImageId = u64;
pub type ObjectId = u64;
pub type OcrId = u64;

/// Axis-aligned box in COCO `xywh` pixel convention, top-left origin.
///
/// Serialized as a 4-element array `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.x.is_finite() || !self.y.is_finite()
    }

    /// True when the box lies inside `[0,width] x [0,height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Clamp to the image frame. Returns `None` when nothing with positive
    /// area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        let clamped = BBox::new(x0, y0, x1 - x0, y1 - y0);
        if clamped.is_degenerate() {
            None
        } else {
            Some(clamped)
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// A candidate object produced by one detection source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
    pub source_id: String,
}

impl Detection {
    pub fn new(bbox: BBox, category: impl Into<String>, score: f64, source_id: impl Into<String>) -> Self {
        Self {
            bbox,
            category: category.into(),
            score,
            source_id: source_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    pub object_id: ObjectId,
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
    pub source_id: String,
    pub region_description: Option<String>,
    pub region_token_length: Option<u32>,
    pub matched_ocr_ids: Vec<OcrId>,
    /// COCO segmentation carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<serde_json::Value>,
}

impl ObjectAnnotation {
    pub fn from_detection(object_id: ObjectId, det: Detection) -> Self {
        Self {
            object_id,
            bbox: det.bbox,
            category: det.category,
            score: det.score,
            source_id: det.source_id,
            region_description: None,
            region_token_length: None,
            matched_ocr_ids: Vec::new(),
            segmentation: None,
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection::new(self.bbox, self.category.clone(), self.score, self.source_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrEntry {
    pub ocr_id: OcrId,
    pub bbox: BBox,
    pub text: String,
    pub confidence: f64,
    pub source_id: String,
    pub verified: bool,
    pub corrected_text: Option<String>,
    /// Set when the verifier refused or answered empty; `corrected_text`
    /// then falls back to `text`.
    pub verification_failed: bool,
    pub matched_object_id: Option<ObjectId>,
}

impl OcrEntry {
    /// Text to present downstream: the verified correction when present.
    pub fn best_text(&self) -> &str {
        self.corrected_text.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimpleCaption {
    pub text: String,
    pub token_length: u32,
}

impl SimpleCaption {
    pub fn new(text: impl Into<String>, tokenizer: &dyn Tokenizer) -> Self {
        let text = text.into();
        let token_length = tokenizer.count(&text);
        Self { text, token_length }
    }
}

/// Which endpoint produced a piece of text, and with what settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorMeta {
    pub endpoint_id: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub template_version: String,
    /// Unix seconds at which the response was produced.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseCaption {
    pub text: String,
    pub token_length: u32,
    pub generator: GeneratorMeta,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFailure {
    pub stage: u8,
    pub error: String,
}

/// Stage-completion flags. Stage 0 (ingestion) is implied by the record's
/// existence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
    pub failure: Option<StageFailure>,
    pub ocr_verified_at: Option<u64>,
    pub ocr_matched_at: Option<u64>,
    pub region_generator: Option<GeneratorMeta>,
}

impl Provenance {
    pub fn completed(&self, stage: u8) -> bool {
        match stage {
            0 => true,
            1 => self.stage1,
            2 => self.stage2,
            3 => self.stage3,
            _ => false,
        }
    }

    pub fn mark(&mut self, stage: u8) {
        match stage {
            1 => self.stage1 = true,
            2 => self.stage2 = true,
            3 => self.stage3 = true,
            _ => {}
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrichedImageAnnotation {
    pub image_id: ImageId,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
    pub ocr: Vec<OcrEntry>,
    pub simple_captions: Vec<SimpleCaption>,
    pub dense_caption: Option<DenseCaption>,
    pub provenance: Provenance,
}

impl EnrichedImageAnnotation {
    pub fn new(image_id: ImageId, file_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id,
            file_name: file_name.into(),
            width,
            height,
            objects: Vec::new(),
            ocr: Vec::new(),
            simple_captions: Vec::new(),
            dense_caption: None,
            provenance: Provenance::default(),
        }
    }

    pub fn dims(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }

    /// Sort lists into canonical order in place.
    pub fn canonicalize(&mut self) {
        self.objects.sort_by_key(|o| o.object_id);
        self.ocr.sort_by_key(|o| o.ocr_id);
        for obj in &mut self.objects {
            obj.matched_ocr_ids.sort_unstable();
        }
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.object_id == id)
    }
}

/// Prior knowledge handed to the caption integrator, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBundle {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<BundleObject>,
    pub ocr_items: Vec<BundleOcr>,
    pub sampled_simple_captions: Vec<BundleCaption>,
}

impl AnnotationBundle {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.sampled_simple_captions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleObject {
    pub object_id: ObjectId,
    /// Pixel area, the primary ordering key.
    pub area: f64,
    pub category: String,
    /// Normalized `[x, y, w, h]`, rounded to 3 decimals.
    pub position: [f64; 4],
    pub region_description: Option<String>,
}

/// Label used for OCR entries that no object contains.
pub const UNATTACHED: &str = "unattached";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleOcr {
    pub ocr_id: OcrId,
    pub text: String,
    /// Category of the owning object, or [`UNATTACHED`].
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleCaption {
    /// Position in the image's caption list.
    pub index: usize,
    pub text: String,
}

/// Dataset summary in the layout of the classic annotation-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dataset: String,
    pub tokenizer_id: String,
    pub num_images: u64,
    pub num_boxes: u64,
    pub num_ocr_entries: u64,
    pub num_simple_captions: u64,
    pub num_dense_captions: u64,
    pub num_region_descriptions: u64,
    pub atl_dense: f64,
    pub atl_dense_empty: bool,
    pub atl_region: f64,
    pub atl_region_empty: bool,
}

/// One failed rule in [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DegenerateBox,
    OutOfBounds,
    ScoreRange,
    EmptyCategory,
    DuplicateId,
    DanglingReference,
    InconsistentLink,
    ContainmentBroken,
    MissingCorrection,
    TokenLength,
    StageOrder,
    ImageDims,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?} ({})", self.field, self.rule, self.detail)
    }
}

fn violation(out: &mut Vec<Violation>, field: String, rule: Rule, detail: impl Into<String>) {
    out.push(Violation {
        field,
        rule,
        detail: detail.into(),
    });
}

fn check_box(out: &mut Vec<Violation>, field: String, b: &BBox, width: f64, height: f64) {
    if b.is_degenerate() {
        violation(out, field, Rule::DegenerateBox, format!("w={} h={}", b.w, b.h));
    } else if !b.within(width, height) {
        violation(
            out,
            field,
            Rule::OutOfBounds,
            format!("[{}, {}, {}, {}] outside {width}x{height}", b.x, b.y, b.w, b.h),
        );
    }
}

fn check_unit(out: &mut Vec<Violation>, field: String, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        violation(out, field, Rule::ScoreRange, format!("{v} not in [0,1]"));
    }
}

/// Structural validation. Returns an empty list iff every invariant that
/// does not need a tokenizer holds.
pub fn validate(record: &EnrichedImageAnnotation) -> Vec<Violation> {
    let mut out = Vec::new();
    let (width, height) = record.dims();
    if record.width == 0 || record.height == 0 {
        violation(
            &mut out,
            "width/height".into(),
            Rule::ImageDims,
            format!("{}x{}", record.width, record.height),
        );
    }

    let mut objects: BTreeMap<ObjectId, &ObjectAnnotation> = BTreeMap::new();
    for (i, obj) in record.objects.iter().enumerate() {
        let at = |f: &str| format!("objects[{i}].{f}");
        if objects.insert(obj.object_id, obj).is_some() {
            violation(&mut out, at("object_id"), Rule::DuplicateId, obj.object_id.to_string());
        }
        check_box(&mut out, at("bbox"), &obj.bbox, width, height);
        check_unit(&mut out, at("score"), obj.score);
        if obj.category.trim().is_empty() {
            violation(&mut out, at("category"), Rule::EmptyCategory, "empty");
        }
        if obj.region_description.is_some() != obj.region_token_length.is_some() {
            violation(
                &mut out,
                at("region_token_length"),
                Rule::TokenLength,
                "must be present exactly when region_description is",
            );
        }
    }

    let mut ocr: BTreeMap<OcrId, &OcrEntry> = BTreeMap::new();
    for (i, entry) in record.ocr.iter().enumerate() {
        let at = |f: &str| format!("ocr[{i}].{f}");
        if ocr.insert(entry.ocr_id, entry).is_some() {
            violation(&mut out, at("ocr_id"), Rule::DuplicateId, entry.ocr_id.to_string());
        }
        check_box(&mut out, at("bbox"), &entry.bbox, width, height);
        check_unit(&mut out, at("confidence"), entry.confidence);
        if entry.verified && entry.corrected_text.is_none() {
            violation(&mut out, at("corrected_text"), Rule::MissingCorrection, "verified entry lacks corrected_text");
        }
    }

    for (i, obj) in record.objects.iter().enumerate() {
        for id in &obj.matched_ocr_ids {
            match ocr.get(id) {
                None => violation(
                    &mut out,
                    format!("objects[{i}].matched_ocr_ids"),
                    Rule::DanglingReference,
                    format!("ocr {id} not found"),
                ),
                Some(entry) if entry.matched_object_id != Some(obj.object_id) => violation(
                    &mut out,
                    format!("objects[{i}].matched_ocr_ids"),
                    Rule::InconsistentLink,
                    format!("ocr {id} does not point back to object {}", obj.object_id),
                ),
                Some(_) => {}
            }
        }
    }

    for (i, entry) in record.ocr.iter().enumerate() {
        let Some(oid) = entry.matched_object_id else { continue };
        let field = format!("ocr[{i}].matched_object_id");
        match objects.get(&oid) {
            None => violation(&mut out, field, Rule::DanglingReference, format!("object {oid} not found")),
            Some(obj) => {
                if !obj.matched_ocr_ids.contains(&entry.ocr_id) {
                    violation(
                        &mut out,
                        field.clone(),
                        Rule::InconsistentLink,
                        format!("object {oid} does not list ocr {}", entry.ocr_id),
                    );
                }
                if !geometry::contains(&obj.bbox, &entry.bbox) {
                    violation(&mut out, field, Rule::ContainmentBroken, format!("object {oid} does not contain ocr box"));
                }
            }
        }
    }

    let p = &record.provenance;
    if (p.stage3 && !p.stage2) || (p.stage2 && !p.stage1) {
        violation(
            &mut out,
            "provenance".into(),
            Rule::StageOrder,
            format!("stage flags not monotone: {}/{}/{}", p.stage1, p.stage2, p.stage3),
        );
    }
    out
}

/// Checks stored token lengths against `tokenizer`.
pub fn validate_tokens(record: &EnrichedImageAnnotation, tokenizer: &dyn Tokenizer) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, obj) in record.objects.iter().enumerate() {
        if let (Some(text), Some(len)) = (&obj.region_description, obj.region_token_length) {
            let expected = tokenizer.count(text);
            if expected != len {
                violation(
                    &mut out,
                    format!("objects[{i}].region_token_length"),
                    Rule::TokenLength,
                    format!("stored {len}, tokenizer {expected}"),
                );
            }
        }
    }
    for (i, cap) in record.simple_captions.iter().enumerate() {
        let expected = tokenizer.count(&cap.text);
        if expected != cap.token_length {
            violation(
                &mut out,
                format!("simple_captions[{i}].token_length"),
                Rule::TokenLength,
                format!("stored {}, tokenizer {expected}", cap.token_length),
            );
        }
    }
    if let Some(dense) = &record.dense_caption {
        let expected = tokenizer.count(&dense.text);
        if expected != dense.token_length {
            violation(
                &mut out,
                "dense_caption.token_length".into(),
                Rule::TokenLength,
                format!("stored {}, tokenizer {expected}", dense.token_length),
            );
        }
    }
    out
}

/// Serialize one record to its canonical JSON bytes (no trailing newline).
pub fn canonical_serialize(record: &EnrichedImageAnnotation) -> Result<Vec<u8>> {
    let violations = validate(record);
    if !violations.is_empty() {
        return Err(Error::InvariantViolation {
            record: format!("image {}", record.image_id),
            violations,
        });
    }
    let mut canon = record.clone();
    canon.canonicalize();
    Ok(serde_json::to_vec(&canon).expect("record serialization is infallible"))
}

pub fn parse_record(bytes: &[u8]) -> Result<EnrichedImageAnnotation> {
    serde_json::from_slice(bytes).map_err(|e| {
        Error::schema(
            format!("$ (line {}, column {})", e.line(), e.column()),
            e.to_string(),
        )
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ids of every image, used for checkpoint bookkeeping.
pub fn image_ids<'a>(records: impl IntoIterator<Item = &'a EnrichedImageAnnotation>) -> BTreeSet<ImageId> {
    records.into_iter().map(|r| r.image_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: ObjectId, bbox: BBox) -> ObjectAnnotation {
        ObjectAnnotation::from_detection(id, Detection::new(bbox, "dog", 0.9, "det-a"))
    }

    fn ocr(id: OcrId, bbox: BBox) -> OcrEntry {
        OcrEntry {
            ocr_id: id,
            bbox,
            text: "13".into(),
            confidence: 0.8,
            source_id: "ocr-a".into(),
            verified: false,
            corrected_text: None,
            verification_failed: false,
            matched_object_id: None,
        }
    }

    #[test]
    fn minimal_record_golden_bytes() {
        let rec = EnrichedImageAnnotation::new(1, "a.jpg", 640, 480);
        let bytes = canonical_serialize(&rec).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"image_id":1,"file_name":"a.jpg","width":640,"height":480,"objects":[],"ocr":[],"simple_captions":[],"dense_caption":null,"provenance":{"stage1":false,"stage2":false,"stage3":false,"failure":null,"ocr_verified_at":null,"ocr_matched_at":null,"region_generator":null}}"#
        );
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let mut rec = EnrichedImageAnnotation::new(7, "b.jpg", 100, 100);
        for id in [5u64, 3, 9, 1] {
            rec.objects.push(obj(id, BBox::new(id as f64, 0.0, 10.0, 10.0)));
            rec.ocr.push(ocr(id * 10, BBox::new(0.0, id as f64, 2.0, 2.0)));
        }
        // oracle: sort first, then serialize
        let mut sorted = rec.clone();
        sorted.objects.sort_by_key(|o| o.object_id);
        sorted.ocr.sort_by_key(|o| o.ocr_id);
        let expected = serde_json::to_vec(&sorted).unwrap();
        assert_eq!(canonical_serialize(&rec).unwrap(), expected);
    }

    #[test]
    fn round_trip() {
        let mut rec = EnrichedImageAnnotation::new(2, "c.jpg", 50, 40);
        let mut o = obj(1, BBox::new(0.5, 0.25, 10.1, 20.3));
        o.region_description = Some("a brown dog".into());
        o.region_token_length = Some(3);
        o.segmentation = Some(serde_json::json!([[1.0, 2.0, 3.0, 4.0]]));
        rec.objects.push(o);
        let bytes = canonical_serialize(&rec).unwrap();
        let back = parse_record(&bytes).unwrap();
        assert_eq!(back, rec);
        assert_eq!(canonical_serialize(&back).unwrap(), bytes);
    }

    #[test]
    fn valid_record_has_no_violations() {
        let mut rec = EnrichedImageAnnotation::new(1, "a.jpg", 100, 100);
        let mut o = obj(1, BBox::new(0.0, 0.0, 50.0, 50.0));
        let mut t = ocr(2, BBox::new(10.0, 10.0, 5.0, 5.0));
        o.matched_ocr_ids.push(2);
        t.matched_object_id = Some(1);
        rec.objects.push(o);
        rec.ocr.push(t);
        assert_eq!(validate(&rec), vec![]);
    }

    #[test]
    fn dangling_ocr_reference() {
        let mut rec = EnrichedImageAnnotation::new(1, "a.jpg", 100, 100);
        let mut t = ocr(2, BBox::new(10.0, 10.0, 5.0, 5.0));
        t.matched_object_id = Some(99);
        rec.ocr.push(t);
        let v = validate(&rec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DanglingReference);
        assert!(matches!(canonical_serialize(&rec), Err(Error::InvariantViolation { .. })));
    }

    #[test]
    fn zero_width_box() {
        let mut rec = EnrichedImageAnnotation::new(1, "a.jpg", 100, 100);
        rec.objects.push(obj(1, BBox::new(10.0, 10.0, 0.0, 5.0)));
        let v = validate(&rec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DegenerateBox);
    }

    #[test]
    fn stage_flags_must_be_monotone() {
        let mut rec = EnrichedImageAnnotation::new(1, "a.jpg", 100, 100);
        rec.provenance.stage2 = true;
        assert_eq!(validate(&rec)[0].rule, Rule::StageOrder);
    }

    #[test]
    fn clamp_partial_and_drop_outside() {
        let b = BBox::new(-5.0, 90.0, 20.0, 20.0);
        assert_eq!(b.clamp_to(100.0, 100.0), Some(BBox::new(0.0, 90.0, 15.0, 10.0)));
        assert_eq!(BBox::new(120.0, 0.0, 5.0, 5.0).clamp_to(100.0, 100.0), None);
    }
}
