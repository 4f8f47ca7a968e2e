//! Stage-2/3 logic that is independent of any model: OCR-to-object
//! matching, context crops, the region prompt, and the integration prompt.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, ImageRef};
use crate::geometry::{self, contains};
use crate::model::{
    sha256_hex, AnnotationBundle, BBox, BundleCaption, BundleObject, BundleOcr, EnrichedImageAnnotation, ObjectAnnotation,
    ObjectId, OcrEntry, OcrId, UNATTACHED,
};
use crate::templates;

pub const DEFAULT_CONTEXT_RATIO: f64 = 0.2;
pub const DEFAULT_MAX_SIMPLE_CAPTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrMatch {
    pub ocr_id: OcrId,
    pub matched_object_id: Option<ObjectId>,
    /// Number of objects whose box contains the OCR box.
    pub candidate_count: usize,
}

/// For each OCR entry pick the smallest-area object whose box contains it
/// (edge-inclusive); equal areas go to the lowest object id.
pub fn match_ocr_to_objects(ocr: &[OcrEntry], objects: &[ObjectAnnotation]) -> Vec<OcrMatch> {
    ocr.iter()
        .map(|entry| {
            let mut best: Option<(f64, ObjectId)> = None;
            let mut candidates = 0;
            for obj in objects {
                if !contains(&obj.bbox, &entry.bbox) {
                    continue;
                }
                candidates += 1;
                let key = (obj.bbox.w * obj.bbox.h, obj.object_id);
                let better = match best {
                    None => true,
                    Some((area, id)) => key.0 < area || (key.0 == area && key.1 < id),
                };
                if better {
                    best = Some(key);
                }
            }
            OcrMatch {
                ocr_id: entry.ocr_id,
                matched_object_id: best.map(|(_, id)| id),
                candidate_count: candidates,
            }
        })
        .collect()
}

/// Rewrite both directions of the OCR/object links from `matches`.
pub fn apply_matches(record: &mut EnrichedImageAnnotation, matches: &[OcrMatch]) {
    let by_ocr: HashMap<OcrId, Option<ObjectId>> =
        matches.iter().map(|m| (m.ocr_id, m.matched_object_id)).collect();
    for obj in &mut record.objects {
        obj.matched_ocr_ids.clear();
    }
    let mut owners: HashMap<ObjectId, Vec<OcrId>> = HashMap::new();
    for entry in &mut record.ocr {
        entry.matched_object_id = by_ocr.get(&entry.ocr_id).copied().flatten();
        if let Some(oid) = entry.matched_object_id {
            owners.entry(oid).or_default().push(entry.ocr_id);
        }
    }
    for obj in &mut record.objects {
        if let Some(mut ids) = owners.remove(&obj.object_id) {
            ids.sort_unstable();
            obj.matched_ocr_ids = ids;
        }
    }
}

fn ulp_up(v: f64) -> f64 {
    if v == 0.0 {
        f64::from_bits(1)
    } else if v > 0.0 {
        f64::from_bits(v.to_bits() + 1)
    } else {
        f64::from_bits(v.to_bits() - 1)
    }
}

fn ulp_down(v: f64) -> f64 {
    if v > 0.0 {
        f64::from_bits(v.to_bits() - 1)
    } else {
        v
    }
}

/// Expand one axis and clamp; the returned extent covers `[lo, lo+len]`
/// exactly in floating point and stays within `[0, limit]`.
fn expand_axis(lo: f64, len: f64, pad: f64, limit: f64) -> (f64, f64) {
    let start = (lo - pad).max(0.0);
    let end = (lo + len + pad).min(limit);
    let mut extent = end - start;
    while start + extent < lo + len {
        extent = ulp_up(extent);
    }
    while start + extent > limit && start + ulp_down(extent) >= lo + len {
        extent = ulp_down(extent);
    }
    (start, extent)
}

/// Grow `bbox` by `context_ratio * w` left and right and
/// `context_ratio * h` top and bottom, clamped to the image.
pub fn crop_with_context(image_dims: (u32, u32), bbox: &BBox, context_ratio: f64) -> Result<BBox> {
    geometry::area(bbox)?;
    let ratio = context_ratio.max(0.0);
    let (x, w) = expand_axis(bbox.x, bbox.w, ratio * bbox.w, image_dims.0 as f64);
    let (y, h) = expand_axis(bbox.y, bbox.h, ratio * bbox.h, image_dims.1 as f64);
    Ok(BBox::new(x, y, w, h))
}

/// The region-description prompt with `category_name` filled in.
pub fn build_region_prompt(category_name: &str) -> Result<String> {
    let name = category_name.trim();
    if name.is_empty() {
        return Err(Error::EmptyCategory);
    }
    Ok(templates::body(templates::REGION_DESCRIPTION).replace("{category_name}", name))
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Collect the priors of a stage-2-complete record in canonical order.
pub fn build_bundle(record: &EnrichedImageAnnotation, max_simple_captions: usize) -> Result<AnnotationBundle> {
    if !record.provenance.stage2 {
        return Err(Error::StageViolation(format!(
            "image {} has not completed stage 2",
            record.image_id
        )));
    }
    let (w, h) = record.dims();
    let objects = record
        .objects
        .iter()
        .map(|o| BundleObject {
            object_id: o.object_id,
            area: o.bbox.w * o.bbox.h,
            category: o.category.clone(),
            position: [
                round3(o.bbox.x / w),
                round3(o.bbox.y / h),
                round3(o.bbox.w / w),
                round3(o.bbox.h / h),
            ],
            region_description: o.region_description.clone(),
        })
        .collect();
    let category_of: HashMap<ObjectId, &str> = record
        .objects
        .iter()
        .map(|o| (o.object_id, o.category.as_str()))
        .collect();
    let ocr_items = record
        .ocr
        .iter()
        .map(|e| BundleOcr {
            ocr_id: e.ocr_id,
            text: e.best_text().to_string(),
            owner: e
                .matched_object_id
                .and_then(|id| category_of.get(&id).copied())
                .unwrap_or(UNATTACHED)
                .to_string(),
        })
        .collect();
    let sampled_simple_captions = record
        .simple_captions
        .iter()
        .take(max_simple_captions)
        .enumerate()
        .map(|(index, c)| BundleCaption {
            index,
            text: c.text.clone(),
        })
        .collect();
    let mut bundle = AnnotationBundle {
        width: record.width,
        height: record.height,
        objects,
        ocr_items,
        sampled_simple_captions,
    };
    canonicalize_bundle(&mut bundle);
    Ok(bundle)
}

/// Objects by (area desc, id asc); OCR by id; captions by index.
pub fn canonicalize_bundle(bundle: &mut AnnotationBundle) {
    bundle
        .objects
        .sort_by(|a, b| b.area.total_cmp(&a.area).then(a.object_id.cmp(&b.object_id)));
    bundle.ocr_items.sort_by_key(|o| o.ocr_id);
    bundle.sampled_simple_captions.sort_by_key(|c| c.index);
}

/// The final prompt sent to the caption integrator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationMessage {
    pub system_preamble: String,
    pub content: String,
    /// SHA-256 over preamble, a NUL byte, and content.
    pub hash: String,
}

impl IntegrationMessage {
    pub fn new(system_preamble: String, content: String) -> Self {
        let mut bytes = Vec::with_capacity(system_preamble.len() + content.len() + 1);
        bytes.extend_from_slice(system_preamble.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(content.as_bytes());
        let hash = sha256_hex(&bytes);
        Self {
            system_preamble,
            content,
            hash,
        }
    }
}

/// Collapse internal whitespace so each fact stays on one line.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn build_integration_prompt(bundle: &AnnotationBundle) -> Result<IntegrationMessage> {
    if bundle.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let mut b = bundle.clone();
    canonicalize_bundle(&mut b);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "Image size: {}x{} pixels. Positions are (x, y, width, height) as fractions of the image size, measured from the top-left corner.",
        b.width, b.height
    );
    out.push('\n');

    out.push_str("Objects:\n");
    if b.objects.is_empty() {
        out.push_str("- none\n");
    }
    for o in &b.objects {
        let [x, y, w, h] = o.position;
        let _ = writeln!(out, "- {} @ ({x:.3}, {y:.3}, {w:.3}, {h:.3})", one_line(&o.category));
    }

    out.push_str("Region descriptions:\n");
    let described: Vec<_> = b
        .objects
        .iter()
        .filter_map(|o| o.region_description.as_deref().map(|d| (o, d)))
        .collect();
    if described.is_empty() {
        out.push_str("- none\n");
    }
    for (o, d) in described {
        let _ = writeln!(out, "- {}: {}", one_line(&o.category), one_line(d));
    }

    out.push_str("Text in image (OCR):\n");
    if b.ocr_items.is_empty() {
        out.push_str("- none\n");
    }
    for t in &b.ocr_items {
        let quoted = serde_json::to_string(&t.text).expect("string serializes");
        let _ = writeln!(out, "- {quoted} ({})", one_line(&t.owner));
    }

    out.push_str("Reference captions:\n");
    if b.sampled_simple_captions.is_empty() {
        out.push_str("- none\n");
    }
    for c in &b.sampled_simple_captions {
        let _ = writeln!(out, "- {}", one_line(&c.text));
    }

    Ok(IntegrationMessage::new(
        templates::body(templates::INTEGRATION_SYSTEM).to_string(),
        out,
    ))
}

/// Ask the verifier to confirm or correct an OCR reading.
///
/// An empty answer keeps the original text and sets
/// `verification_failed`.
pub fn verify_ocr(
    entry: &OcrEntry,
    image: &ImageRef,
    crop: &BBox,
    gateway: &Gateway,
    verifier_id: &str,
) -> Result<OcrEntry> {
    let answer = gateway.verify_text(image, crop, &entry.text, verifier_id)?;
    let mut out = entry.clone();
    out.verified = true;
    if answer.text.is_empty() {
        out.corrected_text = Some(entry.text.clone());
        out.verification_failed = true;
    } else {
        out.corrected_text = Some(answer.text);
        out.verification_failed = false;
    }
    Ok(out)
}
