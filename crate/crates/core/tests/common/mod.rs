//! Generators and independent oracles shared by the integration tests.
//!
//! Boxes live on an integer grid so the oracles can decide IoU comparisons
//! exactly with integer arithmetic.
#![allow(dead_code)]

use std::collections::BTreeSet;

use fullanno::model::{BBox, Detection, ObjectAnnotation, ObjectId, OcrEntry};
use proptest::prelude::*;
use rand::Rng;

pub const CATS: [&str; 3] = ["cat", "dog", "car"];
pub const SOURCES: [&str; 3] = ["s0", "s1", "s2"];

/// Thresholds as exact fractions `(num, den)`.
pub const THRESHOLDS: [(i64, i64); 10] = [
    (0, 1),
    (1, 4),
    (1, 3),
    (1, 2),
    (3, 5),
    (7, 10),
    (3, 4),
    (4, 5),
    (9, 10),
    (1, 1),
];

pub fn threshold(t: (i64, i64)) -> f64 {
    t.0 as f64 / t.1 as f64
}

fn ibox(b: &BBox) -> (i64, i64, i64, i64) {
    (b.x as i64, b.y as i64, b.w as i64, b.h as i64)
}

/// Intersection and union areas of two grid boxes.
pub fn inter_union(a: &BBox, b: &BBox) -> (i64, i64) {
    let (ax, ay, aw, ah) = ibox(a);
    let (bx, by, bw, bh) = ibox(b);
    let iw = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0);
    let ih = ((ay + ah).min(by + bh) - ay.max(by)).max(0);
    let inter = iw * ih;
    (inter, aw * ah + bw * bh - inter)
}

/// `IoU(a, b) > num/den`, decided exactly.
pub fn iou_exceeds(a: &BBox, b: &BBox, t: (i64, i64)) -> bool {
    let (i, u) = inter_union(a, b);
    i * t.1 > t.0 * u
}

pub fn grid_box(extent: i64, max_side: i64) -> impl Strategy<Value = BBox> {
    (0..extent, 0..extent, 1..=max_side, 1..=max_side)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, w as f64, h as f64))
}

pub fn detection() -> impl Strategy<Value = Detection> {
    (grid_box(40, 25), 0..CATS.len(), 0u32..=10, 0..SOURCES.len())
        .prop_map(|(b, c, s, src)| Detection::new(b, CATS[c], s as f64 / 10.0, SOURCES[src]))
}

pub fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(detection(), 0..=max)
}

/// Random detections; about a third are jittered copies of an earlier one
/// so that suppression is common.
pub fn random_detections(rng: &mut impl Rng, n: usize, extent: i64) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::with_capacity(n);
    for _ in 0..n {
        let score = rng.gen_range(0..=20) as f64 / 20.0;
        let source = SOURCES[rng.gen_range(0..SOURCES.len())];
        if !out.is_empty() && rng.gen_bool(0.35) {
            let base = out[rng.gen_range(0..out.len())].clone();
            let b = &base.bbox;
            let bbox = BBox::new(
                (b.x + rng.gen_range(-2..=2) as f64).max(0.0),
                (b.y + rng.gen_range(-2..=2) as f64).max(0.0),
                (b.w + rng.gen_range(-2..=2) as f64).max(1.0),
                (b.h + rng.gen_range(-2..=2) as f64).max(1.0),
            );
            out.push(Detection::new(bbox, &base.category, score, source));
            continue;
        }
        let w = rng.gen_range(1..=extent / 4);
        let h = rng.gen_range(1..=extent / 4);
        let b = BBox::new(
            rng.gen_range(0..extent) as f64,
            rng.gen_range(0..extent) as f64,
            w as f64,
            h as f64,
        );
        out.push(Detection::new(b, CATS[rng.gen_range(0..CATS.len())], score, source));
    }
    out
}

fn rank(order: &[&str], source: &str) -> usize {
    order.iter().position(|s| *s == source).unwrap_or(usize::MAX)
}

/// Quadratic greedy NMS over the documented visiting order.
pub fn oracle_nms(dets: &[Detection], t: (i64, i64), order: &[&str], class_agnostic: bool) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(rank(order, &dets[a].source_id).cmp(&rank(order, &dets[b].source_id)))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in idx {
        let clash = kept.iter().any(|&k| {
            (class_agnostic || dets[k].category == dets[i].category) && iou_exceeds(&dets[k].bbox, &dets[i].bbox, t)
        });
        if !clash {
            kept.push(i);
        }
    }
    kept.into_iter().collect()
}

/// Exhaustive scan: the containing object of minimal area, lowest id on ties.
pub fn oracle_match(ocr: &OcrEntry, objects: &[ObjectAnnotation]) -> Option<ObjectId> {
    let o = &ocr.bbox;
    let containing: Vec<&ObjectAnnotation> = objects
        .iter()
        .filter(|obj| {
            let b = &obj.bbox;
            b.x <= o.x && b.y <= o.y && o.x + o.w <= b.x + b.w && o.y + o.h <= b.y + b.h
        })
        .collect();
    let min_area = containing.iter().map(|obj| (obj.bbox.w * obj.bbox.h) as i64).min()?;
    containing
        .iter()
        .filter(|obj| (obj.bbox.w * obj.bbox.h) as i64 == min_area)
        .map(|obj| obj.object_id)
        .min()
}

pub fn ocr_entry(id: u64, bbox: BBox, text: &str) -> OcrEntry {
    OcrEntry {
        ocr_id: id,
        bbox,
        text: text.into(),
        confidence: 0.9,
        source_id: "ocr".into(),
        verified: false,
        corrected_text: None,
        verification_failed: false,
        matched_object_id: None,
    }
}

/// Objects and OCR boxes on a small grid so containment and equal areas
/// are common. Object ids are shuffled distinct values.
pub fn random_layout(rng: &mut impl Rng) -> (Vec<ObjectAnnotation>, Vec<OcrEntry>) {
    let n_obj = rng.gen_range(0..12);
    let mut ids: Vec<u64> = (1..=n_obj as u64 * 3).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let mut objects: Vec<ObjectAnnotation> = Vec::with_capacity(n_obj);
    for k in 0..n_obj {
        // repeated and transposed boxes give equal-area ties
        let b = match objects.last() {
            Some(prev) if rng.gen_bool(0.2) => prev.bbox,
            Some(prev) if rng.gen_bool(0.2) => BBox::new(prev.bbox.x, prev.bbox.y, prev.bbox.h, prev.bbox.w),
            _ => BBox::new(
                rng.gen_range(0..20) as f64,
                rng.gen_range(0..20) as f64,
                rng.gen_range(1..=20) as f64,
                rng.gen_range(1..=20) as f64,
            ),
        };
        objects.push(ObjectAnnotation::from_detection(ids[k], Detection::new(b, CATS[k % 3], 1.0, "gt")));
    }
    let n_ocr = rng.gen_range(0..8);
    let ocr = (0..n_ocr)
        .map(|k| {
            let b = BBox::new(
                rng.gen_range(0..30) as f64,
                rng.gen_range(0..30) as f64,
                rng.gen_range(1..=6) as f64,
                rng.gen_range(1..=6) as f64,
            );
            ocr_entry(100 + k as u64, b, "t")
        })
        .collect();
    (objects, ocr)
}

/// A random COCO instances document and the number of annotations in it.
/// Some boxes are partly out of frame and some have zero area.
pub fn random_coco(rng: &mut impl Rng) -> (serde_json::Value, u64) {
    use serde_json::json;
    let n_images = rng.gen_range(1..8u64);
    let images: Vec<_> = (1..=n_images)
        .map(|id| json!({"id": id * 7, "file_name": format!("{id}.jpg"), "width": 100, "height": 80}))
        .collect();
    let n_ann = rng.gen_range(0..40u64);
    let annotations: Vec<_> = (0..n_ann)
        .map(|k| {
            let x = rng.gen_range(-30.0..110.0f64).round();
            let y = rng.gen_range(-30.0..90.0f64).round();
            let w = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.5..60.0f64) };
            let h = if rng.gen_bool(0.1) { -1.0 } else { rng.gen_range(0.5..60.0f64) };
            json!({
                "id": 1000 - k,
                "image_id": rng.gen_range(1..=n_images) * 7,
                "category_id": rng.gen_range(1..=3),
                "bbox": [x, y, w, h],
            })
        })
        .collect();
    let doc = json!({
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}, {"id": 3, "name": "c"}],
    });
    (doc, n_ann)
}
