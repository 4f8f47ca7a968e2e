//! Box kernels: area, IoU, containment, confidence filtering, greedy NMS and
//! multi-source aggregation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::{BBox, Detection};

/// IoU above which a lower-ranked detection of the same category is
/// suppressed.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.75;
/// Minimum score a detection needs to survive thresholding.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

pub fn area(b: &BBox) -> Result<f64> {
    if b.is_degenerate() {
        return Err(Error::DegenerateBox { w: b.w, h: b.h });
    }
    Ok(b.w * b.h)
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    let area_a = area(a)?;
    let area_b = area(b)?;
    Ok(iou_unchecked(a, b, area_a, area_b))
}

#[inline]
fn iou_unchecked(a: &BBox, b: &BBox, area_a: f64, area_b: f64) -> f64 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    // union >= max(area_a, area_b) > 0 for valid boxes
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// Edge-inclusive containment of `inner` in `outer`.
pub fn contains(outer: &BBox, inner: &BBox) -> bool {
    outer.x <= inner.x
        && outer.y <= inner.y
        && inner.right() <= outer.right()
        && inner.bottom() <= outer.bottom()
}

/// Keeps detections with `score >= threshold`, preserving order.
pub fn filter_by_confidence(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= threshold).cloned().collect()
}

/// Source priorities for tie-breaking; lower rank wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourcePriorities {
    ranks: HashMap<String, u32>,
}

impl SourcePriorities {
    /// Ranks follow the given order: the first id gets rank 0.
    pub fn from_order<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ranks = HashMap::new();
        for id in ids {
            let next = ranks.len() as u32;
            ranks.entry(id.into()).or_insert(next);
        }
        Self { ranks }
    }

    pub fn get(&self, source_id: &str) -> Option<u32> {
        self.ranks.get(source_id).copied()
    }

    fn rank_or_last(&self, source_id: &str) -> u32 {
        self.get(source_id).unwrap_or(u32::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub iou_threshold: f64,
    /// Suppress across categories as well.
    pub class_agnostic: bool,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            class_agnostic: false,
        }
    }
}

fn check_boxes(dets: &[Detection]) -> Result<()> {
    let bad: Vec<usize> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.bbox.is_degenerate())
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::DegenerateDetections { indices: bad })
    }
}

/// Indices of the detections kept by class-aware greedy NMS, in output
/// order (score desc, index asc).
pub fn nms_indices(dets: &[Detection], params: &NmsParams, priorities: &SourcePriorities) -> Result<Vec<usize>> {
    check_boxes(dets)?;
    let areas: Vec<f64> = dets.iter().map(|d| d.bbox.w * d.bbox.h).collect();
    let ranks: Vec<u32> = dets.iter().map(|d| priorities.rank_or_last(&d.source_id)).collect();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        let key = if params.class_agnostic { "" } else { d.category.as_str() };
        groups.entry(key).or_default().push(i);
    }

    let mut kept = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for (_, mut order) in groups {
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .total_cmp(&dets[a].score)
                .then(ranks[a].cmp(&ranks[b]))
                .then(a.cmp(&b))
        });
        for (pos, &i) in order.iter().enumerate() {
            if suppressed[i] {
                continue;
            }
            kept.push(i);
            for &j in &order[pos + 1..] {
                if !suppressed[j]
                    && iou_unchecked(&dets[i].bbox, &dets[j].bbox, areas[i], areas[j]) > params.iou_threshold
                {
                    suppressed[j] = true;
                }
            }
        }
    }
    kept.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    Ok(kept)
}

/// Class-aware greedy NMS with equal source priorities.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    let params = NmsParams {
        iou_threshold,
        class_agnostic: false,
    };
    nms_with(dets, &params, &SourcePriorities::default())
}

pub fn nms_with(dets: &[Detection], params: &NmsParams, priorities: &SourcePriorities) -> Result<Vec<Detection>> {
    Ok(nms_indices(dets, params, priorities)?
        .into_iter()
        .map(|i| dets[i].clone())
        .collect())
}

/// Canonical within-source order, so that arrival order inside a source
/// never affects which duplicate survives.
fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.category.cmp(&b.category))
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Merge per-source detections: order sources by priority, threshold, NMS.
///
/// Every detection is re-tagged with the source id it arrived under.
pub fn aggregate_sources(
    per_source: &[(String, Vec<Detection>)],
    conf_threshold: f64,
    params: &NmsParams,
    priorities: &SourcePriorities,
) -> Result<Vec<Detection>> {
    Ok(aggregate_sources_origin(per_source, conf_threshold, params, priorities)?
        .into_iter()
        .map(|(s, i)| Detection {
            source_id: per_source[s].0.clone(),
            ..per_source[s].1[i].clone()
        })
        .collect())
}

/// Same as [`aggregate_sources`], but returns `(source index, detection
/// index)` pairs into `per_source` for the kept detections, in output order.
pub fn aggregate_sources_origin(
    per_source: &[(String, Vec<Detection>)],
    conf_threshold: f64,
    params: &NmsParams,
    priorities: &SourcePriorities,
) -> Result<Vec<(usize, usize)>> {
    let mut sources: Vec<(u32, usize)> = Vec::with_capacity(per_source.len());
    for (s, (id, _)) in per_source.iter().enumerate() {
        let rank = priorities
            .get(id)
            .ok_or_else(|| Error::UnknownSource(id.clone()))?;
        sources.push((rank, s));
    }
    sources.sort_by(|a, b| a.0.cmp(&b.0).then(per_source[a.1].0.cmp(&per_source[b.1].0)).then(a.1.cmp(&b.1)));

    let mut merged = Vec::new();
    let mut origin = Vec::new();
    for (_, s) in sources {
        let (id, dets) = &per_source[s];
        let mut local: Vec<(usize, Detection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.score >= conf_threshold)
            .map(|(i, d)| {
                (
                    i,
                    Detection {
                        source_id: id.clone(),
                        ..d.clone()
                    },
                )
            })
            .collect();
        local.sort_by(|a, b| canonical_order(&a.1, &b.1).then(a.0.cmp(&b.0)));
        for (i, d) in local {
            merged.push(d);
            origin.push((s, i));
        }
    }
    Ok(nms_indices(&merged, params, priorities)?
        .into_iter()
        .map(|k| origin[k])
        .collect())
}
