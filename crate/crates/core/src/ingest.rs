//! COCO / Visual Genome readers and the enriched JSONL format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::templates::template_version;
use crate::error::{Error, Result};
use crate::model::{
    canonical_serialize, parse_record, sha256_hex, validate, BBox, EnrichedImageAnnotation, ImageId, ObjectAnnotation,
    SimpleCaption,
};
use crate::tokenizer::Tokenizer;

/// Source id given to ingested ground-truth boxes.
pub const GROUND_TRUTH_SOURCE: &str = "coco-gt";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

const LOCAL_ID_BITS: u32 = 24;

/// Dataset-unique id for the `seq`-th object (or OCR entry) of an image.
pub fn compose_id(image_id: ImageId, seq: u64) -> u64 {
    (image_id << LOCAL_ID_BITS) | (seq & ((1 << LOCAL_ID_BITS) - 1))
}

/// Next free local sequence number given existing ids of one image.
pub fn next_seq<I: IntoIterator<Item = u64>>(ids: I) -> u64 {
    ids.into_iter()
        .map(|id| id & ((1 << LOCAL_ID_BITS) - 1))
        .max()
        .map_or(1, |m| m + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub images: Vec<EnrichedImageAnnotation>,
    pub source_manifest: Vec<SourceFile>,
}

impl DatasetHandle {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            images: Vec::new(),
            source_manifest: Vec::new(),
        }
    }

    pub fn sort_canonical(&mut self) {
        self.images.sort_by_key(|r| r.image_id);
        for r in &mut self.images {
            r.canonicalize();
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub images: u64,
    pub annotations_in: u64,
    pub objects_loaded: u64,
    pub dropped_boxes: u64,
    pub clamped_boxes: u64,
    pub captions_loaded: u64,
    pub skipped_captions: u64,
    pub duplicate_images: u64,
}

impl LoadReport {
    pub fn merge(&mut self, other: &LoadReport) {
        self.images += other.images;
        self.annotations_in += other.annotations_in;
        self.objects_loaded += other.objects_loaded;
        self.dropped_boxes += other.dropped_boxes;
        self.clamped_boxes += other.clamped_boxes;
        self.captions_loaded += other.captions_loaded;
        self.skipped_captions += other.skipped_captions;
        self.duplicate_images += other.duplicate_images;
    }
}

// -- JSON walking helpers, so schema errors carry a path --------------------

fn field<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    v.as_object()
        .ok_or_else(|| Error::schema(path, "expected object"))?
        .get(key)
        .ok_or_else(|| Error::schema(format!("{path}.{key}"), "missing key"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::schema(path, "expected array"))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::schema(path, "expected non-negative integer"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::schema(path, "expected number"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::schema(path, "expected string"))
}

fn read_json(path: &Path) -> Result<(Value, SourceFile)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value = serde_json::from_slice(&bytes).map_err(|e| Error::schema("$", e.to_string()))?;
    Ok((
        value,
        SourceFile {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        },
    ))
}

/// Parse a COCO detection document that is already in memory.
pub fn parse_coco(
    doc: &Value,
    captions: Option<&Value>,
    tokenizer: &dyn Tokenizer,
) -> Result<(Vec<EnrichedImageAnnotation>, LoadReport)> {
    let mut report = LoadReport::default();

    let images = as_array(field(doc, "images", "$")?, "$.images")?;
    let annotations = as_array(field(doc, "annotations", "$")?, "$.annotations")?;
    let categories = as_array(field(doc, "categories", "$")?, "$.categories")?;

    let mut category_names = HashMap::new();
    for (i, c) in categories.iter().enumerate() {
        let p = format!("$.categories[{i}]");
        let id = as_u64(field(c, "id", &p)?, &format!("{p}.id"))?;
        let name = as_str(field(c, "name", &p)?, &format!("{p}.name"))?;
        category_names.insert(id, name.to_string());
    }

    let mut records: BTreeMap<ImageId, EnrichedImageAnnotation> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        let p = format!("$.images[{i}]");
        let id = as_u64(field(img, "id", &p)?, &format!("{p}.id"))?;
        let file_name = as_str(field(img, "file_name", &p)?, &format!("{p}.file_name"))?;
        let width = as_u64(field(img, "width", &p)?, &format!("{p}.width"))?;
        let height = as_u64(field(img, "height", &p)?, &format!("{p}.height"))?;
        if id >= 1 << (64 - LOCAL_ID_BITS) {
            return Err(Error::schema(format!("{p}.id"), "image id too large for id scheme"));
        }
        if width == 0 || height == 0 || width > u32::MAX as u64 || height > u32::MAX as u64 {
            return Err(Error::schema(format!("{p}.width"), "invalid image dimensions"));
        }
        let rec = EnrichedImageAnnotation::new(id, file_name, width as u32, height as u32);
        if records.insert(id, rec).is_some() {
            return Err(Error::IdCollision(id));
        }
    }
    report.images = records.len() as u64;

    // (coco annotation id, object) per image, ordered later by annotation id
    let mut pending: BTreeMap<ImageId, Vec<(u64, ObjectAnnotation)>> = BTreeMap::new();
    for (i, ann) in annotations.iter().enumerate() {
        report.annotations_in += 1;
        let p = format!("$.annotations[{i}]");
        let ann_id = match ann.get("id") {
            Some(v) => as_u64(v, &format!("{p}.id"))?,
            None => i as u64,
        };
        let image_id = as_u64(field(ann, "image_id", &p)?, &format!("{p}.image_id"))?;
        let category_id = as_u64(field(ann, "category_id", &p)?, &format!("{p}.category_id"))?;
        let bbox_path = format!("{p}.bbox");
        let raw = as_array(field(ann, "bbox", &p)?, &bbox_path)?;
        if raw.len() != 4 {
            return Err(Error::schema(bbox_path, "expected 4 numbers"));
        }
        let mut xywh = [0.0; 4];
        for (k, v) in raw.iter().enumerate() {
            xywh[k] = as_f64(v, &format!("{bbox_path}[{k}]"))?;
        }
        let record = records
            .get(&image_id)
            .ok_or_else(|| Error::schema(format!("{p}.image_id"), format!("unknown image {image_id}")))?;
        let category = category_names
            .get(&category_id)
            .ok_or_else(|| Error::schema(format!("{p}.category_id"), format!("unknown category {category_id}")))?;

        let bbox = BBox::from(xywh);
        let (w, h) = record.dims();
        let Some(clamped) = bbox.clamp_to(w, h) else {
            report.dropped_boxes += 1;
            continue;
        };
        if clamped != bbox {
            report.clamped_boxes += 1;
        }
        let mut obj = ObjectAnnotation::from_detection(
            0,
            crate::model::Detection::new(clamped, category.clone(), 1.0, GROUND_TRUTH_SOURCE),
        );
        obj.segmentation = ann.get("segmentation").cloned();
        pending.entry(image_id).or_default().push((ann_id, obj));
    }

    for (image_id, mut objs) in pending {
        objs.sort_by_key(|(ann_id, _)| *ann_id);
        let rec = records.get_mut(&image_id).expect("checked above");
        for (seq, (_, mut obj)) in objs.into_iter().enumerate() {
            obj.object_id = compose_id(image_id, seq as u64 + 1);
            rec.objects.push(obj);
            report.objects_loaded += 1;
        }
    }

    if let Some(caps) = captions {
        let anns = as_array(field(caps, "annotations", "$")?, "$.annotations")?;
        let mut per_image: BTreeMap<ImageId, Vec<(u64, String)>> = BTreeMap::new();
        for (i, ann) in anns.iter().enumerate() {
            let p = format!("$.annotations[{i}]");
            let image_id = as_u64(field(ann, "image_id", &p)?, &format!("{p}.image_id"))?;
            let text = as_str(field(ann, "caption", &p)?, &format!("{p}.caption"))?;
            let id = match ann.get("id") {
                Some(v) => as_u64(v, &format!("{p}.id"))?,
                None => i as u64,
            };
            if records.contains_key(&image_id) {
                per_image.entry(image_id).or_default().push((id, text.trim().to_string()));
            } else {
                report.skipped_captions += 1;
            }
        }
        for (image_id, mut caps) in per_image {
            caps.sort();
            let rec = records.get_mut(&image_id).expect("filtered above");
            for (_, text) in caps {
                rec.simple_captions.push(SimpleCaption::new(text, tokenizer));
                report.captions_loaded += 1;
            }
        }
    }

    Ok((records.into_values().collect(), report))
}

/// Load a COCO instances file, optionally with its captions file.
pub fn load_coco(
    instances_path: &Path,
    captions_path: Option<&Path>,
    tokenizer: &dyn Tokenizer,
) -> Result<(DatasetHandle, LoadReport)> {
    let (doc, src) = read_json(instances_path)?;
    let mut sources = vec![src];
    let captions = match captions_path {
        Some(p) => {
            let (v, s) = read_json(p)?;
            sources.push(s);
            Some(v)
        }
        None => None,
    };
    let (images, report) = parse_coco(&doc, captions.as_ref(), tokenizer)?;
    let name = instances_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((
        DatasetHandle {
            name,
            images,
            source_manifest: sources,
        },
        report,
    ))
}

/// Union several datasets keyed on `file_name`; the first occurrence wins.
pub fn union_by_file_name(name: &str, parts: Vec<DatasetHandle>) -> Result<(DatasetHandle, u64)> {
    let mut out = DatasetHandle::empty(name);
    let mut seen_files = HashSet::new();
    let mut seen_ids = HashSet::new();
    let mut duplicates = 0;
    for part in parts {
        out.source_manifest.extend(part.source_manifest);
        for rec in part.images {
            if !seen_files.insert(rec.file_name.clone()) {
                duplicates += 1;
                continue;
            }
            if !seen_ids.insert(rec.image_id) {
                return Err(Error::IdCollision(rec.image_id));
            }
            out.images.push(rec);
        }
    }
    out.sort_canonical();
    Ok((out, duplicates))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VgRegions {
    pub regions: BTreeMap<ImageId, Vec<(BBox, String)>>,
    pub skipped: u64,
}

impl VgRegions {
    pub fn len(&self) -> usize {
        self.regions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parse a Visual Genome `region_descriptions.json` document.
///
/// Region boxes are clamped at the origin (the file carries no image size);
/// entries missing a field or with no area left are skipped and counted.
pub fn parse_vg_regions(doc: &Value) -> Result<VgRegions> {
    let mut out = VgRegions::default();
    for (i, img) in as_array(doc, "$")?.iter().enumerate() {
        let p = format!("$[{i}]");
        let regions = as_array(field(img, "regions", &p)?, &format!("{p}.regions"))?;
        let image_id = match img.get("id").or_else(|| img.get("image_id")) {
            Some(v) => Some(as_u64(v, &format!("{p}.id"))?),
            None => None,
        };
        for region in regions {
            let parsed = (|| {
                let phrase = region.get("phrase")?.as_str()?.trim().to_string();
                let num = |k: &str| region.get(k).and_then(Value::as_f64);
                let bbox = BBox::new(num("x")?, num("y")?, num("width")?, num("height")?);
                let owner = region
                    .get("image_id")
                    .and_then(Value::as_u64)
                    .or(image_id)?;
                let bbox = bbox.clamp_to(f64::INFINITY, f64::INFINITY)?;
                (!phrase.is_empty()).then_some((owner, bbox, phrase))
            })();
            match parsed {
                Some((owner, bbox, phrase)) => out.regions.entry(owner).or_default().push((bbox, phrase)),
                None => out.skipped += 1,
            }
        }
    }
    Ok(out)
}

pub fn load_vg_regions(path: &Path) -> Result<VgRegions> {
    let (doc, _) = read_json(path)?;
    parse_vg_regions(&doc)
}

/// Sidecar written next to every enriched file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub tokenizer_id: String,
    pub engine_version: String,
    pub template_version: String,
    pub config_hash: String,
    pub image_union_key: String,
    pub line_count: u64,
    pub content_sha256: String,
    pub sources: Vec<SourceFile>,
}

pub fn manifest_path(out_path: &Path) -> PathBuf {
    let mut s = out_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Write records as canonical JSONL sorted by image id. Returns the line
/// count and the SHA-256 of the file contents.
pub fn write_jsonl(records: &[EnrichedImageAnnotation], out_path: &Path) -> Result<(u64, String)> {
    let mut sorted: Vec<&EnrichedImageAnnotation> = records.iter().collect();
    sorted.sort_by_key(|r| r.image_id);
    let mut buf = Vec::new();
    for rec in sorted {
        buf.extend(canonical_serialize(rec)?);
        buf.push(b'\n');
    }
    atomic_write(out_path, &buf)?;
    Ok((records.len() as u64, sha256_hex(&buf)))
}

/// Write to a temporary sibling, then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Validate every record, then write the JSONL file and its manifest.
/// Nothing is written if any record is invalid.
pub fn write_enriched(
    handle: &DatasetHandle,
    out_path: &Path,
    tokenizer_id: &str,
    config_hash: &str,
) -> Result<Manifest> {
    for rec in &handle.images {
        let violations = validate(rec);
        if !violations.is_empty() {
            return Err(Error::InvariantViolation {
                record: format!("image {} ({})", rec.image_id, rec.file_name),
                violations,
            });
        }
    }
    let (line_count, content_sha256) = write_jsonl(&handle.images, out_path)?;
    let manifest = Manifest {
        dataset: handle.name.clone(),
        tokenizer_id: tokenizer_id.to_string(),
        engine_version: ENGINE_VERSION.to_string(),
        template_version: template_version().to_string(),
        config_hash: config_hash.to_string(),
        image_union_key: "file_name".to_string(),
        line_count,
        content_sha256,
        sources: handle.source_manifest.clone(),
    };
    let mp = manifest_path(out_path);
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    atomic_write(&mp, &bytes)?;
    Ok(manifest)
}

pub fn read_manifest(out_path: &Path) -> Result<Option<Manifest>> {
    let mp = manifest_path(out_path);
    match fs::read(&mp) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| Error::schema(mp.display().to_string(), e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(mp, e)),
    }
}

/// Parse JSONL records; errors cite the 1-based line number.
pub fn parse_jsonl(text: &str) -> Result<Vec<EnrichedImageAnnotation>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        let rec = parse_record(line.as_bytes()).map_err(|e| match e {
            Error::Schema { message, .. } => Error::schema(format!("line {}", i + 1), message),
            other => other,
        })?;
        if !ids.insert(rec.image_id) {
            return Err(Error::IdCollision(rec.image_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_enriched(path: &Path) -> Result<DatasetHandle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let images = parse_jsonl(&text)?;
    let manifest = read_manifest(path)?;
    let name = match &manifest {
        Some(m) => m.dataset.clone(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    Ok(DatasetHandle {
        name,
        images,
        source_manifest: manifest.map(|m| m.sources).unwrap_or_default(),
    })
}
