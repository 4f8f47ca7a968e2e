//! Synthetic COCO-style datasets with matching stub endpoints, for demos,
//! tests and benchmarks. Everything is derived from a seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gateway::stub::{StubBox, StubText};
use crate::gateway::{EndpointConfig, StubBehavior};
use crate::ingest::atomic_write;
use crate::pipeline::{DatasetInput, PipelineConfig};

pub const CATEGORIES: [&str; 8] = ["person", "car", "dog", "bus", "bicycle", "sign", "chair", "bottle"];
const WORDS: [&str; 7] = ["STOP", "EXIT", "Main St", "0PEN", "42", "CAFE", "No Parking"];
const SIZES: [(u32, u32); 3] = [(640, 480), (480, 360), (800, 600)];

pub const DETECTOR: &str = "detector-a";
pub const OCR: &str = "ocr-a";
pub const CAPTIONER: &str = "region-captioner";
pub const VERIFIER: &str = "ocr-verifier";
pub const INTEGRATOR: &str = "integrator";

#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub instances: PathBuf,
    pub captions: PathBuf,
    pub config_path: PathBuf,
    pub config: PipelineConfig,
}

struct Image {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    boxes: Vec<([f64; 4], usize)>,
}

fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    let bw = rng.gen_range(0.15..0.5) * w;
    let bh = rng.gen_range(0.15..0.5) * h;
    let x = rng.gen_range(0.0..(w - bw));
    let y = rng.gen_range(0.0..(h - bh));
    [x.round(), y.round(), bw.round(), bh.round()]
}

/// A box inside `outer`, a quarter of its size.
fn inner_box(rng: &mut ChaCha8Rng, outer: [f64; 4]) -> [f64; 4] {
    let w = (outer[2] / 4.0).floor().max(1.0);
    let h = (outer[3] / 4.0).floor().max(1.0);
    let x = outer[0] + rng.gen_range(0.0..=(outer[2] - w)).floor();
    let y = outer[1] + rng.gen_range(0.0..=(outer[3] - h)).floor();
    [x, y, w, h]
}

fn images(n: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    (1..=n as u64)
        .map(|id| {
            let (width, height) = SIZES[rng.gen_range(0..SIZES.len())];
            let mut boxes = Vec::new();
            match id {
                // The first two images carry the well-known scene text.
                1 => boxes.push(([100.0, 100.0, 300.0, 200.0], 3)),
                2 => boxes.push(([50.0, 50.0, 200.0, 100.0], 5)),
                _ => {}
            }
            for _ in 0..rng.gen_range(1..=3) {
                boxes.push((random_box(rng, width, height), rng.gen_range(0..CATEGORIES.len())));
            }
            Image {
                id,
                file_name: format!("img_{id:05}.jpg"),
                width,
                height,
                boxes,
            }
        })
        .collect()
}

fn coco_instances(imgs: &[Image]) -> Value {
    let mut annotations = Vec::new();
    let mut ann_id = 1;
    for img in imgs {
        for (bbox, cat) in &img.boxes {
            annotations.push(json!({
                "id": ann_id,
                "image_id": img.id,
                "category_id": cat + 1,
                "bbox": bbox,
                "area": bbox[2] * bbox[3],
                "iscrowd": 0,
            }));
            ann_id += 1;
        }
    }
    json!({
        "images": imgs.iter().map(|i| json!({
            "id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height,
        })).collect::<Vec<_>>(),
        "annotations": annotations,
        "categories": CATEGORIES.iter().enumerate().map(|(i, c)| json!({"id": i + 1, "name": c})).collect::<Vec<_>>(),
    })
}

fn coco_captions(imgs: &[Image], rng: &mut ChaCha8Rng) -> Value {
    let mut annotations = Vec::new();
    let mut id = 1;
    for img in imgs {
        let first = CATEGORIES[img.boxes[0].1];
        let texts = [
            format!("A {first} in a busy street scene."),
            format!("There is a {first} near the center of the picture."),
            format!("Photo of a {first} and some other things around it."),
        ];
        for text in texts.iter().take(rng.gen_range(2..=3)) {
            annotations.push(json!({"id": id, "image_id": img.id, "caption": text}));
            id += 1;
        }
    }
    json!({
        "images": imgs.iter().map(|i| json!({"id": i.id, "file_name": i.file_name})).collect::<Vec<_>>(),
        "annotations": annotations,
    })
}

fn detector_stub(imgs: &[Image], rng: &mut ChaCha8Rng) -> StubBehavior {
    let mut by_image = BTreeMap::new();
    for img in imgs {
        let (gt, cat) = img.boxes[0];
        let mut boxes = vec![
            // near-copy of a ground-truth box: suppressed by NMS
            StubBox::new([gt[0] + 1.0, gt[1], gt[2], gt[3]], CATEGORIES[cat], 0.9),
            StubBox::new(
                random_box(rng, img.width, img.height),
                CATEGORIES[rng.gen_range(0..CATEGORIES.len())],
                rng.gen_range(0.5..0.95),
            ),
            // below the confidence threshold
            StubBox::new(random_box(rng, img.width, img.height), "chair", 0.1),
        ];
        boxes.iter_mut().for_each(|b| b.score = (b.score * 1000.0).round() / 1000.0);
        by_image.insert(img.file_name.clone(), boxes);
    }
    StubBehavior::CannedDetections {
        by_image,
        default: Vec::new(),
    }
}

fn ocr_stub(imgs: &[Image], rng: &mut ChaCha8Rng) -> StubBehavior {
    let mut by_image = BTreeMap::new();
    for img in imgs {
        let mut texts = Vec::new();
        match img.id {
            1 => texts.push(StubText::new([150.0, 150.0, 30.0, 20.0], "13", 0.97)),
            2 => texts.push(StubText::new([80.0, 80.0, 60.0, 20.0], "Carwford", 0.91)),
            _ => {}
        }
        for _ in 0..rng.gen_range(0..=2) {
            let word = WORDS[rng.gen_range(0..WORDS.len())];
            let bbox = if rng.gen_bool(0.6) {
                let owner = img.boxes[rng.gen_range(0..img.boxes.len())].0;
                inner_box(rng, owner)
            } else {
                let b = random_box(rng, img.width, img.height);
                [b[0], b[1], (b[2] / 3.0).floor().max(1.0), (b[3] / 4.0).floor().max(1.0)]
            };
            texts.push(StubText::new(bbox, word, 0.8));
        }
        by_image.insert(img.file_name.clone(), texts);
    }
    StubBehavior::CannedText {
        by_image,
        default: Vec::new(),
    }
}

/// Config for a generated dataset; paths are relative to its directory.
fn config(imgs: &[Image], rng: &mut ChaCha8Rng) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(CAPTIONER, VERIFIER, INTEGRATOR);
    cfg.dataset_name = "synthetic".into();
    cfg.inputs = vec![DatasetInput {
        instances: "instances.json".into(),
        captions: Some("captions.json".into()),
    }];
    cfg.image_root = "images".into();
    cfg.detectors = vec![DETECTOR.into()];
    cfg.ocr = vec![OCR.into()];
    cfg.dry_run = true;
    cfg.fixed_timestamp = Some(1_700_000_000);
    cfg.checkpoint_batch = 16;
    cfg.endpoints = vec![
        EndpointConfig::new(DETECTOR).with_stub(detector_stub(imgs, rng)),
        EndpointConfig::new(OCR).with_stub(ocr_stub(imgs, rng)),
        EndpointConfig::new(CAPTIONER).with_stub(StubBehavior::EchoRegion),
        EndpointConfig::new(VERIFIER).with_stub(StubBehavior::Verifier {
            corrections: BTreeMap::from([("0PEN".to_string(), "OPEN".to_string())]),
        }),
        EndpointConfig::new(INTEGRATOR).with_stub(StubBehavior::ConcatIntegrator),
    ];
    cfg
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("json serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Write `instances.json`, `captions.json` and `config.json` into `dir`.
/// The returned config has its paths resolved.
pub fn generate(dir: &Path, n_images: usize, seed: u64) -> Result<Fixture> {
    if n_images == 0 {
        return Err(Error::Config("fixture needs at least one image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs = images(n_images, &mut rng);
    let instances = dir.join("instances.json");
    let captions = dir.join("captions.json");
    let config_path = dir.join("config.json");
    write_json(&instances, &coco_instances(&imgs))?;
    write_json(&captions, &coco_captions(&imgs, &mut rng))?;
    let cfg = config(&imgs, &mut rng);
    write_json(&config_path, &serde_json::to_value(&cfg).expect("config serializes"))?;
    let config = PipelineConfig::load(&config_path)?;
    Ok(Fixture {
        dir: dir.to_path_buf(),
        instances,
        captions,
        config_path,
        config,
    })
}
