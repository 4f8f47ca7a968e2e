mod common;

use common::*;
use fullanno::enrich::{apply_matches, build_bundle, build_integration_prompt, build_region_prompt, crop_with_context, match_ocr_to_objects};
use fullanno::geometry::contains;
use fullanno::model::{canonical_serialize, parse_record, validate, BBox, EnrichedImageAnnotation, Rule, SimpleCaption};
use fullanno::tokenizer::WhitespaceTokenizer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record_from(seed: u64) -> EnrichedImageAnnotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (objects, ocr) = random_layout(&mut rng);
    let mut rec = EnrichedImageAnnotation::new(9, "r.jpg", 60, 60);
    rec.objects = objects;
    rec.ocr = ocr;
    for (i, obj) in rec.objects.iter_mut().enumerate() {
        if i % 2 == 0 {
            obj.region_description = Some(format!("region  number {i}\nwith a line break"));
            obj.region_token_length = Some(6);
        }
    }
    for (i, e) in rec.ocr.iter_mut().enumerate() {
        e.text = format!("T\"{i}\"");
        if i % 2 == 1 {
            e.verified = true;
            e.corrected_text = Some(format!("fixed {i}"));
        }
    }
    rec.simple_captions = ["a b", "c d e", "f"].iter().map(|c| SimpleCaption::new(*c, &WhitespaceTokenizer)).collect();
    let matches = match_ocr_to_objects(&rec.ocr, &rec.objects);
    apply_matches(&mut rec, &matches);
    rec.provenance.stage1 = true;
    rec.provenance.stage2 = true;
    rec
}

fn shuffle<T>(v: &mut [T], seed: u64) {
    let mut state = seed | 1;
    for i in (1..v.len()).rev() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        v.swap(i, state as usize % (i + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matching_agrees_with_exhaustive_scan(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (objects, ocr) = random_layout(&mut rng);
        let matches = match_ocr_to_objects(&ocr, &objects);
        prop_assert_eq!(matches.len(), ocr.len());
        for (m, entry) in matches.iter().zip(&ocr) {
            prop_assert_eq!(m.ocr_id, entry.ocr_id);
            prop_assert_eq!(m.matched_object_id, oracle_match(entry, &objects));
            let candidates = objects.iter().filter(|o| contains(&o.bbox, &entry.bbox)).count();
            prop_assert_eq!(m.candidate_count, candidates);
        }
    }

    #[test]
    fn applied_matches_are_consistent(seed in any::<u64>()) {
        let rec = record_from(seed);
        prop_assert!(validate(&rec).is_empty(), "{:?}", validate(&rec));
        for e in &rec.ocr {
            if let Some(oid) = e.matched_object_id {
                prop_assert!(rec.object(oid).unwrap().matched_ocr_ids.contains(&e.ocr_id));
            }
        }
    }

    #[test]
    fn crop_contains_box_and_stays_in_frame(
        w in 1u32..2000, h in 1u32..2000,
        fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.0001..1.0f64, fh in 0.0001..1.0f64,
        ratio in 0.0..3.0f64,
    ) {
        let (wf, hf) = (w as f64, h as f64);
        let x = fx * wf;
        let y = fy * hf;
        let b = BBox::new(x, y, (fw * (wf - x)).max(1e-6), (fh * (hf - y)).max(1e-6));
        prop_assume!(b.x + b.w <= wf && b.y + b.h <= hf);
        let c = crop_with_context((w, h), &b, ratio).unwrap();
        prop_assert!(contains(&c, &b), "{:?} !⊇ {:?}", c, b);
        prop_assert!(c.x >= 0.0 && c.y >= 0.0 && c.x + c.w <= wf && c.y + c.h <= hf);
    }

    #[test]
    fn integration_prompt_ignores_input_order(seed in any::<u64>(), perm in any::<u64>()) {
        let rec = record_from(seed);
        let bundle = build_bundle(&rec, 2).unwrap();
        let mut shuffled = bundle.clone();
        shuffle(&mut shuffled.objects, perm);
        shuffle(&mut shuffled.ocr_items, perm.rotate_left(7));
        shuffle(&mut shuffled.sampled_simple_captions, perm.rotate_left(19));
        let a = build_integration_prompt(&bundle).unwrap();
        let b = build_integration_prompt(&shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn serialize_round_trips(seed in any::<u64>()) {
        let mut rec = record_from(seed);
        let bytes = canonical_serialize(&rec).unwrap();
        rec.canonicalize();
        prop_assert_eq!(canonical_serialize(&rec).unwrap(), bytes.clone());
        let back = parse_record(&bytes).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(canonical_serialize(&back).unwrap(), bytes);
    }

    #[test]
    fn dangling_link_is_always_reported(seed in any::<u64>()) {
        let mut rec = record_from(seed);
        prop_assume!(!rec.ocr.is_empty());
        rec.ocr[0].matched_object_id = Some(u64::MAX);
        let v = validate(&rec);
        prop_assert!(v.iter().any(|v| v.rule == Rule::DanglingReference));
    }
}

#[test]
fn region_prompt_golden() {
    assert_eq!(
        build_region_prompt("dog").unwrap(),
        "You glimpsed the image and saw a dog. Please describe the image in a few sentences: "
    );
    assert_eq!(
        build_region_prompt("traffic light").unwrap(),
        "You glimpsed the image and saw a traffic light. Please describe the image in a few sentences: "
    );
}

#[test]
fn crop_examples() {
    assert_eq!(
        crop_with_context((100, 100), &BBox::new(0.0, 0.0, 10.0, 10.0), 0.2).unwrap(),
        BBox::new(0.0, 0.0, 12.0, 12.0)
    );
    assert_eq!(
        crop_with_context((100, 100), &BBox::new(40.0, 40.0, 20.0, 20.0), 0.2).unwrap(),
        BBox::new(36.0, 36.0, 28.0, 28.0)
    );
}

#[test]
fn ocr_text_reaches_the_prompt() {
    let mut rec = record_from(3);
    rec.ocr.clear();
    rec.ocr.push(ocr_entry(1, BBox::new(0.0, 0.0, 1.0, 1.0), "Carwford"));
    for o in &mut rec.objects {
        o.matched_ocr_ids.clear();
    }
    let msg = build_integration_prompt(&build_bundle(&rec, 2).unwrap()).unwrap();
    let section = msg.content.split("Text in image (OCR):\n").nth(1).unwrap();
    assert!(section.lines().next().unwrap().contains("\"Carwford\""));
}
