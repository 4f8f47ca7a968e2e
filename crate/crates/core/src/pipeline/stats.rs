use std::fmt::Write as _;

use crate::ingest::DatasetHandle;
use crate::model::StatsReport;
use crate::tokenizer::Tokenizer;

/// Summarize a dataset. Token lengths are recounted with `tokenizer` so the
/// averages are comparable across datasets counted with the same one.
pub fn compute_stats(handle: &DatasetHandle, tokenizer: &dyn Tokenizer) -> StatsReport {
    let mut report = StatsReport {
        dataset: handle.name.clone(),
        tokenizer_id: tokenizer.id(),
        num_images: handle.images.len() as u64,
        num_boxes: 0,
        num_ocr_entries: 0,
        num_simple_captions: 0,
        num_dense_captions: 0,
        num_region_descriptions: 0,
        atl_dense: 0.0,
        atl_dense_empty: true,
        atl_region: 0.0,
        atl_region_empty: true,
    };
    let mut dense_tokens = 0u64;
    let mut region_tokens = 0u64;
    for rec in &handle.images {
        report.num_boxes += rec.objects.len() as u64;
        report.num_ocr_entries += rec.ocr.len() as u64;
        report.num_simple_captions += rec.simple_captions.len() as u64;
        if let Some(d) = &rec.dense_caption {
            report.num_dense_captions += 1;
            dense_tokens += tokenizer.count(&d.text) as u64;
        }
        for obj in &rec.objects {
            if let Some(desc) = &obj.region_description {
                report.num_region_descriptions += 1;
                region_tokens += tokenizer.count(desc) as u64;
            }
        }
    }
    if report.num_dense_captions > 0 {
        report.atl_dense = dense_tokens as f64 / report.num_dense_captions as f64;
        report.atl_dense_empty = false;
    }
    if report.num_region_descriptions > 0 {
        report.atl_region = region_tokens as f64 / report.num_region_descriptions as f64;
        report.atl_region_empty = false;
    }
    report
}

const HEADERS: [&str; 10] = [
    "Dataset",
    "Simple Cap",
    "Dense Cap",
    "Region Cap",
    "OCR",
    "# Images",
    "# Boxes",
    "ATL for Dense Cap",
    "ATL for Region Cap",
    "# OCR",
];

fn mark(present: bool) -> String {
    if present { "✓" } else { "✗" }.to_string()
}

fn atl(value: f64, empty: bool) -> String {
    if empty {
        "-".to_string()
    } else {
        format!("{value:.2}")
    }
}

/// Render reports as a pipe-separated table, one row per dataset.
pub fn render_table(reports: &[StatsReport]) -> String {
    let rows: Vec<[String; 10]> = reports
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                mark(r.num_simple_captions > 0),
                mark(r.num_dense_captions > 0),
                mark(r.num_region_descriptions > 0),
                mark(r.num_ocr_entries > 0),
                r.num_images.to_string(),
                r.num_boxes.to_string(),
                atl(r.atl_dense, r.atl_dense_empty),
                atl(r.atl_region, r.atl_region_empty),
                r.num_ocr_entries.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = HEADERS.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        let parts: Vec<String> = cells
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join(" | ").trim_end().to_string()
    };
    let mut out = String::new();
    writeln!(out, "{}", line(&mut HEADERS.iter().copied())).unwrap();
    let sep: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    writeln!(out, "{}", sep.join("-|-")).unwrap();
    for row in &rows {
        writeln!(out, "{}", line(&mut row.iter().map(String::as_str))).unwrap();
    }
    if let Some(r) = reports.first() {
        writeln!(out, "tokenizer: {}", r.tokenizer_id).unwrap();
    }
    out
}
