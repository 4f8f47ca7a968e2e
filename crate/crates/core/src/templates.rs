//! Prompt templates shipped with the engine (see `templates/`).
//!
//! Every generated caption records [`template_version`], and the response
//! cache keys on it, so editing a template invalidates cached answers.

use std::sync::OnceLock;

use crate::model::sha256_hex;

/// Bumped by hand when template semantics change.
pub const TEMPLATE_REVISION: &str = "1";

pub const REGION_DESCRIPTION: &str = include_str!("../templates/region_description.txt");
pub const OCR_VERIFICATION: &str = include_str!("../templates/ocr_verification.txt");
pub const INTEGRATION_SYSTEM: &str = include_str!("../templates/integration_system.txt");
pub const DETECTION: &str = include_str!("../templates/detection.txt");
pub const OCR: &str = include_str!("../templates/ocr.txt");

/// Revision plus a digest of all template files, e.g. `1+3fa9c2d1`.
pub fn template_version() -> &'static str {
    static VERSION: OnceLock<String> = OnceLock::new();
    VERSION.get_or_init(|| {
        let all = [REGION_DESCRIPTION, OCR_VERIFICATION, INTEGRATION_SYSTEM, DETECTION, OCR].join("\u{0}");
        format!("{TEMPLATE_REVISION}+{}", &sha256_hex(all.as_bytes())[..8])
    })
}

/// Template text without the file's trailing newline.
pub fn body(template: &str) -> &str {
    template.strip_suffix('\n').unwrap_or(template)
}
