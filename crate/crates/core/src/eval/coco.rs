//! Best-effort conversion of COCO-style referring-expression exports.
//!
//! Input is one JSON document with `images` (`id`, `file_name`, `width`,
//! `height`), `annotations` (`id`, `image_id`, `bbox` as `[x, y, w, h]`) and
//! `refs` (`ref_id`, `ann_id`, `image_id`, `split`, `sentences[].sent`).
//! Every sentence becomes one dataset record.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::dataset::DatasetRecord;
use super::EvalError;
use crate::geometry::{ImageDims, PixelBox};

#[derive(Deserialize)]
struct Export {
    images: Vec<Image>,
    annotations: Vec<Annotation>,
    refs: Vec<Ref>,
}

#[derive(Deserialize)]
struct Image {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct Annotation {
    id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct Ref {
    ref_id: u64,
    ann_id: u64,
    image_id: u64,
    #[serde(default)]
    split: String,
    sentences: Vec<Sentence>,
}

#[derive(Deserialize)]
struct Sentence {
    sent: String,
}

/// Converts an export; references to unknown images or annotations and
/// degenerate boxes are skipped with a warning. `image_dir` is prefixed to
/// every file name.
pub fn convert_coco_refs(json: &str, image_dir: &str) -> Result<Vec<DatasetRecord>, EvalError> {
    let export: Export = serde_json::from_str(json).map_err(|e| EvalError::Invalid(format!("coco export: {e}")))?;
    let images: HashMap<u64, &Image> = export.images.iter().map(|i| (i.id, i)).collect();
    let anns: HashMap<u64, &Annotation> = export.annotations.iter().map(|a| (a.id, a)).collect();
    let mut out = Vec::new();
    for r in &export.refs {
        let (Some(img), Some(ann)) = (images.get(&r.image_id), anns.get(&r.ann_id)) else {
            log::warn!("ref {} points at a missing image or annotation", r.ref_id);
            continue;
        };
        let [x, y, w, h] = ann.bbox;
        let Ok(dims) = ImageDims::new(img.width, img.height) else {
            log::warn!("ref {}: image {} has zero size", r.ref_id, img.id);
            continue;
        };
        let Some(gt) = PixelBox::clamped(x, y, x + w, y + h, dims) else {
            log::warn!("ref {}: degenerate box {:?}", r.ref_id, ann.bbox);
            continue;
        };
        let image_path = if image_dir.is_empty() {
            img.file_name.clone()
        } else {
            Path::new(image_dir).join(&img.file_name).display().to_string()
        };
        for (k, s) in r.sentences.iter().enumerate() {
            let query = s.sent.trim();
            if query.is_empty() {
                continue;
            }
            out.push(DatasetRecord {
                sample_id: format!("{}-{k}", r.ref_id),
                image_path: image_path.clone(),
                query: query.to_string(),
                gt_box: Some(gt),
                split: if r.split.is_empty() { "all".into() } else { r.split.clone() },
            });
        }
    }
    Ok(out)
}
