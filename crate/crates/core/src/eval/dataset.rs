//! Dataset files: one JSON record per line.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageDims, PixelBox};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: image {image} not found")]
    MissingImage {
        path: String,
        line: usize,
        image: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub sample_id: String,
    /// Relative paths resolve against the dataset file's directory.
    pub image_path: String,
    pub query: String,
    /// `null` marks a query with no referent in the image.
    pub gt_box: Option<PixelBox>,
    pub split: String,
}

/// A record together with its resolved image location.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecord {
    pub record: DatasetRecord,
    pub image: PathBuf,
    pub line: usize,
}

impl std::ops::Deref for LoadedRecord {
    type Target = DatasetRecord;
    fn deref(&self) -> &DatasetRecord {
        &self.record
    }
}

pub fn resolve_image(dataset_path: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dataset_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Reads and validates every record. The first bad line aborts the load.
pub fn load_dataset(path: &Path) -> Result<Vec<LoadedRecord>, DatasetError> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse = |message: String| DatasetError::Parse {
            path: shown.clone(),
            line,
            message,
        };
        let record: DatasetRecord = serde_json::from_str(raw).map_err(|e| parse(e.to_string()))?;
        if record.sample_id.is_empty() {
            return Err(parse("empty sample_id".into()));
        }
        if record.query.trim().is_empty() {
            return Err(parse("empty query".into()));
        }
        if !seen.insert(record.sample_id.clone()) {
            return Err(parse(format!("duplicate sample_id {}", record.sample_id)));
        }
        let image = resolve_image(path, &record.image_path);
        if !image.is_file() {
            return Err(DatasetError::MissingImage {
                path: shown.clone(),
                line,
                image: record.image_path.clone(),
            });
        }
        if let Some(gt) = &record.gt_box {
            let (w, h) = image::image_dimensions(&image).map_err(|e| parse(e.to_string()))?;
            let dims = ImageDims::new(w, h).map_err(|e| parse(e.to_string()))?;
            if !dims.contains(gt) {
                return Err(parse(format!("gt_box {gt} outside image {dims}")));
            }
        }
        out.push(LoadedRecord { record, image, line });
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Distinct split names in file order.
pub fn splits(records: &[LoadedRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.split) {
            out.push(r.split.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{encode_png, solid_image};

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), encode_png(&solid_image(50, 40, [1, 2, 3])).unwrap()).unwrap();
        dir
    }

    fn rec(id: &str, b: Option<[f64; 4]>) -> DatasetRecord {
        DatasetRecord {
            sample_id: id.into(),
            image_path: "a.png".into(),
            query: "the thing".into(),
            gt_box: b.map(|b| PixelBox::try_from(b).unwrap()),
            split: "val".into(),
        }
    }

    #[test]
    fn three_records_roundtrip() {
        let dir = setup();
        let path = dir.path().join("d.jsonl");
        let recs = vec![rec("1", Some([0., 0., 10., 10.])), rec("2", None), rec("3", Some([5., 5., 50., 40.]))];
        write_dataset(&path, &recs).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.iter().map(|l| l.record.clone()).collect::<Vec<_>>(), recs);
        assert_eq!(loaded[0].image, dir.path().join("a.png"));
    }

    #[test]
    fn bad_box_reports_line() {
        let dir = setup();
        let path = dir.path().join("d.jsonl");
        let good = serde_json::to_string(&rec("1", Some([0., 0., 10., 10.]))).unwrap();
        let bad = r#"{"sample_id":"2","image_path":"a.png","query":"q","gt_box":[9,0,3,5],"split":"val"}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_image_and_out_of_bounds() {
        let dir = setup();
        let path = dir.path().join("d.jsonl");
        let mut r = rec("1", None);
        r.image_path = "nope.png".into();
        write_dataset(&path, &[r]).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetError::MissingImage { line: 1, .. })));
        write_dataset(&path, &[rec("1", Some([0., 0., 60., 10.]))]).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetError::Parse { line: 1, .. })));
    }
}
