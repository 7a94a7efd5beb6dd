//! Synthetic scenes: manifests, a seeded generator, rasterization, and the
//! lookup registry the oracle backends answer from.
//!
//! Scenes are flat-color rectangles on a plain background. Every object in a
//! generated set gets its own exact RGB shade (a small per-object offset from
//! its named color), so a region's interior pixels identify the object even
//! after the visual prompt blurs everything around it.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::dataset::DatasetRecord;
use crate::geometry::{area_fraction, iou, ImageDims, PixelBox, DEFAULT_MIN_AREA_FRACTION};
use crate::imaging::{encode_png, pixel_digest};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene {scene}: {message}")]
    Invalid { scene: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub color_name: String,
    pub rgb: [u8; 3],
    pub attribute_sentence: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    /// Score the oracle detector compares against the pass-through threshold.
    #[serde(default = "one")]
    pub detector_confidence: f64,
}

impl SceneObject {
    /// Whether `term` names this object (label or synonym, plural-tolerant).
    pub fn answers_to(&self, term: &str) -> bool {
        let names = || std::iter::once(&self.label).chain(self.synonyms.iter());
        names().any(|n| n == term)
            || term
                .strip_suffix('s')
                .is_some_and(|singular| names().any(|n| n == singular))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneQuery {
    pub text: String,
    /// Object id of the referent; `None` for a query with no target.
    pub target: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    /// Objects below the minimum candidate area.
    #[serde(default)]
    pub small_object_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub dims: ImageDims,
    pub background: [u8; 3],
    pub global_caption: String,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub queries: Vec<SceneQuery>,
    #[serde(default)]
    pub metadata: SceneMetadata,
}

impl SceneManifest {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |message: String| SceneError::Invalid {
            scene: self.scene_id.clone(),
            message,
        };
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id.as_str()) {
                return Err(bad(format!("duplicate object id {}", o.id)));
            }
            if !self.dims.contains(&o.bbox) {
                return Err(bad(format!("object {} box {} exceeds {}", o.id, o.bbox, self.dims)));
            }
            if o.label.trim().is_empty() || o.label != o.label.trim().to_lowercase() {
                return Err(bad(format!("object {} label must be lowercase and trimmed", o.id)));
            }
        }
        for q in &self.queries {
            if let Some(t) = &q.target {
                if !ids.contains(t.as_str()) {
                    return Err(bad(format!("query {:?} targets unknown object {t}", q.text)));
                }
            }
        }
        for id in &self.metadata.small_object_ids {
            if !ids.contains(id.as_str()) {
                return Err(bad(format!("metadata names unknown object {id}")));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Object with the highest IoU against `bbox`, if it reaches `min_iou`.
    pub fn best_match(&self, bbox: &PixelBox, min_iou: f64) -> Option<&SceneObject> {
        self.objects
            .iter()
            .map(|o| (o, iou(&o.bbox, bbox)))
            .filter(|(_, v)| *v >= min_iou)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(o, _)| o)
    }

    /// Ids of objects whose area fraction is below `min_fraction`.
    pub fn small_objects(&self, min_fraction: f64) -> Vec<String> {
        self.objects
            .iter()
            .filter(|o| o.bbox.area() / self.dims.area() < min_fraction)
            .map(|o| o.id.clone())
            .collect()
    }

    /// Paints the background and every object rectangle, in order.
    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(
            self.dims.width(),
            self.dims.height(),
            Rgb(self.background),
        );
        for o in &self.objects {
            let (x0, y0, x1, y1) = pixel_span(&o.bbox, self.dims);
            for y in y0..y1 {
                for x in x0..x1 {
                    img.put_pixel(x, y, Rgb(o.rgb));
                }
            }
        }
        img
    }
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)` covered by a box.
pub fn pixel_span(b: &PixelBox, dims: ImageDims) -> (u32, u32, u32, u32) {
    let x0 = b.x_min().floor().max(0.0) as u32;
    let y0 = b.y_min().floor().max(0.0) as u32;
    let x1 = (b.x_max().ceil() as u32).min(dims.width());
    let y1 = (b.y_max().ceil() as u32).min(dims.height());
    (x0, y0, x1, y1)
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let m: SceneManifest = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    m.validate()?;
    Ok(m)
}

/// Loads every `*.json` manifest under `dir`, sorted by file name.
pub fn read_manifest_dir(dir: &Path) -> Result<Vec<SceneManifest>, SceneError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_manifest(p)).collect()
}

// ---------------------------------------------------------------------------
// generator

/// Object categories with their synonyms. Synonyms never collide across
/// categories or with color names.
pub const CATEGORIES: &[(&str, &[&str])] = &[
    ("chair", &["seat"]),
    ("table", &["desk"]),
    ("lamp", &["light"]),
    ("vase", &["jar"]),
    ("box", &["crate"]),
    ("ball", &["sphere"]),
    ("book", &["notebook"]),
    ("sofa", &["couch"]),
];

pub const PALETTE: &[(&str, [u8; 3])] = &[
    ("white", [236, 236, 236]),
    ("black", [26, 26, 26]),
    ("red", [198, 36, 36]),
    ("green", [40, 150, 52]),
    ("blue", [36, 72, 200]),
    ("yellow", [228, 204, 42]),
    ("orange", [234, 134, 30]),
    ("purple", [124, 46, 160]),
    ("brown", [124, 80, 40]),
    ("pink", [234, 140, 186]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub seed: u64,
    pub n_scenes: usize,
    pub width: u32,
    pub height: u32,
    /// Fraction of scenes whose query target is below the minimum candidate
    /// area. Exactly `round(fraction * n_scenes)` scenes get one.
    pub small_target_fraction: f64,
    /// Chance that a scene also carries a small distractor object.
    pub small_distractor_prob: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 10,
            width: 256,
            height: 192,
            small_target_fraction: 0.0,
            small_distractor_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub manifest: SceneManifest,
    pub image: RgbImage,
}

/// Distinct exact shades per named color, handed out in a fixed order.
struct ShadeBook {
    used: HashMap<usize, u32>,
}

impl ShadeBook {
    const SPAN: i32 = 13; // offsets in [-6, 6] per channel

    fn next(&mut self, color: usize) -> [u8; 3] {
        let k = self.used.entry(color).or_insert(0);
        let n = *k as i32;
        *k += 1;
        let span = Self::SPAN;
        let off = [
            n % span - span / 2,
            (n / span) % span - span / 2,
            (n / (span * span)) % span - span / 2,
        ];
        let base = PALETTE[color].1;
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (i32::from(base[c]) + off[c]).clamp(0, 255) as u8;
        }
        out
    }
}

pub fn attribute_sentence(color: &str, label: &str) -> String {
    format!("a {color} {label}")
}

fn caption_for(objects: &[SceneObject]) -> String {
    let parts: Vec<&str> = objects.iter().map(|o| o.attribute_sentence.as_str()).collect();
    let listed = match parts.as_slice() {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    format!(
        "A plain backdrop with {} flat-colored objects: {listed}.",
        objects.len()
    )
}

/// Deterministically generates `opts.n_scenes` scenes.
pub fn generate_scenes(opts: &GenOptions) -> Vec<GeneratedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dims = ImageDims::new(opts.width, opts.height).expect("positive scene size");
    let n_small = (opts.small_target_fraction * opts.n_scenes as f64).round() as usize;
    let mut order: Vec<usize> = (0..opts.n_scenes).collect();
    order.shuffle(&mut rng);
    let small_target: BTreeSet<usize> = order.into_iter().take(n_small).collect();
    let mut shades = ShadeBook {
        used: HashMap::new(),
    };

    (0..opts.n_scenes)
        .map(|i| {
            let manifest = generate_one(
                &mut rng,
                &mut shades,
                format!("scene-{i:04}"),
                dims,
                small_target.contains(&i),
                opts.small_distractor_prob,
            );
            let image = manifest.render();
            GeneratedScene { manifest, image }
        })
        .collect()
}

fn generate_one(
    rng: &mut ChaCha8Rng,
    shades: &mut ShadeBook,
    scene_id: String,
    dims: ImageDims,
    small_target: bool,
    small_distractor_prob: f64,
) -> SceneManifest {
    let image_area = dims.area();
    let background = [
        172 + rng.random_range(0..12u8),
        182 + rng.random_range(0..12u8),
        192 + rng.random_range(0..12u8),
    ];

    // (category, color, small)
    let mut specs: Vec<(usize, usize, bool)> = Vec::new();
    let target_cat = rng.random_range(0..CATEGORIES.len());
    let target_color = rng.random_range(0..PALETTE.len());
    specs.push((target_cat, target_color, small_target));

    let n_distractors = rng.random_range(1..=4);
    for _ in 0..n_distractors {
        // Half the distractors share the target's category, which forces the
        // selector to discriminate on color.
        for _ in 0..20 {
            let cat = if rng.random_bool(0.5) {
                target_cat
            } else {
                rng.random_range(0..CATEGORIES.len())
            };
            let color = rng.random_range(0..PALETTE.len());
            if !specs.iter().any(|&(c, k, _)| c == cat && k == color) {
                specs.push((cat, color, false));
                break;
            }
        }
    }
    if rng.random_bool(small_distractor_prob) {
        for _ in 0..20 {
            let cat = rng.random_range(0..CATEGORIES.len());
            let color = rng.random_range(0..PALETTE.len());
            if !specs.iter().any(|&(c, k, _)| c == cat && k == color) {
                specs.push((cat, color, true));
                break;
            }
        }
    }

    let mut placed: Vec<PixelBox> = Vec::new();
    let mut objects = Vec::new();
    for (idx, &(cat, color, small)) in specs.iter().enumerate() {
        let (lo, hi) = if small { (0.010, 0.022) } else { (0.035, 0.09) };
        let Some(bbox) = place_box(rng, dims, &placed, lo * image_area, hi * image_area) else {
            if idx == 0 {
                unreachable!("the first object always fits an empty canvas");
            }
            continue;
        };
        placed.push(bbox);
        let (label, syns) = CATEGORIES[cat];
        let color_name = PALETTE[color].0;
        objects.push(SceneObject {
            id: format!("o{idx}"),
            label: label.to_string(),
            synonyms: syns.iter().map(|s| s.to_string()).collect(),
            color_name: color_name.to_string(),
            rgb: shades.next(color),
            attribute_sentence: attribute_sentence(color_name, label),
            bbox,
            // Targets are always found; distractors fade in as the detector
            // threshold drops.
            detector_confidence: if idx == 0 {
                1.0
            } else {
                (rng.random_range(20..=100) as f64) / 100.0
            },
        });
    }

    let (label, _) = CATEGORIES[target_cat];
    let target_query = format!("the {} {label}", PALETTE[target_color].0);
    let used: BTreeSet<usize> = specs
        .iter()
        .filter(|s| s.0 == target_cat)
        .map(|s| s.1)
        .collect();
    let free: Vec<usize> = (0..PALETTE.len()).filter(|c| !used.contains(c)).collect();
    let absent = free[rng.random_range(0..free.len())];
    let no_target_query = format!("the {} {label}", PALETTE[absent].0);

    let mut manifest = SceneManifest {
        scene_id,
        dims,
        background,
        global_caption: caption_for(&objects),
        objects,
        queries: vec![
            SceneQuery {
                text: target_query,
                target: Some("o0".into()),
            },
            SceneQuery {
                text: no_target_query,
                target: None,
            },
        ],
        metadata: SceneMetadata::default(),
    };
    manifest.metadata.small_object_ids = manifest.small_objects(DEFAULT_MIN_AREA_FRACTION);
    manifest
}

/// Samples an integer-aligned box with area in `[min_area, max_area]` that
/// keeps a 2 px gap from every placed box.
fn place_box(
    rng: &mut ChaCha8Rng,
    dims: ImageDims,
    placed: &[PixelBox],
    min_area: f64,
    max_area: f64,
) -> Option<PixelBox> {
    let (w_img, h_img) = (dims.width() as f64, dims.height() as f64);
    for _ in 0..400 {
        let area = rng.random_range(min_area..=max_area);
        let aspect: f64 = rng.random_range(0.6..1.7);
        let w = (area * aspect).sqrt().round().clamp(4.0, w_img - 2.0);
        let h = (area / w).round().clamp(4.0, h_img - 2.0);
        if w * h < min_area || w * h > max_area {
            continue;
        }
        let x = rng.random_range(0..=(w_img - w) as u32) as f64;
        let y = rng.random_range(0..=(h_img - h) as u32) as f64;
        let b = PixelBox::new(x, y, x + w, y + h).ok()?;
        let clear = placed.iter().all(|p| {
            b.x_max() + 2.0 <= p.x_min()
                || p.x_max() + 2.0 <= b.x_min()
                || b.y_max() + 2.0 <= p.y_min()
                || p.y_max() + 2.0 <= b.y_min()
        });
        if clear {
            return Some(b);
        }
    }
    None
}

/// Files written by [`write_scene_set`], relative to its output directory.
pub const SCENES_SUBDIR: &str = "scenes";
pub const IMAGES_SUBDIR: &str = "images";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const NO_TARGET_DATASET_FILE: &str = "dataset_no_target.jsonl";
pub const SYNTHETIC_SPLIT: &str = "synthetic";

/// Writes manifests, PNG rasters, and two dataset files (target queries and
/// no-target queries) under `out_dir`.
pub fn write_scene_set(out_dir: &Path, scenes: &[GeneratedScene]) -> Result<(), SceneError> {
    let scenes_dir = out_dir.join(SCENES_SUBDIR);
    let images_dir = out_dir.join(IMAGES_SUBDIR);
    for d in [&scenes_dir, &images_dir] {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut with_target = Vec::new();
    let mut without_target = Vec::new();
    for s in scenes {
        let m = &s.manifest;
        let manifest_path = scenes_dir.join(format!("{}.json", m.scene_id));
        let mut text = serde_json::to_string_pretty(m).map_err(|e| io_err(&manifest_path, e))?;
        text.push('\n');
        fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;

        let rel_image = format!("{IMAGES_SUBDIR}/{}.png", m.scene_id);
        let image_path = out_dir.join(&rel_image);
        let png = encode_png(&s.image).map_err(|e| io_err(&image_path, e))?;
        fs::write(&image_path, png).map_err(|e| io_err(&image_path, e))?;

        for (qi, q) in m.queries.iter().enumerate() {
            let gt_box = q.target.as_ref().and_then(|t| m.object(t)).map(|o| o.bbox);
            let record = DatasetRecord {
                sample_id: format!("{}-q{qi}", m.scene_id),
                image_path: rel_image.clone(),
                query: q.text.clone(),
                gt_box,
                split: SYNTHETIC_SPLIT.to_string(),
            };
            if gt_box.is_some() {
                with_target.push(record);
            } else {
                without_target.push(record);
            }
        }
    }
    write_jsonl(&out_dir.join(DATASET_FILE), &with_target)?;
    write_jsonl(&out_dir.join(NO_TARGET_DATASET_FILE), &without_target)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SceneError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// registry

/// Index over a set of scenes for the oracle backends.
#[derive(Debug, Default)]
pub struct SceneRegistry {
    scenes: Vec<SceneManifest>,
    by_pixels: HashMap<String, usize>,
    by_shade: HashMap<(ImageDims, [u8; 3]), Vec<(usize, usize)>>,
    /// label or synonym -> canonical label
    vocabulary: HashMap<String, String>,
    synonyms: HashMap<String, Vec<String>>,
}

impl SceneRegistry {
    pub fn new(scenes: Vec<SceneManifest>) -> Self {
        let mut reg = SceneRegistry::default();
        for (si, m) in scenes.iter().enumerate() {
            reg.by_pixels.insert(pixel_digest(&m.render()), si);
            for (oi, o) in m.objects.iter().enumerate() {
                reg.by_shade.entry((m.dims, o.rgb)).or_default().push((si, oi));
                reg.vocabulary
                    .entry(o.label.clone())
                    .or_insert_with(|| o.label.clone());
                for s in &o.synonyms {
                    reg.vocabulary.entry(s.clone()).or_insert_with(|| o.label.clone());
                }
                let syns = reg.synonyms.entry(o.label.clone()).or_default();
                for s in &o.synonyms {
                    if !syns.contains(s) {
                        syns.push(s.clone());
                    }
                }
            }
        }
        reg.scenes = scenes;
        reg
    }

    pub fn from_dir(dir: &Path) -> Result<Self, SceneError> {
        Ok(Self::new(read_manifest_dir(dir)?))
    }

    pub fn scenes(&self) -> &[SceneManifest] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Scene whose rendered raster equals `img` exactly.
    pub fn by_image(&self, img: &RgbImage) -> Option<&SceneManifest> {
        self.by_pixels.get(&pixel_digest(img)).map(|&i| &self.scenes[i])
    }

    /// Canonical label for a label, synonym, or simple plural.
    pub fn canonical_label(&self, term: &str) -> Option<&str> {
        self.vocabulary
            .get(term)
            .or_else(|| term.strip_suffix('s').and_then(|t| self.vocabulary.get(t)))
            .map(String::as_str)
    }

    pub fn synonyms_of(&self, label: &str) -> &[String] {
        self.synonyms.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Identifies the (scene, object) shown inside `approx` on an image whose
    /// interior pixels are untouched. Uses the dominant interior color and
    /// requires IoU >= 0.5 between the object and `approx`.
    pub fn locate_region(
        &self,
        img: &RgbImage,
        approx: &PixelBox,
    ) -> Result<(&SceneManifest, &SceneObject), String> {
        let dims = ImageDims::new(img.width(), img.height()).map_err(|e| e.to_string())?;
        let shade = dominant_interior_color(img, approx, dims)
            .ok_or_else(|| format!("empty region {approx}"))?;
        let hits = self.by_shade.get(&(dims, shade)).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(f64, usize, usize)> = None;
        let mut tied = false;
        for &(si, oi) in hits {
            let v = iou(&self.scenes[si].objects[oi].bbox, approx);
            if v < 0.5 {
                continue;
            }
            match best {
                Some((b, _, _)) if v < b => {}
                Some((b, _, _)) if v == b => tied = true,
                _ => {
                    best = Some((v, si, oi));
                    tied = false;
                }
            }
        }
        match best {
            None => Err(format!("no manifest object matches region {approx}")),
            Some(_) if tied => Err(format!("region {approx} matches several scenes")),
            Some((_, si, oi)) => Ok((&self.scenes[si], &self.scenes[si].objects[oi])),
        }
    }
}

fn dominant_interior_color(img: &RgbImage, b: &PixelBox, dims: ImageDims) -> Option<[u8; 3]> {
    let (x0, y0, x1, y1) = pixel_span(b, dims);
    // stay clear of the rounding band at the edges
    let inset = |lo: u32, hi: u32| {
        let m = ((hi - lo) / 8).min(3);
        (lo + m, hi - m)
    };
    let (x0, x1) = inset(x0, x1);
    let (y0, y1) = inset(y0, y1);
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for y in y0..y1 {
        for x in x0..x1 {
            *counts.entry(img.get_pixel(x, y).0).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
}

/// Whether every object box is at least `min_fraction` of the image.
pub fn all_major(m: &SceneManifest, min_fraction: f64) -> bool {
    m.objects
        .iter()
        .all(|o| area_fraction(&o.bbox, m.dims).is_ok_and(|f| f >= min_fraction))
}
