//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion, each against
//! its own time budget. Exits non-zero if any criterion fails.

#[path = "../../core/tests/common/prompt_cases.rs"]
mod prompt_cases;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use refground::gateway::oracle::{OracleChat, OracleConfig, OracleDetector};
use refground::gateway::{ChatBackend, GatewayError};
use refground::geometry::{denormalize, iou, nms, normalize, ImageDims, PixelBox};
use refground::pipeline::{parse_reasoning_trace, Answer, ParseQuality, Tier, DEFAULT_REJECTION_TOKENS};
use refground::prompt::{apply_visual_prompt, VisualPromptSpec};
use refground::scene::pixel_span;
use refground::{
    ChatRequest, Gateway, GroundingAgent, ImagePayload, PipelineConfig, PromptTemplates, RoleKind, SceneManifest,
    SceneRegistry,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 11] = [
        ("geometry oracle equivalence", 10, geometry_oracle),
        ("normalization contract", 2, normalization_contract),
        ("prompt byte-exactness", 1, prompt_bytes),
        ("visual prompt pixel contract", 5, visual_prompt_pixels),
        ("end-to-end oracle pipeline", 60, oracle_pipeline),
        ("ablation ordering", 90, ablation_ordering),
        ("refinement constants", 5, refinement_constants),
        ("rejection path", 10, rejection_path),
        ("trace parser corpus", 1, trace_corpus),
        ("replay determinism", 10, replay_determinism),
        ("recall-curve structure", 30, recall_structure),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let budget = Duration::from_secs(*limit);
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; but took longer than {limit} s")),
            other => other,
        };
        let secs = elapsed.as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {:>2}. {name} ({secs:.2} s, limit {limit} s): {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name} ({secs:.2} s, limit {limit} s): {reason}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// helpers

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refground"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn refground")
}

fn cli_ok(args: &[&str]) -> Result<String, String> {
    let out = cli(args);
    if !out.status.success() {
        return Err(format!(
            "`refground {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn gen_scenes(dir: &Path, seed: u64, n: usize, extra: &[&str]) -> Result<(), String> {
    let seed = seed.to_string();
    let n = n.to_string();
    let mut args = vec!["gen-scenes", "--seed", &seed, "--n", &n, "--out", path_str(dir)];
    args.extend_from_slice(extra);
    cli_ok(&args).map(|_| ())
}

/// `accuracy=… recall=… rejection=…` as three numbers.
fn summary_line(stdout: &str) -> Result<[f64; 3], String> {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("accuracy="))
        .ok_or_else(|| format!("no summary line in {stdout:?}"))?;
    let mut out = [0.0; 3];
    for (slot, (part, key)) in out.iter_mut().zip(line.split_whitespace().zip(["accuracy", "recall", "rejection"])) {
        let value = part
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| format!("malformed summary {line:?}"))?;
        *slot = value.parse().map_err(|e| format!("{value:?}: {e}"))?;
    }
    Ok(out)
}

/// Summary object and outcome objects of a JSON-lines report.
fn read_report(path: &Path) -> Result<(Value, Vec<Value>), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = text.lines().map(|l| serde_json::from_str::<Value>(l).map_err(|e| e.to_string()));
    let summary = rows.next().ok_or("empty report")??;
    ensure!(summary["kind"] == "summary", "first report line is not the summary");
    let outcomes = rows.collect::<Result<Vec<_>, _>>()?;
    Ok((summary, outcomes))
}

fn box_of(v: &Value) -> Option<[f64; 4]> {
    let a = v.as_array()?;
    Some([a[0].as_f64()?, a[1].as_f64()?, a[2].as_f64()?, a[3].as_f64()?])
}

/// Reference IoU written out from first principles.
fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Independently recounts hits, recall hits and rejections from the
/// per-sample rows and checks them against the summary.
fn recount(summary: &Value, outcomes: &[Value]) -> Result<(), String> {
    let n = outcomes.len();
    let mut hits = 0;
    let mut recall_hits = 0;
    let mut rejected = 0;
    for o in outcomes {
        let is_rejected = o["rejected"].as_bool().ok_or("rejected flag missing")?;
        if is_rejected {
            rejected += 1;
        }
        if let (Some(p), Some(g)) = (box_of(&o["predicted_box"]), box_of(&o["gt_box"])) {
            if !is_rejected && ref_iou(p, g) > 0.5 {
                hits += 1;
            }
        }
        if o["generation_recall_hit"] == true {
            recall_hits += 1;
        }
    }
    let expect = |key: &str, v: usize| -> Result<(), String> {
        ensure!(summary[key].as_u64() == Some(v as u64), "{key}: report {} vs recount {v}", summary[key]);
        Ok(())
    };
    expect("n_samples", n)?;
    expect("n_hits", hits)?;
    expect("n_recall_hits", recall_hits)?;
    expect("n_rejected", rejected)?;
    let ratio = |k: usize| k as f64 / n as f64;
    for (key, v) in [("accuracy", hits), ("generation_recall", recall_hits), ("rejection_rate", rejected)] {
        ensure!(summary[key].as_f64() == Some(ratio(v)), "{key}: report {} vs recount {}", summary[key], ratio(v));
    }
    Ok(())
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

// ---------------------------------------------------------------------------
// 1

fn random_box(rng: &mut ChaCha8Rng, grid: bool) -> PixelBox {
    if grid {
        // Integer coordinates on a coarse grid produce exact ties and duplicates.
        let x = rng.random_range(0..20) as f64 * 5.0;
        let y = rng.random_range(0..20) as f64 * 5.0;
        let w = rng.random_range(1..8) as f64 * 5.0;
        let h = rng.random_range(1..8) as f64 * 5.0;
        PixelBox::new(x, y, x + w, y + h).unwrap()
    } else {
        let x = rng.random_range(0.0..500.0);
        let y = rng.random_range(0.0..500.0);
        let w = rng.random_range(0.5..150.0);
        let h = rng.random_range(0.5..150.0);
        PixelBox::new(x, y, x + w, y + h).unwrap()
    }
}

/// Quadratic reference: visit by area (largest first, ties by position) and
/// keep a box unless some kept box overlaps it beyond the threshold.
fn reference_nms(boxes: &[PixelBox], thr: f64) -> Vec<PixelBox> {
    let arr: Vec<[f64; 4]> = boxes.iter().map(|b| b.to_array()).collect();
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let mut visited = vec![false; arr.len()];
    let mut kept: Vec<usize> = Vec::new();
    for _ in 0..arr.len() {
        let mut best: Option<usize> = None;
        for i in 0..arr.len() {
            if !visited[i] && best.is_none_or(|b| area(&arr[i]) > area(&arr[b])) {
                best = Some(i);
            }
        }
        let i = best.unwrap();
        visited[i] = true;
        if kept.iter().all(|&k| ref_iou(arr[k], arr[i]) <= thr) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| boxes[i]).collect()
}

fn geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e6d73);
    for set in 0..1000 {
        let n = rng.random_range(0..=200);
        let grid = set % 2 == 0;
        let boxes: Vec<PixelBox> = (0..n).map(|_| random_box(&mut rng, grid)).collect();
        let thr = [0.0, 0.3, 0.5, 0.7, 0.9, rng.random_range(0.0..1.0)][set % 6];
        let got = nms(&boxes, thr);
        let want = reference_nms(&boxes, thr);
        ensure!(got == want, "set {set} (n={n}, thr={thr}): {} kept vs {} in reference", got.len(), want.len());
    }
    for k in 0..10_000 {
        let a = random_box(&mut rng, k % 3 == 0);
        let b = random_box(&mut rng, k % 3 == 0);
        let ab = iou(&a, &b);
        ensure!(ab == iou(&b, &a), "pair {k}: iou not symmetric");
        ensure!((0.0..=1.0).contains(&ab), "pair {k}: iou {ab} out of range");
        ensure!((ab - ref_iou(a.to_array(), b.to_array())).abs() < 1e-12, "pair {k}: iou disagrees with reference");
        ensure!(iou(&a, &a) == 1.0, "pair {k}: iou(a, a) != 1");
        let shifted = PixelBox::new(a.x_max() + 1.0, a.y_min(), a.x_max() + 1.0 + b.width(), a.y_min() + b.height()).unwrap();
        ensure!(iou(&a, &shifted) == 0.0, "pair {k}: disjoint boxes overlap");
    }
    Ok("1000 NMS sets match the reference; 10000 IoU pairs symmetric, bounded, identity 1, disjoint 0".into())
}

// ---------------------------------------------------------------------------
// 2

fn three_decimals(text: &str) -> bool {
    text.split(", ").all(|f| {
        let b = f.as_bytes();
        b.len() == 5 && b[0].is_ascii_digit() && b[1] == b'.' && b[2..].iter().all(u8::is_ascii_digit)
    }) && text.split(", ").count() == 4
}

fn normalization_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e6f726d);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let dims = ImageDims::new(rng.random_range(16..=2000), rng.random_range(16..=2000)).unwrap();
        let (w, h) = (f64::from(dims.width()), f64::from(dims.height()));
        // Every fourth box touches an image edge, where clamping could bite.
        let bw = rng.random_range(1.0..=w);
        let bh = rng.random_range(1.0..=h);
        let (x0, y0) = match k % 4 {
            0 => (0.0, rng.random_range(0.0..=h - bh)),
            1 => (w - bw, 0.0),
            _ => (rng.random_range(0.0..=w - bw), rng.random_range(0.0..=h - bh)),
        };
        let b = PixelBox::new(x0, y0, x0 + bw, y0 + bh).unwrap();
        let n = normalize(&b, dims);
        ensure!(three_decimals(&n.fields_text()), "pair {k}: {:?} does not carry three decimals", n.fields_text());
        let json = serde_json::to_value(n).unwrap();
        for v in json.as_array().unwrap() {
            let milli = v.as_f64().unwrap() * 1000.0;
            ensure!((milli - milli.round()).abs() < 1e-6, "pair {k}: serialized value {v} has more than three decimals");
        }
        let d = denormalize(&n, dims);
        let centre = |p: &PixelBox| ((p.x_min() + p.x_max()) / 2.0, (p.y_min() + p.y_max()) / 2.0);
        let (cx, cy) = centre(&b);
        let (dx, dy) = centre(&d);
        for (err, dim) in [
            ((dx - cx).abs(), w),
            ((dy - cy).abs(), h),
            ((d.width() - b.width()).abs(), w),
            ((d.height() - b.height()).abs(), h),
        ] {
            worst = worst.max(err / dim);
            ensure!(err <= 0.0005 * dim + 1e-9, "pair {k}: {b} -> {n} -> {d} moves a coordinate by {err} px ({dim} px image side)");
        }
        // The same box moved to the top edge sits in the upper half.
        if bh <= 0.9 * h {
            let top = PixelBox::new(x0, 0.0, x0 + bw, bh).unwrap();
            ensure!(normalize(&top, dims).center_y() > 0.5, "pair {k}: top-edge box {top} has center_y <= 0.5");
        }
    }
    Ok(format!("1000 pairs; worst round-trip error {:.6} x image side", worst))
}

// ---------------------------------------------------------------------------
// 3

fn prompt_bytes() -> Outcome {
    let dir = Path::new(prompt_cases::FIXTURE_DIR);
    let cases = prompt_cases::cases();
    let mut per_template = std::collections::BTreeMap::<String, usize>::new();
    for (name, bundle) in &cases {
        let path = dir.join(format!("{name}.txt"));
        let golden = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(golden == bundle.fixture_text().as_bytes(), "{name} differs from its golden fixture");
        *per_template.entry(name.rsplit_once('-').unwrap().0.to_string()).or_default() += 1;
    }
    let system = cases
        .iter()
        .find(|(n, _)| n == "concept_extraction-00")
        .and_then(|(_, b)| b.system_text.clone())
        .ok_or("missing concept extraction case")?;
    ensure!(
        system.contains("Query: left kid in blue shirt\n<assistant>\nkid, child, person, shirt, clothing\n"),
        "one-shot concept example is not verbatim"
    );
    for (t, count) in &per_template {
        ensure!(*count == 10 || t == "global_caption", "{t} has {count} parameterizations");
    }
    Ok(format!("{} fixtures byte-identical across {} templates", cases.len(), per_template.len()))
}

// ---------------------------------------------------------------------------
// 4

fn visual_prompt_pixels() -> Outcome {
    let img = image::RgbImage::from_fn(256, 192, |x, y| {
        image::Rgb(if (x / 8 + y / 8) % 2 == 0 { [240, 240, 240] } else { [20, 20, 20] })
    });
    let dims = ImageDims::new(256, 192).unwrap();
    let bbox = PixelBox::new(70.0, 50.0, 150.0, 120.0).unwrap();
    let spec = VisualPromptSpec::default();
    ensure!(spec.blur_sigma == 10.0, "default blur sigma is {}", spec.blur_sigma);
    let out = apply_visual_prompt(&img, &bbox, &spec);
    let (x0, y0, x1, y1) = pixel_span(&bbox, dims);
    let w = spec.outline_width;
    let mut changed = 0;
    for (x, y, px) in out.enumerate_pixels() {
        let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
        let in_band = x + w >= x0 && x < x1 + w && y + w >= y0 && y < y1 + w;
        if inside {
            ensure!(px == img.get_pixel(x, y), "interior pixel ({x}, {y}) changed");
        } else if in_band {
            ensure!(px.0 == spec.outline_color, "boundary pixel ({x}, {y}) is {:?}", px.0);
        } else if px != img.get_pixel(x, y) {
            changed += 1;
        }
    }
    ensure!(changed > 0, "no exterior pixel changed");
    Ok(format!("interior intact, outline band exact, {changed} exterior pixels blurred"))
}

// ---------------------------------------------------------------------------
// 5

fn oracle_pipeline() -> Outcome {
    let tmp = tempdir();
    let dir = tmp.path();
    gen_scenes(dir, 5, 200, &[])?;
    let report = dir.join("report.jsonl");
    let stdout = cli_ok(&[
        "bench",
        "--config",
        path_str(&dir.join("config.toml")),
        "--dataset",
        path_str(&dir.join("dataset.jsonl")),
        "--report",
        path_str(&report),
    ])?;
    let [acc, rec, rej] = summary_line(&stdout)?;
    let (summary, outcomes) = read_report(&report)?;
    ensure!(outcomes.len() == 200, "{} outcomes", outcomes.len());
    recount(&summary, &outcomes)?;
    ensure!(summary["accuracy"].as_f64() == Some(acc), "printed accuracy {acc} differs from report");
    ensure!(acc == 1.0 && rec == 1.0 && rej == 0.0, "accuracy={acc} recall={rec} rejection={rej}");
    Ok("accuracy=1 recall=1 rejection=0 over 200 scenes; recount matches".into())
}

// ---------------------------------------------------------------------------
// 6

fn ablation_ordering() -> Outcome {
    let tmp = tempdir();
    let dir = tmp.path();
    gen_scenes(dir, 6, 200, &[])?;
    let base = fs::read_to_string(dir.join("config.toml")).map_err(|e| e.to_string())?;
    let corrupted = base.replace("corruption_rate = 0.0", "corruption_rate = 0.3");
    ensure!(corrupted != base, "could not set the corruption rate");
    let config = dir.join("corrupted.toml");
    fs::write(&config, corrupted).map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for mode in ["caption", "query_echo"] {
        let report = dir.join(format!("{mode}.jsonl"));
        let stdout = cli_ok(&[
            "bench",
            "--config",
            path_str(&config),
            "--dataset",
            path_str(&dir.join("dataset.jsonl")),
            "--report",
            path_str(&report),
            "--mode",
            mode,
        ])?;
        let (summary, outcomes) = read_report(&report)?;
        recount(&summary, &outcomes)?;
        ensure!(summary["mode"] == mode, "report mode {}", summary["mode"]);
        results.push(summary_line(&stdout)?);
    }
    let ([caption, ..], [echo, echo_recall, _]) = (results[0], results[1]);
    ensure!(echo > caption, "query_echo accuracy {echo} does not exceed caption accuracy {caption}");
    ensure!(echo == echo_recall, "query_echo accuracy {echo} != generation recall {echo_recall}");
    Ok(format!("query_echo {echo} > caption {caption}; query_echo recall {echo_recall}"))
}

// ---------------------------------------------------------------------------
// 7

/// Passes requests through and keeps every user and system text it sees.
struct Recorder {
    inner: Arc<dyn ChatBackend>,
    seen: Mutex<Vec<(Option<String>, String)>>,
}

impl ChatBackend for Recorder {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, role: RoleKind, request: &ChatRequest) -> Result<String, GatewayError> {
        let text = |r: &str| {
            request
                .messages
                .iter()
                .find(|m| m.role.as_str() == r)
                .map(|m| m.text.clone())
        };
        self.seen
            .lock()
            .unwrap()
            .push((text("system"), text("user").unwrap_or_default()));
        self.inner.complete(role, request)
    }
}

fn scene_object(id: &str, label: &str, color: &str, rgb: [u8; 3], b: [f64; 4]) -> Value {
    serde_json::json!({
        "id": id, "label": label, "synonyms": [], "color_name": color, "rgb": rgb,
        "attribute_sentence": format!("a {color} {label}"), "box": b, "detector_confidence": 1.0
    })
}

fn manifest(id: &str, w: u32, h: u32, objects: Vec<Value>, query: &str) -> SceneManifest {
    serde_json::from_value(serde_json::json!({
        "scene_id": id,
        "dims": {"width": w, "height": h},
        "background": [200, 200, 200],
        "global_caption": "A constructed scene.",
        "objects": objects,
        "queries": [{"text": query, "target": "o0"}],
    }))
    .expect("valid manifest")
}

struct Rig {
    agent: GroundingAgent,
    mllm: Arc<Recorder>,
    llm: Arc<Recorder>,
}

fn rig(scenes: Vec<SceneManifest>) -> Rig {
    let registry = Arc::new(SceneRegistry::new(scenes));
    let oracle: Arc<dyn ChatBackend> = Arc::new(OracleChat::new(registry.clone(), OracleConfig::default(), "oracle"));
    let recorder = || {
        Arc::new(Recorder {
            inner: oracle.clone(),
            seen: Mutex::new(Vec::new()),
        })
    };
    let (llm, mllm) = (recorder(), recorder());
    let gateway = Gateway::new(llm.clone(), mllm.clone(), Arc::new(OracleDetector::new(registry, "oracle")));
    Rig {
        agent: GroundingAgent::new(gateway, PipelineConfig::default(), PromptTemplates::default()),
        mllm,
        llm,
    }
}

fn refinement_constants() -> Outcome {
    // 200 x 100 image: 500 px is exactly 2.5 %, 498 px is 2.49 %.
    let boundary = manifest(
        "boundary",
        200,
        100,
        vec![
            scene_object("o0", "cup", "red", [220, 30, 30], [0.0, 0.0, 25.0, 20.0]),
            scene_object("o1", "cup", "blue", [30, 30, 220], [100.0, 50.0, 183.0, 56.0]),
            scene_object("o2", "cup", "green", [30, 200, 30], [130.0, 10.0, 190.0, 45.0]),
        ],
        "the red cup",
    );
    // 400 x 300 image: twelve disjoint cups, each above the area floor.
    let palette = [
        ("blue", [30, 30, 220]),
        ("green", [30, 200, 30]),
        ("yellow", [230, 210, 30]),
        ("purple", [130, 40, 160]),
    ];
    let mut objects = Vec::new();
    for k in 0..12u32 {
        let (cx, cy) = (f64::from(k % 4) * 100.0 + 10.0, f64::from(k / 4) * 100.0 + 10.0);
        let (color, rgb, side) = if k == 0 {
            ("red", [220, 30, 30], 70.0)
        } else {
            let (c, rgb) = palette[(k as usize) % 4];
            (c, rgb, 60.0)
        };
        objects.push(scene_object(&format!("o{k}"), "cup", color, rgb, [cx, cy, cx + side, cy + side]));
    }
    let split = manifest("split", 400, 300, objects, "the red cup");

    let images = [boundary.render(), split.render()];
    let r = rig(vec![boundary.clone(), split.clone()]);

    let res = r.agent.ground(&ImagePayload::from_rgb(&images[0]), "the red cup").map_err(|e| e.to_string())?;
    let kept: Vec<[f64; 4]> = res.candidate_set.candidates.iter().map(|c| c.bbox.to_array()).collect();
    ensure!(kept.contains(&[0.0, 0.0, 25.0, 20.0]), "exactly-2.5% box was dropped: {kept:?}");
    ensure!(!kept.contains(&[100.0, 50.0, 183.0, 56.0]), "2.49% box survived: {kept:?}");
    ensure!(res.predicted_box.map(|b| b.to_array()) == Some([0.0, 0.0, 25.0, 20.0]), "boundary scene mispredicted");

    r.mllm.seen.lock().unwrap().clear();
    r.llm.seen.lock().unwrap().clear();
    let res = r.agent.ground(&ImagePayload::from_rgb(&images[1]), "the red cup").map_err(|e| e.to_string())?;
    let set = &res.candidate_set.candidates;
    let primary = set.iter().filter(|c| c.tier == Tier::Primary).count();
    let other = set.iter().filter(|c| c.tier == Tier::Other).count();
    ensure!(set.len() == 12 && primary == 10 && other == 2, "{} survivors: {primary} primary, {other} other", set.len());
    ensure!(
        set.iter().all(|c| (c.tier == Tier::Primary) == c.description.is_some()),
        "descriptions do not follow the primary tier"
    );
    let described = r
        .mllm
        .seen
        .lock()
        .unwrap()
        .iter()
        .filter(|(_, user)| user.starts_with("Describe the object marked by"))
        .count();
    ensure!(described == 10, "{described} describer calls");
    let selection = r
        .llm
        .seen
        .lock()
        .unwrap()
        .iter()
        .filter_map(|(sys, _)| sys.clone())
        .find(|s| s.contains("Blind Teacher"))
        .ok_or("no selection call")?;
    let (main, rest) = selection.split_once("## Other Instance Descriptions").ok_or("no other block")?;
    let other_block = rest.split("IMPORTANT NOTE").next().unwrap_or("");
    ensure!(main.matches("Instance Description: ").count() == 10, "main block does not hold 10 descriptions");
    let coordinate_only = other_block.lines().filter(|l| l.contains(". cup[")).count();
    ensure!(coordinate_only == 2, "{coordinate_only} coordinate-only entries");
    ensure!(res.predicted_box.map(|b| b.to_array()) == Some([10.0, 10.0, 80.0, 80.0]), "split scene mispredicted");
    Ok("2.5% kept, 2.49% dropped; 12 survivors -> 10 described + 2 coordinate-only".into())
}

// ---------------------------------------------------------------------------
// 8

fn rejection_path() -> Outcome {
    let tmp = tempdir();
    let dir = tmp.path();
    gen_scenes(dir, 8, 20, &[])?;
    let config = dir.join("config.toml");
    let dataset = dir.join("dataset_no_target.jsonl");
    let report = dir.join("report.jsonl");
    let stdout = cli_ok(&[
        "bench",
        "--config",
        path_str(&config),
        "--dataset",
        path_str(&dataset),
        "--report",
        path_str(&report),
    ])?;
    let [_, _, rejection] = summary_line(&stdout)?;
    let (summary, outcomes) = read_report(&report)?;
    recount(&summary, &outcomes)?;
    ensure!(outcomes.len() == 20, "{} no-target samples", outcomes.len());
    ensure!(rejection > 0.0, "rejection rate {rejection}");
    ensure!(outcomes.iter().all(|o| o["rejected"] == true), "a no-target query was not rejected");

    let text = fs::read_to_string(&dataset).map_err(|e| e.to_string())?;
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let image = dir.join(rec["image_path"].as_str().unwrap());
        let out = cli(&[
            "ground",
            "--config",
            path_str(&config),
            "--image",
            path_str(&image),
            "--query",
            rec["query"].as_str().unwrap(),
        ]);
        ensure!(out.status.code() == Some(2), "ground {} exited with {}", rec["sample_id"], out.status);
        ensure!(
            String::from_utf8_lossy(&out.stdout).contains("rejected: true"),
            "ground {} did not print the rejection",
            rec["sample_id"]
        );
    }
    Ok(format!("20/20 rejected, rejection_rate={rejection}, ground exits 2 for all"))
}

// ---------------------------------------------------------------------------
// 9

fn trace_corpus() -> Outcome {
    let corpus: Vec<Value> =
        serde_json::from_str(include_str!("../../core/tests/fixtures/trace_corpus.json")).map_err(|e| e.to_string())?;
    ensure!(corpus.len() == 20, "corpus has {} cases", corpus.len());
    let tokens: Vec<String> = DEFAULT_REJECTION_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut exemplar = false;
    for case in &corpus {
        let name = case["name"].as_str().unwrap();
        let raw = case["raw"].as_str().unwrap();
        let n = case["n"].as_u64().unwrap() as usize;
        let t = parse_reasoning_trace(raw, n, &tokens);
        let answer = match &case["answer"] {
            Value::Number(k) => Answer::Index(k.as_u64().unwrap() as usize),
            Value::String(s) if s == "missing" => Answer::Missing,
            Value::String(s) if s == "rejection" => Answer::Rejection,
            other => return Err(format!("{name}: bad expected answer {other}")),
        };
        let quality = match case["quality"].as_str().unwrap() {
            "clean" => ParseQuality::Clean,
            "fallback" => ParseQuality::Fallback,
            "unparseable" => ParseQuality::Unparseable,
            other => return Err(format!("{name}: bad expected quality {other}")),
        };
        ensure!(t.answer == answer, "{name}: answer {:?}, expected {answer:?}", t.answer);
        ensure!(t.parse_quality == quality, "{name}: quality {:?}, expected {quality:?}", t.parse_quality);
        if let Some(steps) = case["steps"].as_u64() {
            ensure!(t.steps.len() as u64 == steps, "{name}: {} steps, expected {steps}", t.steps.len());
        }
        exemplar |= raw.ends_with("Answer: 1") && t.answer == Answer::Index(1) && t.parse_quality == ParseQuality::Clean;
    }
    ensure!(exemplar, "the exact \"Answer: 1\" format is not covered");
    Ok("20/20 traces parse to their registered outcomes".into())
}

// ---------------------------------------------------------------------------
// 10

fn replay_determinism() -> Outcome {
    let tmp = tempdir();
    let dir = tmp.path();
    gen_scenes(dir, 10, 5, &[])?;
    let config = dir.join("config.toml");
    let dataset = dir.join("dataset.jsonl");
    let cassette = dir.join("run.cassette.jsonl");
    let recorded = dir.join("recorded.jsonl");
    let replayed = dir.join("replayed.jsonl");
    let run = |cmd: &str, report: &PathBuf| {
        cli_ok(&[
            cmd,
            "--config",
            path_str(&config),
            "--dataset",
            path_str(&dataset),
            "--report",
            path_str(report),
            "--cassette",
            path_str(&cassette),
        ])
    };
    run("record", &recorded)?;
    // Without the manifests no oracle could answer: replay must be cassette-only.
    fs::remove_dir_all(dir.join("scenes")).map_err(|e| e.to_string())?;
    run("replay", &replayed)?;
    let a = fs::read(&recorded).map_err(|e| e.to_string())?;
    let b = fs::read(&replayed).map_err(|e| e.to_string())?;
    ensure!(a == b, "replayed report differs from the recorded one");
    let (summary, _) = read_report(&recorded)?;
    ensure!(summary["n_samples"] == 5, "recorded {} samples", summary["n_samples"]);
    let entries = fs::read_to_string(&cassette).map_err(|e| e.to_string())?.lines().count();
    Ok(format!("5-sample report byte-identical after replay ({entries} cassette entries)"))
}

// ---------------------------------------------------------------------------
// 11

fn recall_structure() -> Outcome {
    let tmp = tempdir();
    let dir = tmp.path();
    gen_scenes(dir, 11, 100, &["--small-target-fraction", "0.1"])?;
    let mut n_small = 0;
    for entry in fs::read_dir(dir.join("scenes")).map_err(|e| e.to_string())? {
        let m: SceneManifest = serde_json::from_str(&fs::read_to_string(entry.unwrap().path()).unwrap()).unwrap();
        let target = m.queries.iter().find_map(|q| q.target.clone()).ok_or("scene without a target")?;
        let b = m.object(&target).unwrap().bbox;
        let small = b.area() / m.dims.area() < 0.025;
        ensure!(small == m.metadata.small_object_ids.contains(&target), "{}: small-object flag disagrees with the area", m.scene_id);
        n_small += usize::from(small);
    }
    ensure!(n_small == 10, "{n_small} sub-threshold targets in 100 scenes");
    let out = dir.join("recall.csv");
    cli_ok(&[
        "recall",
        "--config",
        path_str(&dir.join("config.toml")),
        "--dataset",
        path_str(&dir.join("dataset.jsonl")),
        "--sweep",
        "confidence=0.1,0.3,0.5,0.7,0.9",
        "--out",
        path_str(&out),
    ])?;
    let text = fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty table")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("no {name} column"));
    let (value_c, cond_c, hits_c, n_c) = (col("value")?, col("condition")?, col("n_hits")?, col("n_samples")?);
    let mut points: std::collections::BTreeMap<String, [Option<usize>; 3]> = Default::default();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f[n_c] == "100", "row over {} samples", f[n_c]);
        let slot = match f[cond_c] {
            "pre_nms" => 0,
            "post_nms" => 1,
            "major" => 2,
            other => return Err(format!("unknown condition {other}")),
        };
        points.entry(f[value_c].to_string()).or_default()[slot] = Some(f[hits_c].parse().map_err(|e| format!("{e}"))?);
    }
    ensure!(points.len() == 5, "{} sweep points", points.len());
    for (value, [pre, post, major]) in &points {
        let (pre, post, major) = (pre.ok_or("missing pre_nms")?, post.ok_or("missing post_nms")?, major.ok_or("missing major")?);
        ensure!(post <= pre, "confidence {value}: post-NMS hits {post} > pre-NMS {pre}");
        ensure!(pre >= major && pre - major == n_small, "confidence {value}: pre {pre} - major {major} != {n_small}");
    }
    Ok(format!("major recall trails pre-NMS by exactly {n_small}/100 at all 5 points; post <= pre"))
}
