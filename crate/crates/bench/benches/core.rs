use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refground::gateway::oracle::{OracleChat, OracleConfig, OracleDetector};
use refground::geometry::{denormalize, iou, nms, normalize, ImageDims, PixelBox};
use refground::pipeline::parse_reasoning_trace;
use refground::prompt::{apply_visual_prompt, VisualPromptSpec};
use refground::scene::{generate_scenes, GenOptions};
use refground::{Gateway, GroundingAgent, ImagePayload, PipelineConfig, PromptTemplates, SceneRegistry};

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<PixelBox> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..600.0);
            let y = rng.random_range(0.0..440.0);
            let w = rng.random_range(2.0..200.0);
            let h = rng.random_range(2.0..200.0);
            PixelBox::new(x, y, x + w, y + h).unwrap()
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs = random_boxes(&mut rng, 2000);
    c.bench_function("iou/1000_pairs", |b| {
        b.iter(|| pairs.chunks(2).map(|p| iou(&p[0], &p[1])).sum::<f64>())
    });
    let mut group = c.benchmark_group("nms");
    for n in [20, 100, 200] {
        let boxes = random_boxes(&mut rng, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &boxes, |b, boxes| {
            b.iter(|| nms(black_box(boxes), 0.7))
        });
    }
    group.finish();
    let dims = ImageDims::new(800, 640).unwrap();
    c.bench_function("normalize_roundtrip/1000", |b| {
        b.iter(|| {
            pairs[..1000]
                .iter()
                .map(|p| denormalize(&normalize(p, dims), dims).x_min())
                .sum::<f64>()
        })
    });
}

fn visual_prompt(c: &mut Criterion) {
    let img = image::RgbImage::from_fn(256, 192, |x, y| {
        image::Rgb(if (x / 16 + y / 16) % 2 == 0 { [250, 250, 250] } else { [10, 10, 10] })
    });
    let bbox = PixelBox::new(60.0, 40.0, 160.0, 120.0).unwrap();
    let spec = VisualPromptSpec::default();
    c.bench_function("visual_prompt/256x192", |b| b.iter(|| apply_visual_prompt(black_box(&img), &bbox, &spec)));
}

fn traces(c: &mut Criterion) {
    let tokens: Vec<String> = ["none", "no match", "reject"].iter().map(|s| s.to_string()).collect();
    let clean = "Step 1: the query asks for the red chair.\nStep 2: candidate 3 is a red chair.\nAnswer: 3";
    let prose = "Looking at the candidates, the best fit is probably number 4 since it is red.";
    c.bench_function("trace/clean", |b| b.iter(|| parse_reasoning_trace(black_box(clean), 10, &tokens)));
    c.bench_function("trace/fallback", |b| b.iter(|| parse_reasoning_trace(black_box(prose), 10, &tokens)));
}

fn pipeline(c: &mut Criterion) {
    let scenes = generate_scenes(&GenOptions {
        seed: 3,
        n_scenes: 4,
        ..GenOptions::default()
    });
    let registry = Arc::new(SceneRegistry::new(scenes.iter().map(|s| s.manifest.clone()).collect()));
    let chat = Arc::new(OracleChat::new(registry.clone(), OracleConfig::default(), "oracle"));
    let gateway = Gateway::new(chat.clone(), chat, Arc::new(OracleDetector::new(registry, "oracle")));
    let agent = GroundingAgent::new(gateway, PipelineConfig::default(), PromptTemplates::default());
    let image = ImagePayload::from_rgb(&scenes[0].image);
    let query = scenes[0].manifest.queries[0].text.clone();
    c.bench_function("pipeline/oracle_sample", |b| b.iter(|| agent.ground(&image, &query).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = geometry, visual_prompt, traces, pipeline
}
criterion_main!(benches);
