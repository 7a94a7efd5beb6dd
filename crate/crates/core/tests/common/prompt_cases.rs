//! Parameterizations behind the golden prompt fixtures. Shared by the core
//! golden test and the acceptance run.

use refground::prompt::templates::{DEFAULT_BOX_FORMAT_LABEL, DEFAULT_VISUAL_PROMPT_NAME};
use refground::prompt::{MainInstance, OtherInstance};
use refground::{NormalizedBox, PromptBundle, PromptTemplates};

pub const FIXTURE_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/prompts");

const QUERIES: [&str; 10] = [
    "left kid in blue shirt",
    "the painting hanging on the laptop",
    "man on the right holding a {red} umbrella",
    "second car from left",
    "bowl closest to the camera",
    "giraffe",
    "the woman in white, not the one sitting",
    "top right corner donut with sprinkles",
    "\"striped\" cat under the table",
    "zebra whose head is down: eating grass",
];

const CAPTIONS: [&str; 10] = [
    "Two kids playing in the park.",
    "A desk with a laptop and a painting above it.",
    "People walking in the rain with umbrellas.",
    "A row of parked cars along a street.",
    "Several bowls of food on a wooden table.",
    "A giraffe standing next to a tree.",
    "Three women at a cafe; one is standing.",
    "A box of assorted donuts.",
    "A cat lying under a dining table.",
    "Zebras grazing on a savanna.",
];

fn nouns(k: usize) -> Vec<String> {
    let all = refground::prompt::default_noun_examples();
    match k % 3 {
        0 => all,
        1 => all.into_iter().take(5).collect(),
        _ => vec!["person".into(), "{odd} noun".into()],
    }
}

fn nbox(k: usize, j: usize) -> NormalizedBox {
    let f = |v: usize| (v % 1000) as f64 / 1000.0;
    NormalizedBox::from_fractions(
        f(137 * k + 71 * j + 5),
        f(911 * k + 13 * j + 250),
        f(53 * k + 29 * j + 40).max(0.001),
        f(97 * k + 31 * j + 1).max(0.001),
    )
    .unwrap()
}

const CONCEPTS: [&str; 4] = ["person", "car", "bowl", "traffic light"];
const DESCRIPTIONS: [&str; 4] = [
    "A child in a blue shirt running on grass.",
    "A silver sedan parked at the curb, partly occluded.",
    "A white ceramic bowl filled with soup; a spoon rests inside.",
    "A traffic light showing {green}.",
];

/// `(fixture name, rendered bundle)` for every case.
pub fn cases() -> Vec<(String, PromptBundle)> {
    let t = PromptTemplates::default();
    let mut out = Vec::new();
    out.push(("global_caption-00".to_string(), t.global_caption()));
    for k in 0..10 {
        out.push((
            format!("concept_extraction-{k:02}"),
            t.concept_extraction(QUERIES[k], CAPTIONS[k], &nouns(k)).unwrap(),
        ));
        out.push((
            format!("concept_extraction_query_only-{k:02}"),
            t.concept_extraction_query_only(QUERIES[k], &nouns(k + 1)).unwrap(),
        ));
        let (label, vp) = if k % 4 == 3 {
            ("xyxy", "a green ellipse")
        } else {
            (DEFAULT_BOX_FORMAT_LABEL, DEFAULT_VISUAL_PROMPT_NAME)
        };
        out.push((
            format!("instance_description-{k:02}"),
            t.instance_description(CONCEPTS[k % 4], &nbox(k, 0), label, vp).unwrap(),
        ));
        let n_main = k % 4 + 1;
        let n_other = k % 3;
        let main: Vec<MainInstance> = (0..n_main)
            .map(|j| MainInstance {
                index: j + 1,
                concept: CONCEPTS[(k + j) % 4],
                bbox: nbox(k, j),
                description: DESCRIPTIONS[(k + j) % 4],
            })
            .collect();
        let other: Vec<OtherInstance> = (0..n_other)
            .map(|j| OtherInstance {
                index: n_main + j + 1,
                concept: CONCEPTS[(k + j + 1) % 4],
                bbox: nbox(k, n_main + j),
            })
            .collect();
        out.push((
            format!("selection-{k:02}"),
            t.selection(QUERIES[k], CAPTIONS[k], &main, &other, label).unwrap(),
        ));
        let descs: Vec<String> = (0..(k % 5 + 1)).map(|j| DESCRIPTIONS[(k + j) % 4].to_string()).collect();
        out.push((format!("aggregation-{k:02}"), t.aggregation(&descs).unwrap()));
        let reprompt = PromptBundle {
            system_text: None,
            user_text: t.selection_reprompt(k + 1).unwrap(),
            image: None,
        };
        out.push((format!("selection_reprompt-{k:02}"), reprompt));
    }
    out
}
