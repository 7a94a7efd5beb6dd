//! Prompt rendering and visual prompting.
//!
//! All text rendering is pure and byte-deterministic. Templates come from
//! [`templates`] unless a directory of overrides is supplied.

pub mod templates;
pub mod visual;

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRequest};
use crate::geometry::{format_fixed3, NormalizedBox};
use crate::imaging::ImagePayload;

pub use visual::{apply_visual_prompt, gaussian_blur, render_visual_prompt_image, VisualPromptSpec};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: String },
    #[error("template {template}: {{{name}}} needs a number for its format spec")]
    NotNumeric { template: String, name: String },
    #[error("candidate indices must be 1..n, main before other; got {0:?}")]
    BadIndices(Vec<usize>),
    #[error("cannot read template override {path}: {message}")]
    Override { path: String, message: String },
}

/// Value bound to a placeholder.
#[derive(Debug, Clone)]
pub enum Arg<'a> {
    Text(&'a str),
    Num(f64),
}

/// Substitutes `{name}` / `{name:.3f}` placeholders. `{{` and `}}` are
/// literal braces. Substituted values are never rescanned.
pub fn fill(template_name: &str, template: &str, args: &[(&str, Arg<'_>)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            out.push('{');
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with("}}") {
            out.push('}');
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('}') {
            // lone closing brace: literal
            out.push('}');
            rest = &tail[1..];
            continue;
        }
        let end = tail.find('}').ok_or_else(|| PromptError::Unterminated {
            template: template_name.to_string(),
        })?;
        let spec = &tail[1..end];
        let (name, fmt) = match spec.split_once(':') {
            Some((n, f)) => (n, Some(f)),
            None => (spec, None),
        };
        let arg = args
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| PromptError::UnknownPlaceholder {
                template: template_name.to_string(),
                name: name.to_string(),
            })?;
        match (arg, fmt) {
            (Arg::Text(s), None) => out.push_str(s),
            (Arg::Num(v), Some(".3f")) => out.push_str(&format_fixed3(*v)),
            (Arg::Num(v), None) => {
                let _ = write!(out, "{v}");
            }
            (Arg::Text(_), Some(_)) | (Arg::Num(_), Some(_)) => {
                return Err(PromptError::NotNumeric {
                    template: template_name.to_string(),
                    name: name.to_string(),
                })
            }
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// System text, user text, and an optional image for one model call.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: Option<String>,
    pub user_text: String,
    pub image: Option<ImagePayload>,
}

impl PromptBundle {
    pub fn with_image(mut self, image: ImagePayload) -> Self {
        self.image = Some(image);
        self
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut v = Vec::with_capacity(2);
        if let Some(s) = &self.system_text {
            v.push(ChatMessage::system(s.clone()));
        }
        v.push(match &self.image {
            Some(img) => ChatMessage::user_with_image(self.user_text.clone(), img.clone()),
            None => ChatMessage::user(self.user_text.clone()),
        });
        v
    }

    pub fn request(&self) -> ChatRequest {
        ChatRequest::new(self.messages())
    }

    /// Framed text form used by golden fixtures.
    pub fn fixture_text(&self) -> String {
        let mut s = String::new();
        s.push_str("=== system ===\n");
        if let Some(sys) = &self.system_text {
            s.push_str(sys);
        } else {
            s.push_str("(none)");
        }
        s.push_str("\n=== user ===\n");
        s.push_str(&self.user_text);
        s.push('\n');
        s
    }
}

/// A described candidate line in the selection prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MainInstance<'a> {
    pub index: usize,
    pub concept: &'a str,
    pub bbox: NormalizedBox,
    pub description: &'a str,
}

/// A coordinate-only candidate line in the selection prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct OtherInstance<'a> {
    pub index: usize,
    pub concept: &'a str,
    pub bbox: NormalizedBox,
}

/// The active template set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub concept_system: String,
    pub concept_user: String,
    pub concept_query_only: String,
    pub global_caption: String,
    pub instance_user: String,
    pub instance_system: String,
    pub main_instance: String,
    pub other_instance: String,
    pub instance_block: String,
    pub selection_system: String,
    pub aggregation_system: String,
    pub aggregation_single_system: String,
    pub aggregation_user: String,
    pub selection_reprompt: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        use templates::*;
        Self {
            concept_system: VG_TEXT_GROUNDER.into(),
            concept_user: VG_TEXT_GROUNDER_QUERY.into(),
            concept_query_only: VG_TEXT_GROUNDER_W_QUERY.into(),
            global_caption: MLLM_GLOBAL_DESC_PROMPT.into(),
            instance_user: MLLM_INSTANCE_DESC_PROMPT.into(),
            instance_system: MLLM_INSTANCE_DESC_SYSTEM_PROMPT.into(),
            main_instance: MAIN_INSTANCE_TEXT.into(),
            other_instance: OTHER_INSTANCE_TEXT.into(),
            instance_block: LLM_INSTANCE_DESC.into(),
            selection_system: LLM_SYSTEM_PROMPT_WITH_COT.into(),
            aggregation_system: AGGREGATION_SYSTEM.into(),
            aggregation_single_system: AGGREGATION_SINGLE_SYSTEM.into(),
            aggregation_user: AGGREGATION_USER.into(),
            selection_reprompt: SELECTION_REPROMPT.into(),
        }
    }
}

/// Override file names, one per template field.
pub const OVERRIDE_FILES: &[&str] = &[
    "concept_system.txt",
    "concept_user.txt",
    "concept_query_only.txt",
    "global_caption.txt",
    "instance_user.txt",
    "instance_system.txt",
    "main_instance.txt",
    "other_instance.txt",
    "instance_block.txt",
    "selection_system.txt",
    "aggregation_system.txt",
    "aggregation_single_system.txt",
    "aggregation_user.txt",
    "selection_reprompt.txt",
];

impl PromptTemplates {
    /// Defaults, with any `<field>.txt` present in `dir` replacing its template.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        for name in OVERRIDE_FILES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Override {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            *t.field_mut(name) = text;
        }
        t.check()?;
        Ok(t)
    }

    fn field_mut(&mut self, file: &str) -> &mut String {
        match file {
            "concept_system.txt" => &mut self.concept_system,
            "concept_user.txt" => &mut self.concept_user,
            "concept_query_only.txt" => &mut self.concept_query_only,
            "global_caption.txt" => &mut self.global_caption,
            "instance_user.txt" => &mut self.instance_user,
            "instance_system.txt" => &mut self.instance_system,
            "main_instance.txt" => &mut self.main_instance,
            "other_instance.txt" => &mut self.other_instance,
            "instance_block.txt" => &mut self.instance_block,
            "selection_system.txt" => &mut self.selection_system,
            "aggregation_system.txt" => &mut self.aggregation_system,
            "aggregation_single_system.txt" => &mut self.aggregation_single_system,
            "aggregation_user.txt" => &mut self.aggregation_user,
            "selection_reprompt.txt" => &mut self.selection_reprompt,
            other => unreachable!("unknown override {other}"),
        }
    }

    /// Renders every template once with dummy values so that a bad override
    /// fails at load time rather than mid-run.
    pub fn check(&self) -> Result<(), PromptError> {
        let b = NormalizedBox::from_fractions(0.5, 0.5, 0.5, 0.5).expect("valid");
        self.concept_extraction("q", "c", &["n".to_string()])?;
        self.concept_extraction_query_only("q", &["n".to_string()])?;
        self.instance_description("x", &b, "f", "v")?;
        self.selection(
            "q",
            "g",
            &[MainInstance {
                index: 1,
                concept: "x",
                bbox: b,
                description: "d",
            }],
            &[OtherInstance {
                index: 2,
                concept: "y",
                bbox: b,
            }],
            "f",
        )?;
        self.aggregation(&["a".to_string(), "b".to_string()])?;
        self.aggregation(&["a".to_string()])?;
        self.selection_reprompt(3)?;
        Ok(())
    }

    pub fn concept_extraction(
        &self,
        query: &str,
        global_caption: &str,
        noun_examples: &[String],
    ) -> Result<PromptBundle, PromptError> {
        let nouns = noun_examples.join(", ");
        Ok(PromptBundle {
            system_text: Some(fill(
                "concept_system",
                &self.concept_system,
                &[("noun_examples", Arg::Text(&nouns))],
            )?),
            user_text: fill(
                "concept_user",
                &self.concept_user,
                &[("image_desc", Arg::Text(global_caption)), ("query", Arg::Text(query))],
            )?,
            image: None,
        })
    }

    /// Concept extraction without an image description: the query is the
    /// whole user turn.
    pub fn concept_extraction_query_only(
        &self,
        query: &str,
        noun_examples: &[String],
    ) -> Result<PromptBundle, PromptError> {
        let nouns = noun_examples.join(", ");
        Ok(PromptBundle {
            system_text: Some(fill(
                "concept_query_only",
                &self.concept_query_only,
                &[("noun_examples", Arg::Text(&nouns))],
            )?),
            user_text: query.to_string(),
            image: None,
        })
    }

    pub fn global_caption(&self) -> PromptBundle {
        PromptBundle {
            system_text: None,
            user_text: self.global_caption.clone(),
            image: None,
        }
    }

    pub fn instance_description(
        &self,
        concept: &str,
        bbox: &NormalizedBox,
        box_format_label: &str,
        visual_prompt_name: &str,
    ) -> Result<PromptBundle, PromptError> {
        let [a1, a2, a3, a4] = bbox.to_array();
        Ok(PromptBundle {
            system_text: Some(fill(
                "instance_system",
                &self.instance_system,
                &[("visual_prompt", Arg::Text(visual_prompt_name))],
            )?),
            user_text: fill(
                "instance_user",
                &self.instance_user,
                &[
                    ("visual_prompt", Arg::Text(visual_prompt_name)),
                    ("name", Arg::Text(concept)),
                    ("a1", Arg::Num(a1)),
                    ("a2", Arg::Num(a2)),
                    ("a3", Arg::Num(a3)),
                    ("a4", Arg::Num(a4)),
                    ("box_format", Arg::Text(box_format_label)),
                ],
            )?,
            image: None,
        })
    }

    /// The selection prompt: every candidate in one system turn, the raw
    /// query as the user turn.
    pub fn selection(
        &self,
        query: &str,
        global_desc: &str,
        main: &[MainInstance<'_>],
        other: &[OtherInstance<'_>],
        box_format_label: &str,
    ) -> Result<PromptBundle, PromptError> {
        let indices: Vec<usize> = main
            .iter()
            .map(|m| m.index)
            .chain(other.iter().map(|o| o.index))
            .collect();
        if indices.iter().enumerate().any(|(i, &idx)| idx != i + 1) {
            return Err(PromptError::BadIndices(indices));
        }
        let entry = |tpl_name: &str, tpl: &str, idx: usize, concept: &str, b: &NormalizedBox, desc: Option<&str>| {
            let [cx, cy, w, h] = b.to_array();
            let idx_text = idx.to_string();
            let mut args = vec![
                ("idx", Arg::Text(&idx_text)),
                ("category_name", Arg::Text(concept)),
                ("center_x", Arg::Num(cx)),
                ("center_y", Arg::Num(cy)),
                ("width", Arg::Num(w)),
                ("height", Arg::Num(h)),
            ];
            if let Some(d) = desc {
                args.push(("description", Arg::Text(d)));
            }
            fill(tpl_name, tpl, &args)
        };
        let main_text = main
            .iter()
            .map(|m| entry("main_instance", &self.main_instance, m.index, m.concept, &m.bbox, Some(m.description)))
            .collect::<Result<Vec<_>, _>>()?
            .join("\n");
        let other_text = other
            .iter()
            .map(|o| entry("other_instance", &self.other_instance, o.index, o.concept, &o.bbox, None))
            .collect::<Result<Vec<_>, _>>()?
            .join("\n");
        let instance_desc = fill(
            "instance_block",
            &self.instance_block,
            &[
                ("main_instance_descs", Arg::Text(&main_text)),
                ("other_instance_descs", Arg::Text(&other_text)),
                ("box_format", Arg::Text(box_format_label)),
            ],
        )?;
        Ok(PromptBundle {
            system_text: Some(fill(
                "selection_system",
                &self.selection_system,
                &[
                    ("global_desc", Arg::Text(global_desc)),
                    ("instance_desc", Arg::Text(&instance_desc)),
                ],
            )?),
            user_text: query.to_string(),
            image: None,
        })
    }

    pub fn selection_reprompt(&self, n_candidates: usize) -> Result<String, PromptError> {
        let n = n_candidates.to_string();
        fill("selection_reprompt", &self.selection_reprompt, &[("n", Arg::Text(&n))])
    }

    /// Consolidation prompt over sampled descriptions. Line breaks inside a
    /// description are folded to spaces so each sample stays on its own line.
    pub fn aggregation(&self, descriptions: &[String]) -> Result<PromptBundle, PromptError> {
        let listed = descriptions
            .iter()
            .enumerate()
            .map(|(i, d)| format!("{}. {}", i + 1, d.split_whitespace().collect::<Vec<_>>().join(" ")))
            .collect::<Vec<_>>()
            .join("\n");
        let n = descriptions.len().to_string();
        let system = if descriptions.len() == 1 {
            fill("aggregation_single_system", &self.aggregation_single_system, &[("n", Arg::Text(&n))])?
        } else {
            fill("aggregation_system", &self.aggregation_system, &[("n", Arg::Text(&n))])?
        };
        Ok(PromptBundle {
            system_text: Some(system),
            user_text: fill("aggregation_user", &self.aggregation_user, &[("descriptions", Arg::Text(&listed))])?,
            image: None,
        })
    }
}

/// Default noun examples as owned strings.
pub fn default_noun_examples() -> Vec<String> {
    templates::DEFAULT_NOUN_EXAMPLES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(a: f64, b: f64, c: f64, d: f64) -> NormalizedBox {
        NormalizedBox::from_fractions(a, b, c, d).unwrap()
    }

    #[test]
    fn fill_formats_and_escapes() {
        let s = fill("t", "{a} {{x}} {b:.3f}", &[("a", Arg::Text("hi")), ("b", Arg::Num(0.5))]).unwrap();
        assert_eq!(s, "hi {x} 0.500");
        assert!(matches!(
            fill("t", "{nope}", &[]),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        assert!(matches!(fill("t", "{open", &[]), Err(PromptError::Unterminated { .. })));
        // substituted values are not rescanned
        assert_eq!(fill("t", "{a}", &[("a", Arg::Text("{a}"))]).unwrap(), "{a}");
    }

    #[test]
    fn concept_prompt_example() {
        let t = PromptTemplates::default();
        let p = t
            .concept_extraction("left kid in blue shirt", "two kids playing in the park", &default_noun_examples())
            .unwrap();
        assert!(p.user_text.trim_end().ends_with("Query: left kid in blue shirt"));
        assert!(p.user_text.starts_with("Image description: two kids playing in the park\n"));
        let sys = p.system_text.unwrap();
        assert!(sys.contains("Query: left kid in blue shirt\n<assistant>\nkid, child, person, shirt, clothing\n"));
        assert!(sys.contains("Available noun examples: person, bicycle, car,"));
        assert!(!sys.contains("{noun_examples}"));

        let empty = t.concept_extraction("q", "", &[]).unwrap();
        assert_eq!(empty.user_text, "Image description: \nQuery: q\n");
    }

    #[test]
    fn instance_prompt_uses_fixed_point() {
        let t = PromptTemplates::default();
        let p = t
            .instance_description("chair", &nb(0.2, 0.8, 0.2, 0.2), templates::DEFAULT_BOX_FORMAT_LABEL, "a red rectangle")
            .unwrap();
        assert_eq!(
            p.user_text,
            "Describe the object marked by a red rectangle: chair[0.200, 0.800, 0.200, 0.200]. Note: The coordinates [*, *, *, *] are in the center-based [center_x, center_y, width, height] format."
        );
        let half = t.instance_description("x", &nb(0.5, 0.5, 0.5, 0.5), "f", "v").unwrap();
        assert!(half.user_text.contains("x[0.500, 0.500, 0.500, 0.500]"));
    }

    #[test]
    fn selection_prompt_layout() {
        let t = PromptTemplates::default();
        let main = [MainInstance {
            index: 1,
            concept: "chair",
            bbox: nb(0.2, 0.8, 0.2, 0.2),
            description: "a white chair",
        }];
        let other = [OtherInstance {
            index: 2,
            concept: "seat",
            bbox: nb(0.7, 0.3, 0.1, 0.1),
        }];
        let p = t.selection("the white chair", "a room", &main, &other, "fmt").unwrap();
        assert_eq!(p.user_text, "the white chair");
        let sys = p.system_text.unwrap();
        assert!(sys.contains(
            "## Main Instance Descriptions\n1. chair[0.200, 0.800, 0.200, 0.200]\nInstance Description: a white chair\n\n## Other Instance Descriptions\n2. seat[0.700, 0.300, 0.100, 0.100]\n\nIMPORTANT NOTE: The coordinates [*, *, *, *] are in the fmt format."
        ));
        assert_eq!(sys.matches("Instance Description:").count(), 1);
        assert!(sys.ends_with("...\nAnswer: 1\n"));

        let none_other = t.selection("q", "g", &main, &[], "fmt").unwrap();
        assert!(none_other
            .system_text
            .unwrap()
            .contains("## Other Instance Descriptions\n\n\nIMPORTANT NOTE"));

        let bad = [OtherInstance {
            index: 3,
            concept: "x",
            bbox: nb(0.5, 0.5, 0.1, 0.1),
        }];
        assert!(matches!(
            t.selection("q", "g", &main, &bad, "f"),
            Err(PromptError::BadIndices(_))
        ));
    }

    #[test]
    fn aggregation_prompt_enumerates() {
        let t = PromptTemplates::default();
        let five = vec!["a red ball".to_string(); 5];
        let p = t.aggregation(&five).unwrap();
        assert!(p.system_text.as_deref().unwrap().starts_with("You will receive 5 independent"));
        assert_eq!(
            p.user_text,
            "Descriptions:\n1. a red ball\n2. a red ball\n3. a red ball\n4. a red ball\n5. a red ball\n"
        );
        let one = t.aggregation(&["x\ny".to_string()]).unwrap();
        assert!(one.system_text.unwrap().contains("Repeat it unchanged"));
        assert_eq!(one.user_text, "Descriptions:\n1. x y\n");
    }

    #[test]
    fn overrides_replace_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("global_caption.txt"), "Caption this.").unwrap();
        let t = PromptTemplates::with_overrides(dir.path()).unwrap();
        assert_eq!(t.global_caption().user_text, "Caption this.");
        std::fs::write(dir.path().join("instance_user.txt"), "{bogus}").unwrap();
        assert!(PromptTemplates::with_overrides(dir.path()).is_err());
    }
}
