//! Parsing of chain-of-thought selection replies.

use serde::{Deserialize, Serialize};

pub const DEFAULT_REJECTION_TOKENS: &[&str] = &["none", "no match", "reject"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseQuality {
    Clean,
    Fallback,
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Answer {
    /// 1-based candidate index.
    Index(usize),
    Rejection,
    /// Nothing usable; only with [`ParseQuality::Unparseable`].
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub raw_text: String,
    pub steps: Vec<String>,
    pub answer: Answer,
    pub parse_quality: ParseQuality,
}

impl ReasoningTrace {
    /// Trace for a sample rejected before any selection call.
    pub fn rejected_without_call() -> Self {
        Self {
            raw_text: String::new(),
            steps: Vec::new(),
            answer: Answer::Rejection,
            parse_quality: ParseQuality::Clean,
        }
    }

    pub fn index(&self) -> Option<usize> {
        match self.answer {
            Answer::Index(k) => Some(k),
            _ => None,
        }
    }
}

/// Strips markdown emphasis, heading and list markers from a line.
fn clean(line: &str) -> &str {
    line.trim()
        .trim_start_matches(['*', '#', '-', '>', '_', ' '])
        .trim_end_matches(['*', '_', ' '])
}

fn step_body(line: &str) -> Option<&str> {
    let l = clean(line);
    let rest = strip_prefix_ci(l, "reasoning step")?.trim_start();
    let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = rest[digits..].trim_start_matches(['*', '_']).trim_start();
    rest.strip_prefix(':')
        .map(|s| s.trim_start_matches(['*', '_']).trim())
}

fn answer_body(line: &str) -> Option<&str> {
    let l = clean(line);
    let rest = strip_prefix_ci(l, "answer")?;
    let rest = rest.trim_start_matches(['*', '_', ' ']);
    rest.strip_prefix(':').map(|s| s.trim_matches(['*', '_', ' ', '.']))
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

/// Standalone integers in `s` in order of appearance. Digits that are part of
/// a decimal number or glued to letters are skipped.
fn integers(s: &str) -> Vec<u64> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if !b[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        let before = start.checked_sub(1).map(|p| b[p]);
        let after = b.get(i).copied();
        let after2 = b.get(i + 1).copied();
        let glued_before = before.is_some_and(|c| {
            c.is_ascii_alphanumeric()
                || c == b'.'
                || (c == b',' && start >= 2 && b[start - 2].is_ascii_digit())
        });
        let decimal_after = after == Some(b'.') && after2.is_some_and(|c| c.is_ascii_digit());
        let glued_after = after.is_some_and(|c| c.is_ascii_alphabetic());
        if !glued_before && !decimal_after && !glued_after {
            if let Ok(v) = s[start..i].parse::<u64>() {
                out.push(v);
            }
        }
    }
    out
}

fn has_token(text: &str, tokens: &[String]) -> bool {
    let lower = text.to_lowercase();
    tokens.iter().any(|t| {
        let t = t.to_lowercase();
        if t.is_empty() {
            return false;
        }
        let mut from = 0;
        while let Some(pos) = lower[from..].find(&t) {
            let at = from + pos;
            let end = at + t.len();
            let ok_before = lower[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let ok_after = lower[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if ok_before && ok_after {
                return true;
            }
            from = at + lower[at..].chars().next().map_or(1, char::len_utf8);
        }
        false
    })
}

/// Parses a selection reply against `n_candidates` candidates.
///
/// The last `Answer:` line decides: a refusal token rejects, an integer in
/// range is a clean answer, an integer out of range is unparseable. Without a
/// usable answer line the last standalone integer outside the step labels is
/// taken as a fallback; failing that, a refusal anywhere in the text rejects.
pub fn parse_reasoning_trace(raw: &str, n_candidates: usize, rejection_tokens: &[String]) -> ReasoningTrace {
    let steps: Vec<String> = raw.lines().filter_map(step_body).map(str::to_string).collect();
    let finish = |answer, parse_quality| ReasoningTrace {
        raw_text: raw.to_string(),
        steps: steps.clone(),
        answer,
        parse_quality,
    };
    let in_range = |k: u64| k >= 1 && k as usize <= n_candidates;

    if let Some(body) = raw.lines().rev().find_map(answer_body) {
        if has_token(body, rejection_tokens) {
            return finish(Answer::Rejection, ParseQuality::Clean);
        }
        if let Some(&k) = integers(body).first() {
            return if in_range(k) {
                finish(Answer::Index(k as usize), ParseQuality::Clean)
            } else {
                finish(Answer::Missing, ParseQuality::Unparseable)
            };
        }
    }

    let free_text: String = raw
        .lines()
        .map(|l| match step_body(l) {
            Some(body) => body,
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n");
    if let Some(&k) = integers(&free_text).last() {
        return if in_range(k) {
            finish(Answer::Index(k as usize), ParseQuality::Fallback)
        } else {
            finish(Answer::Missing, ParseQuality::Unparseable)
        };
    }
    if has_token(&free_text, rejection_tokens) {
        return finish(Answer::Rejection, ParseQuality::Fallback);
    }
    finish(Answer::Missing, ParseQuality::Unparseable)
}
