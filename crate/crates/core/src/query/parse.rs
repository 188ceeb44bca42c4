use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use super::{Answer, ConfidenceSource, Verdict};
use crate::taxonomy::ContextId;

const BUILTIN_CUES: &str = include_str!("../../data/answer_cues.toml");

/// Cue phrases used when a reply does not open with a bare yes/no.
#[derive(Debug, Clone, Deserialize)]
pub struct AnswerCues {
    pub cue_version: String,
    pub affirmative: Vec<String>,
    pub negative: Vec<String>,
    pub hedge: Vec<String>,
}

impl AnswerCues {
    pub fn builtin() -> &'static AnswerCues {
        static CUES: OnceLock<AnswerCues> = OnceLock::new();
        CUES.get_or_init(|| toml::from_str(BUILTIN_CUES).expect("embedded cue file is valid"))
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase().replace('\u{2019}', "'"))
        .collect()
}

fn contains_phrase(haystack: &[String], phrase: &str) -> bool {
    let needle = words(phrase);
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle.as_slice())
}

fn classify(text: &str) -> Verdict {
    let tokens = words(text);
    let first_alpha = tokens.iter().find(|t| t.chars().any(char::is_alphabetic));
    match first_alpha.map(String::as_str) {
        Some("yes") => return Verdict::Yes,
        Some("no") => return Verdict::No,
        _ => {}
    }
    let cues = AnswerCues::builtin();
    if cues.hedge.iter().any(|c| contains_phrase(&tokens, c)) {
        return Verdict::Unparseable;
    }
    let yes = cues.affirmative.iter().any(|c| contains_phrase(&tokens, c));
    let no = cues.negative.iter().any(|c| contains_phrase(&tokens, c));
    match (yes, no) {
        (true, false) => Verdict::Yes,
        (false, true) => Verdict::No,
        _ => Verdict::Unparseable,
    }
}

fn with_confidence(verdict: Verdict, raw_text: &str, confidence: Option<f64>) -> Answer {
    let (confidence, source) = match (verdict, confidence) {
        (Verdict::Unparseable, _) => (0.0, ConfidenceSource::Absent),
        (_, Some(c)) => (c.clamp(0.0, 1.0), ConfidenceSource::Reported),
        (_, None) => (1.0, ConfidenceSource::Assumed),
    };
    Answer { verdict, confidence, confidence_source: source, raw_text: raw_text.to_string(), latency_ms: 0.0 }
}

/// Normalizes a single-question reply.
///
/// A reply whose first alphabetic word is `yes`/`no` takes that verdict;
/// otherwise the cue lists decide, and anything hedged or ambiguous is
/// unparseable. Without a reported confidence a definitive verdict gets 1.0.
pub fn parse_individual_answer(raw_text: &str, confidence: Option<f64>) -> Answer {
    with_confidence(classify(raw_text), raw_text, confidence)
}

fn item_marker() -> &'static Regex {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    MARKER.get_or_init(|| Regex::new(r"(?:^|[\s;,(\[])(\d{1,3})\s*[.):]\s*").unwrap())
}

fn inline_confidence() -> &'static Regex {
    static CONF: OnceLock<Regex> = OnceLock::new();
    CONF.get_or_init(|| Regex::new(r"\(\s*(?:p\s*=\s*)?((?:0(?:\.\d+)?)|(?:1(?:\.0+)?))\s*\)").unwrap())
}

/// Numbered segments of `text`: `(number, segment text)` in order of
/// appearance. A marker is a 1-3 digit number followed by `.`, `)` or `:`
/// that is not part of a decimal.
fn numbered_segments(text: &str) -> Vec<(usize, &str)> {
    let mut markers = Vec::new();
    for caps in item_marker().captures_iter(text) {
        let whole = caps.get(0).unwrap();
        // `0.97` is a decimal, not item 0.
        if text[whole.end()..].starts_with(|c: char| c.is_ascii_digit()) && !whole.as_str().ends_with(char::is_whitespace) {
            continue;
        }
        let number: usize = caps[1].parse().unwrap();
        markers.push((number, caps.get(1).unwrap().start(), whole.end()));
    }
    markers
        .iter()
        .enumerate()
        .map(|(i, &(number, _, body_start))| {
            let body_end = markers.get(i + 1).map_or(text.len(), |next| next.1);
            (number, text[body_start..body_end].trim())
        })
        .collect()
}

/// Maps a numbered-list reply back onto `kinds`: item `k` answers
/// `kinds[k-1]`. Missing, repeated or unreadable items are unparseable.
/// With a single kind the reply is read exactly like an individual answer.
pub fn parse_joint_answer(
    raw_text: &str,
    kinds: &[ContextId],
    confidence: Option<f64>,
) -> BTreeMap<ContextId, Answer> {
    if kinds.len() == 1 {
        return BTreeMap::from([(kinds[0], parse_individual_answer(raw_text, confidence))]);
    }
    let mut items: Vec<Vec<&str>> = vec![Vec::new(); kinds.len()];
    for (number, body) in numbered_segments(raw_text) {
        if (1..=kinds.len()).contains(&number) {
            items[number - 1].push(body);
        }
    }
    kinds
        .iter()
        .zip(items)
        .map(|(&kind, bodies)| {
            let answer = match bodies.as_slice() {
                [body] => {
                    let item_conf = inline_confidence()
                        .captures(body)
                        .and_then(|c| c[1].parse::<f64>().ok())
                        .or(confidence);
                    let text = inline_confidence().replace_all(body, "");
                    with_confidence(classify(&text), body, item_conf)
                }
                _ => Answer::unparseable(bodies.join(" | ")),
            };
            (kind, answer)
        })
        .collect()
}

/// Recovers `(number, question)` pairs from a joint prompt. Used by
/// backends that answer joint prompts.
pub fn split_joint_prompt(prompt: &str) -> Vec<(usize, String)> {
    let body = match prompt.find("Questions:") {
        Some(pos) => &prompt[pos + "Questions:".len()..],
        None => prompt,
    };
    numbered_segments(body)
        .into_iter()
        .map(|(n, q)| (n, q.to_string()))
        .collect()
}
