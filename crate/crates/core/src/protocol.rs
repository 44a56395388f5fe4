//! Tag grammar for policy outputs.
//!
//! A turn looks like `<think>...</think>` followed by zero or more
//! `<zoom>[x1, y1, x2, y2]</zoom>` blocks and/or an `<answer>...</answer>`
//! block. Parsing never fails; problems are collected as [`FormatIssue`]s and
//! a turn with any issue is not well-formed.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Think,
    Zoom,
    Answer,
}

impl Tag {
    const ALL: [Tag; 3] = [Tag::Think, Tag::Zoom, Tag::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Zoom => "zoom",
            Tag::Answer => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum FormatIssue {
    Nested { outer: Tag, inner: Tag },
    Unopened { tag: Tag },
    Unclosed { tag: Tag },
    MissingThink,
    ThinkNotFirst,
    NoZoomOrAnswer,
    BadZoomPayload { index: usize },
}

/// One `<zoom>` block: its literal payload and, when it parses as a JSON array
/// of exactly four finite numbers, those numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoomPayload {
    pub text: String,
    pub coords: Option<[f64; 4]>,
}

impl ZoomPayload {
    pub fn parse(text: &str) -> Self {
        let coords = serde_json::from_str::<Vec<f64>>(text.trim())
            .ok()
            .and_then(|v| <[f64; 4]>::try_from(v).ok())
            .filter(|c| c.iter().all(|v| v.is_finite()));
        Self {
            text: text.to_string(),
            coords,
        }
    }

    pub fn from_coords(coords: [f64; 4]) -> Self {
        let text = format!("[{}, {}, {}, {}]", coords[0], coords[1], coords[2], coords[3]);
        Self {
            text,
            coords: Some(coords),
        }
    }
}

/// Parsed view of one model turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub thinking: Option<String>,
    pub zoom: Vec<ZoomPayload>,
    pub answer: Option<String>,
    pub raw: String,
    pub issues: Vec<FormatIssue>,
}

impl StageOutput {
    pub fn is_well_formed(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_zoom(&self) -> bool {
        !self.zoom.is_empty()
    }

    /// Coordinates of the first zoom block, if it parsed.
    pub fn first_zoom(&self) -> Option<[f64; 4]> {
        self.zoom.first().and_then(|z| z.coords)
    }

    /// Builds a turn from its parts with `raw` set to the canonical rendering.
    pub fn compose(thinking: &str, zoom: Vec<[f64; 4]>, answer: Option<&str>) -> Self {
        let zoom: Vec<ZoomPayload> = zoom.into_iter().map(ZoomPayload::from_coords).collect();
        let raw = render(thinking, &zoom, answer);
        parse_output(&raw)
    }

    /// Canonical text for this turn: think, then zooms, then answer.
    pub fn emit(&self) -> String {
        render(
            self.thinking.as_deref().unwrap_or_default(),
            &self.zoom,
            self.answer.as_deref(),
        )
    }
}

fn render(thinking: &str, zoom: &[ZoomPayload], answer: Option<&str>) -> String {
    let mut out = format!("<think>{thinking}</think>");
    for z in zoom {
        out.push_str(&format!("<zoom>{}</zoom>", z.text));
    }
    if let Some(a) = answer {
        out.push_str(&format!("<answer>{a}</answer>"));
    }
    out
}

fn next_tag(text: &str, from: usize) -> Option<(usize, usize, Tag, bool)> {
    let mut pos = from;
    while let Some(off) = text[pos..].find('<') {
        let at = pos + off;
        let rest = &text[at + 1..];
        let (closing, rest) = match rest.strip_prefix('/') {
            Some(r) => (true, r),
            None => (false, rest),
        };
        for tag in Tag::ALL {
            if let Some(after) = rest.strip_prefix(tag.name()) {
                if after.starts_with('>') {
                    let len = 1 + usize::from(closing) + tag.name().len() + 1;
                    return Some((at, at + len, tag, closing));
                }
            }
        }
        pos = at + 1;
    }
    None
}

/// Parses one model turn.
pub fn parse_output(text: &str) -> StageOutput {
    let mut out = StageOutput {
        thinking: None,
        zoom: Vec::new(),
        answer: None,
        raw: text.to_string(),
        issues: Vec::new(),
    };
    let mut open: Option<(Tag, usize)> = None;
    let mut first_block: Option<Tag> = None;
    let mut pos = 0;
    while let Some((start, end, tag, closing)) = next_tag(text, pos) {
        pos = end;
        match (open, closing) {
            (None, false) => open = Some((tag, end)),
            (None, true) => out.issues.push(FormatIssue::Unopened { tag }),
            (Some((outer, _)), false) => {
                out.issues.push(FormatIssue::Nested { outer, inner: tag });
                // recover by treating the inner tag as the new opener
                open = Some((tag, end));
            }
            (Some((outer, body_start)), true) if outer == tag => {
                open = None;
                first_block.get_or_insert(tag);
                let body = &text[body_start..start];
                match tag {
                    Tag::Think => {
                        out.thinking.get_or_insert_with(|| body.to_string());
                    }
                    Tag::Zoom => out.zoom.push(ZoomPayload::parse(body)),
                    Tag::Answer => {
                        out.answer.get_or_insert_with(|| body.trim().to_string());
                    }
                }
            }
            (Some((outer, _)), true) => {
                out.issues.push(FormatIssue::Nested { outer, inner: tag });
                open = None;
            }
        }
    }
    if let Some((tag, _)) = open {
        out.issues.push(FormatIssue::Unclosed { tag });
    }
    match first_block {
        _ if out.thinking.is_none() => out.issues.push(FormatIssue::MissingThink),
        Some(Tag::Think) => {}
        _ => out.issues.push(FormatIssue::ThinkNotFirst),
    }
    if out.zoom.is_empty() && out.answer.is_none() {
        out.issues.push(FormatIssue::NoZoomOrAnswer);
    }
    for (index, z) in out.zoom.iter().enumerate() {
        if z.coords.is_none() {
            out.issues.push(FormatIssue::BadZoomPayload { index });
        }
    }
    out
}

/// Joint format check over the region turn and, when region selection led to
/// a second turn, the answer turn.
pub fn format_reward(region_out: &StageOutput, answer_out: Option<&StageOutput>) -> u8 {
    let region_ok = region_out.is_well_formed();
    let answer_ok = match answer_out {
        None => true,
        Some(a) => region_out.has_zoom() && a.is_well_formed() && a.answer.is_some(),
    };
    u8::from(region_ok && answer_ok)
}

fn normalize(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
        .trim_end()
        .to_string()
}

/// Option letter at the start of a normalized answer such as `b`, `(b)`,
/// `b.` or `b) red`.
fn leading_option(s: &str) -> Option<char> {
    let s = s.strip_prefix('(').unwrap_or(s);
    let mut chars = s.chars();
    let c = chars.next().filter(|c| c.is_ascii_alphabetic())?;
    match chars.next() {
        None => Some(c),
        Some(n) if !n.is_alphanumeric() => Some(c),
        _ => None,
    }
}

/// Rule-based answer comparison. Single-letter ground truths are treated as
/// multiple-choice options; anything else needs a normalized exact match.
pub fn match_answer(pred: &str, gt: &str) -> bool {
    let (p, g) = (normalize(pred), normalize(gt));
    let mut gchars = g.chars();
    if let (Some(letter), None) = (gchars.next(), gchars.next()) {
        if letter.is_ascii_alphabetic() {
            return leading_option(&p) == Some(letter);
        }
    }
    p == g
}
