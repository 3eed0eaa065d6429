//! Prompt templates and their rendering into encoder-ready sequences.
//!
//! A template contains at most one `<text>` and at most one `<image>`
//! placeholder. Rendering replaces `<text>` with the tokenized input text and
//! `<image>` with the patch matrix of the input image; the literal template
//! text around them is tokenized in place. Adjacent text pieces are merged
//! into one token stream.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{self, ImageBuffer};

pub const TEXT_PLACEHOLDER: &str = "<text>";
pub const IMAGE_PLACEHOLDER: &str = "<image>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Bare input, embedding taken at its last token.
    Last,
    /// Summarization instruction without the one-word constraint.
    Prompt,
    /// Summarization instruction ending in "in one word".
    OneWord,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Last, PromptMode::Prompt, PromptMode::OneWord];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Last => "last",
            PromptMode::Prompt => "prompt",
            PromptMode::OneWord => "oneword",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "last" => Ok(PromptMode::Last),
            "prompt" => Ok(PromptMode::Prompt),
            "oneword" | "one-word" | "one_word" => Ok(PromptMode::OneWord),
            other => Err(Error::InvalidConfig(format!("unknown prompt mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    mode: PromptMode,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>, mode: PromptMode) -> Result<Self> {
        let t = Self {
            name: name.into(),
            body: body.into(),
            mode,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidTemplate {
            name: self.name.clone(),
            reason: reason.into(),
        };
        if self.name.is_empty() || self.name.contains(['=', '\n']) {
            return Err(invalid("name must be non-empty without `=` or newlines"));
        }
        for ph in [TEXT_PLACEHOLDER, IMAGE_PLACEHOLDER] {
            if self.body.matches(ph).count() > 1 {
                return Err(invalid("placeholder occurs more than once"));
            }
        }
        match self.mode {
            PromptMode::Last => {
                let rest = self.body.replace(TEXT_PLACEHOLDER, "").replace(IMAGE_PLACEHOLDER, "");
                if !rest.trim().is_empty() {
                    return Err(invalid("Last templates hold only placeholders"));
                }
            }
            PromptMode::OneWord => {
                // FashionIQ prompts continue past "one word" ("... based on its style:")
                let trimmed = self.body.trim_end();
                if !(trimmed.ends_with("one word:") || (trimmed.contains("in one word") && trimmed.ends_with(':'))) {
                    return Err(invalid("OneWord templates must end with `one word:`"));
                }
            }
            PromptMode::Prompt => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn has_text(&self) -> bool {
        self.body.contains(TEXT_PLACEHOLDER)
    }

    pub fn has_image(&self) -> bool {
        self.body.contains(IMAGE_PLACEHOLDER)
    }
}

/// Byte-level tokenizer interface. Token ids are `< 256` for the built-in one.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// Identity byte -> id mapping.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

impl ByteTokenizer {
    pub fn decode(tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

pub trait Patcher {
    fn patches(&self, image: &ImageBuffer) -> Result<Array2<f32>>;
}

/// Square non-overlapping patches, see [`render::patch`].
#[derive(Debug, Clone, Copy)]
pub struct GridPatcher {
    pub patch_size: usize,
}

impl Patcher for GridPatcher {
    fn patches(&self, image: &ImageBuffer) -> Result<Array2<f32>> {
        render::patch(image, self.patch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(Vec<u32>),
    /// `P x F` patch features.
    Image(Array2<f32>),
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Text(t) => t.len(),
            Segment::Image(p) => p.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    segments: Vec<Segment>,
}

impl MultimodalSequence {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut width = None;
        for s in &segments {
            if let Segment::Image(p) = s {
                match width {
                    None => width = Some(p.ncols()),
                    Some(f) if f != p.ncols() => {
                        return Err(Error::DimMismatch {
                            expected: f,
                            got: p.ncols(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { segments })
    }

    pub fn text(tokens: Vec<u32>) -> Result<Self> {
        Self::new(vec![Segment::Text(tokens)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    /// Width of the image segments, if any.
    pub fn patch_features(&self) -> Option<usize> {
        self.segments.iter().find_map(|s| match s {
            Segment::Image(p) => Some(p.ncols()),
            _ => None,
        })
    }

    /// Appends text tokens, merging into a trailing text segment.
    pub fn push_tokens(&mut self, tokens: &[u32]) {
        match self.segments.last_mut() {
            Some(Segment::Text(t)) => t.extend_from_slice(tokens),
            _ => self.segments.push(Segment::Text(tokens.to_vec())),
        }
    }

    /// First `n` tokens.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let mut out = Vec::new();
        let mut left = n;
        for s in &self.segments {
            if left == 0 {
                break;
            }
            let take = left.min(s.len());
            out.push(match s {
                Segment::Text(t) => Segment::Text(t[..take].to_vec()),
                Segment::Image(p) => Segment::Image(p.slice(ndarray::s![..take, ..]).to_owned()),
            });
            left -= take;
        }
        Self::new(out)
    }
}

pub fn render_prompt(
    template: &PromptTemplate,
    text: Option<&str>,
    image: Option<&ImageBuffer>,
    tokenizer: &dyn Tokenizer,
    patcher: &dyn Patcher,
) -> Result<MultimodalSequence> {
    let check = |present: bool, has: bool, placeholder: &'static str| match (present, has) {
        (false, true) => Err(Error::MissingArgument {
            template: template.name.clone(),
            placeholder,
        }),
        (true, false) => Err(Error::UnusedArgument {
            template: template.name.clone(),
            placeholder,
        }),
        _ => Ok(()),
    };
    check(text.is_some(), template.has_text(), TEXT_PLACEHOLDER)?;
    check(image.is_some(), template.has_image(), IMAGE_PLACEHOLDER)?;
    if text.is_some_and(str::is_empty) {
        return Err(Error::EmptyText);
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut pending = String::new();
    let mut rest = template.body.as_str();
    while !rest.is_empty() {
        let next = [TEXT_PLACEHOLDER, IMAGE_PLACEHOLDER]
            .into_iter()
            .filter_map(|ph| rest.find(ph).map(|at| (at, ph)))
            .min();
        let Some((at, ph)) = next else {
            pending.push_str(rest);
            break;
        };
        pending.push_str(&rest[..at]);
        rest = &rest[at + ph.len()..];
        if ph == TEXT_PLACEHOLDER {
            pending.push_str(text.unwrap_or_default());
        } else if let Some(img) = image {
            if !pending.is_empty() {
                segments.push(Segment::Text(tokenizer.encode(&pending)));
                pending.clear();
            }
            segments.push(Segment::Image(patcher.patches(img)?));
        }
    }
    if !pending.is_empty() {
        segments.push(Segment::Text(tokenizer.encode(&pending)));
    }
    MultimodalSequence::new(segments)
}

pub const FASHIONIQ_SUBTYPES: [&str; 3] = ["shirt", "dress", "toptee"];

/// FashionIQ composed prompt for one subtype. The subtype is substituted
/// before any placeholder.
pub fn fashioniq_composed_body(subtype: &str) -> String {
    format!(
        "<image> change the style of this {subtype} to <text> \n Desribe this modified {subtype} in one word based on its style:"
    )
}

pub fn fashioniq_image_body(subtype: &str) -> String {
    format!("<image>\nDescribe this {subtype} in one word based on its style:")
}

/// Named templates in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    entries: Vec<PromptTemplate>,
}

impl PromptCatalog {
    pub fn new(entries: Vec<PromptTemplate>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::InvalidTemplate {
                    name: e.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.entries
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTemplate(name.to_string()))
    }

    pub fn entries(&self) -> &[PromptTemplate] {
        &self.entries
    }

    /// (text, image) template names used for a representation mode.
    pub fn mode_pair(mode: PromptMode) -> (&'static str, &'static str) {
        match mode {
            PromptMode::Last => ("ablation_last_text", "ablation_last_image"),
            PromptMode::Prompt => ("ablation_prompt_text", "ablation_prompt_image"),
            PromptMode::OneWord => ("text_oneword", "image_oneword"),
        }
    }

    /// Key/value text form: `name=mode:body` per line, with `\` and LF
    /// escaped as `\\` and `\n`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.entries {
            out.push_str(&t.name);
            out.push('=');
            out.push_str(t.mode.as_str());
            out.push(':');
            out.push_str(&escape(&t.body));
            out.push('\n');
        }
        out
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in src.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| Error::Parse {
                path: "<catalog>".into(),
                line: i + 1,
                message: message.into(),
            };
            let (name, value) = line.split_once('=').ok_or_else(|| err("expected name=mode:body"))?;
            let (mode, body) = value.split_once(':').ok_or_else(|| err("expected mode:body"))?;
            let body = unescape(body).ok_or_else(|| err("bad escape sequence"))?;
            entries.push(PromptTemplate::new(name, body, mode.parse()?)?);
        }
        Self::new(entries)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                'n' => out.push('\n'),
                '\\' => out.push('\\'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

pub fn catalog_default() -> PromptCatalog {
    use PromptMode::*;
    let mut raw: Vec<(String, String, PromptMode)> = vec![
        (
            "text_oneword".into(),
            "<text>\nSummary above sentence in one word:".into(),
            OneWord,
        ),
        (
            "text_oneword_summary_of".into(),
            "<text>\nSummary of the above sentence in one word:".into(),
            OneWord,
        ),
        (
            "image_oneword".into(),
            "<image>\nSummary above image in one word:".into(),
            OneWord,
        ),
        (
            "image_oneword_unseen".into(),
            "<image>\nSummary the above image in one word:".into(),
            OneWord,
        ),
        (
            "cirr_composed".into(),
            "<image> modify this image with <text> \n Desribe modified image in one word:".into(),
            OneWord,
        ),
        (
            "cirr_image".into(),
            "<image>\nDescribe this image in one word:".into(),
            OneWord,
        ),
    ];
    for s in FASHIONIQ_SUBTYPES {
        raw.push((format!("fashioniq_composed_{s}"), fashioniq_composed_body(s), OneWord));
        raw.push((format!("fashioniq_image_{s}"), fashioniq_image_body(s), OneWord));
    }
    raw.extend([
        ("ablation_last_text".into(), "<text>".into(), Last),
        ("ablation_last_image".into(), "<image>".into(), Last),
        (
            "ablation_prompt_text".into(),
            "<text>\nSummary above sentence:".into(),
            Prompt,
        ),
        (
            "ablation_prompt_image".into(),
            "<image>\nSummary above image:".into(),
            Prompt,
        ),
    ]);
    let entries = raw
        .into_iter()
        .map(|(n, b, m)| PromptTemplate::new(n, b, m).expect("built-in template is valid"))
        .collect();
    PromptCatalog::new(entries).expect("built-in names are unique")
}
