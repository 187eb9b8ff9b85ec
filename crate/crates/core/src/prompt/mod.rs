//! Multimodal cloze prompt rendering and demonstration assembly.
//!
//! A rendered prompt is a flat string of space-separated tokens plus a
//! segment map that tiles it exactly. Image slots and learned prompt tokens
//! are rendered as `<IMG_k>` / `<PT_k>` sentinels for the backend to replace
//! with vectors.

mod template;

pub use template::{PromptTemplate, TemplateId};

use serde::{Deserialize, Serialize};

use crate::dataset::{Instance, LabelSpace};
use crate::error::{Error, Result};
use template::{ASPECT, CAPTION, IMAGE_SLOTS, MASK, PROMPT_TOKENS, TEXT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Literal,
    Mask,
    /// Verbalized gold label in the mask position of a demonstration.
    LabelWord,
    ImageSlot,
    PromptToken,
    Caption,
    RawText,
    Aspect,
}

/// Byte span `[start, end)` of one segment in the rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Piece {
    kind: SegmentKind,
    text: String,
}

impl Piece {
    fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Piece {
            kind,
            text: text.into(),
        }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical form: no empty pieces, adjacent literals merged, single spaces
/// inside literals, nothing leading or trailing.
fn normalize(pieces: Vec<Piece>) -> Vec<Piece> {
    let mut out: Vec<Piece> = Vec::with_capacity(pieces.len());
    for piece in pieces.into_iter().filter(|p| !p.text.is_empty()) {
        match out.last_mut() {
            Some(last) if last.kind == SegmentKind::Literal && piece.kind == SegmentKind::Literal => {
                last.text.push_str(&piece.text);
            }
            _ => out.push(piece),
        }
    }
    for piece in out.iter_mut().filter(|p| p.kind == SegmentKind::Literal) {
        let mut collapsed = String::with_capacity(piece.text.len());
        let mut prev_space = false;
        for ch in piece.text.chars() {
            if ch.is_whitespace() {
                if !prev_space {
                    collapsed.push(' ');
                }
                prev_space = true;
            } else {
                collapsed.push(ch);
                prev_space = false;
            }
        }
        piece.text = collapsed;
    }
    if let Some(first) = out.first_mut().filter(|p| p.kind == SegmentKind::Literal) {
        first.text = first.text.trim_start().to_string();
    }
    if let Some(last) = out.last_mut().filter(|p| p.kind == SegmentKind::Literal) {
        last.text = last.text.trim_end().to_string();
    }
    out.retain(|p| !p.text.is_empty());
    out
}

/// One rendered query or demonstration block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RenderedRecord", into = "RenderedRecord")]
pub struct RenderedPrompt {
    instance_id: String,
    template: String,
    label: Option<String>,
    pieces: Vec<Piece>,
    text: String,
    segments: Vec<Segment>,
    image_features: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize, Deserialize)]
struct RenderedRecord {
    instance_id: String,
    template: String,
    is_demonstration: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    text: String,
    segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_features: Option<Vec<Vec<f32>>>,
}

impl From<RenderedPrompt> for RenderedRecord {
    fn from(p: RenderedPrompt) -> Self {
        RenderedRecord {
            is_demonstration: p.label.is_some(),
            instance_id: p.instance_id,
            template: p.template,
            label: p.label,
            text: p.text,
            segments: p.segments,
            image_features: p.image_features,
        }
    }
}

impl TryFrom<RenderedRecord> for RenderedPrompt {
    type Error = Error;

    fn try_from(r: RenderedRecord) -> Result<Self> {
        if r.is_demonstration != r.label.is_some() {
            return Err(Error::Assembly(format!(
                "prompt for `{}`: is_demonstration disagrees with label",
                r.instance_id
            )));
        }
        let mut pos = 0;
        let mut pieces = Vec::with_capacity(r.segments.len());
        for seg in &r.segments {
            if seg.start != pos || seg.end < seg.start || seg.end > r.text.len() {
                return Err(Error::Assembly(format!(
                    "prompt for `{}`: segments do not tile the text",
                    r.instance_id
                )));
            }
            let text = r
                .text
                .get(seg.start..seg.end)
                .ok_or_else(|| Error::Assembly(format!("prompt for `{}`: span off a char boundary", r.instance_id)))?;
            pieces.push(Piece::new(seg.kind, text));
            pos = seg.end;
        }
        if pos != r.text.len() {
            return Err(Error::Assembly(format!(
                "prompt for `{}`: segments do not cover the text",
                r.instance_id
            )));
        }
        let prompt = RenderedPrompt::from_pieces(r.instance_id, r.template, r.label, pieces, r.image_features);
        prompt.check_mask_count()?;
        Ok(prompt)
    }
}

impl RenderedPrompt {
    fn from_pieces(
        instance_id: String,
        template: String,
        label: Option<String>,
        pieces: Vec<Piece>,
        image_features: Option<Vec<Vec<f32>>>,
    ) -> Self {
        let pieces = normalize(pieces);
        let mut text = String::new();
        let mut segments = Vec::with_capacity(pieces.len());
        for p in &pieces {
            let start = text.len();
            text.push_str(&p.text);
            segments.push(Segment {
                kind: p.kind,
                start,
                end: text.len(),
            });
        }
        RenderedPrompt {
            instance_id,
            template,
            label,
            pieces,
            text,
            segments,
            image_features,
        }
    }

    fn check_mask_count(&self) -> Result<()> {
        let masks = self.count(SegmentKind::Mask);
        let expected = usize::from(!self.is_demonstration());
        if masks != expected {
            return Err(Error::Assembly(format!(
                "prompt for `{}` has {masks} mask segments, expected {expected}",
                self.instance_id
            )));
        }
        Ok(())
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Gold label carried by a demonstration.
    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn is_demonstration(&self) -> bool {
        self.label.is_some()
    }

    pub fn image_features(&self) -> Option<&[Vec<f32>]> {
        self.image_features.as_deref()
    }

    pub fn count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).count()
    }

    pub fn segment_text(&self, seg: &Segment) -> &str {
        &self.text[seg.start..seg.end]
    }

    fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    /// Drops the last word of the last non-empty raw text segment.
    fn pop_raw_word(&mut self) -> bool {
        let Some(idx) = self.pieces.iter().rposition(|p| p.kind == SegmentKind::RawText) else {
            return false;
        };
        let mut pieces = std::mem::take(&mut self.pieces);
        let raw = &mut pieces[idx].text;
        match raw.rfind(' ') {
            Some(cut) => raw.truncate(cut),
            None => raw.clear(),
        }
        *self = RenderedPrompt::from_pieces(
            std::mem::take(&mut self.instance_id),
            std::mem::take(&mut self.template),
            self.label.take(),
            pieces,
            self.image_features.take(),
        );
        true
    }
}

enum MaskFill<'a> {
    Mask,
    Word(&'a str),
}

const PLACEHOLDERS: [&str; 6] = [TEXT, ASPECT, CAPTION, IMAGE_SLOTS, PROMPT_TOKENS, MASK];

fn render(
    instance: &Instance,
    template: &PromptTemplate,
    fill: MaskFill<'_>,
    label: Option<&str>,
) -> Result<RenderedPrompt> {
    if instance.grain() != template.grain {
        return Err(Error::Template(format!(
            "{} template `{}` cannot render {} instance `{}`",
            template.grain,
            template.name,
            instance.grain(),
            instance.id
        )));
    }
    if instance.caption.is_none() && (template.image_part.contains(CAPTION) || template.text_part.contains(CAPTION)) {
        log::warn!("instance `{}` has no caption; substituting an empty one", instance.id);
    }

    let pattern = format!("{} {}", template.image_part, template.text_part);
    let mut pieces = Vec::new();
    let mut prompt_token = 0usize;
    let mut rest = pattern.as_str();
    while !rest.is_empty() {
        let next = PLACEHOLDERS
            .iter()
            .filter_map(|ph| rest.find(ph).map(|at| (at, *ph)))
            .min_by_key(|(at, _)| *at);
        let Some((at, placeholder)) = next else {
            pieces.push(Piece::new(SegmentKind::Literal, rest));
            break;
        };
        pieces.push(Piece::new(SegmentKind::Literal, &rest[..at]));
        match placeholder {
            TEXT => pieces.push(Piece::new(SegmentKind::RawText, collapse_ws(&instance.text))),
            ASPECT => pieces.push(Piece::new(
                SegmentKind::Aspect,
                collapse_ws(instance.aspect.as_deref().unwrap_or_default()),
            )),
            CAPTION => pieces.push(Piece::new(
                SegmentKind::Caption,
                collapse_ws(instance.caption_or_empty()),
            )),
            IMAGE_SLOTS => {
                for k in 0..template.n_image_slots {
                    if k > 0 {
                        pieces.push(Piece::new(SegmentKind::Literal, " "));
                    }
                    pieces.push(Piece::new(SegmentKind::ImageSlot, format!("<IMG_{k}>")));
                }
            }
            PROMPT_TOKENS => {
                for k in 0..template.n_prompt_tokens {
                    if k > 0 {
                        pieces.push(Piece::new(SegmentKind::Literal, " "));
                    }
                    pieces.push(Piece::new(SegmentKind::PromptToken, format!("<PT_{prompt_token}>")));
                    prompt_token += 1;
                }
            }
            MASK => match fill {
                MaskFill::Mask => pieces.push(Piece::new(SegmentKind::Mask, MASK)),
                MaskFill::Word(w) => pieces.push(Piece::new(SegmentKind::LabelWord, w)),
            },
            _ => unreachable!("placeholder list is closed"),
        }
        rest = &rest[at + placeholder.len()..];
    }

    let prompt = RenderedPrompt::from_pieces(
        instance.id.clone(),
        template.name.clone(),
        label.map(str::to_string),
        pieces,
        instance.image_features.clone(),
    );
    prompt.check_mask_count()?;
    Ok(prompt)
}

/// Renders the query prompt: one `<mask>` to be filled by the model.
pub fn render_query(instance: &Instance, template: &PromptTemplate) -> Result<RenderedPrompt> {
    render(instance, template, MaskFill::Mask, None)
}

/// Renders a demonstration: the mask position carries the verbalized label.
pub fn render_demonstration(
    instance: &Instance,
    template: &PromptTemplate,
    label: &str,
    label_space: &LabelSpace,
) -> Result<RenderedPrompt> {
    let word = label_space
        .verbalize(label)
        .ok_or_else(|| Error::Assembly(format!("label `{label}` is not in the label space")))?;
    render(instance, template, MaskFill::Word(word), Some(label))
}

/// A segment of an assembled prompt; `block` 0 is the query, `k` the k-th
/// demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledSegment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
    pub block: usize,
}

/// Query prompt followed by one demonstration per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AssembledRecord", into = "AssembledRecord")]
pub struct AssembledPrompt {
    query: RenderedPrompt,
    demonstrations: Vec<RenderedPrompt>,
    full_text: String,
    segments: Vec<AssembledSegment>,
}

#[derive(Serialize, Deserialize)]
struct AssembledRecord {
    query: RenderedPrompt,
    demonstrations: Vec<RenderedPrompt>,
    full_text: String,
    segments: Vec<AssembledSegment>,
}

impl From<AssembledPrompt> for AssembledRecord {
    fn from(p: AssembledPrompt) -> Self {
        AssembledRecord {
            query: p.query,
            demonstrations: p.demonstrations,
            full_text: p.full_text,
            segments: p.segments,
        }
    }
}

impl TryFrom<AssembledRecord> for AssembledPrompt {
    type Error = Error;

    fn try_from(r: AssembledRecord) -> Result<Self> {
        let rebuilt = AssembledPrompt::join(r.query, r.demonstrations)?;
        if rebuilt.full_text != r.full_text || rebuilt.segments != r.segments {
            return Err(Error::Assembly(format!(
                "assembled prompt for `{}` does not match its blocks",
                rebuilt.query.instance_id
            )));
        }
        Ok(rebuilt)
    }
}

impl AssembledPrompt {
    /// A prompt without demonstrations.
    pub fn query_only(query: RenderedPrompt) -> Result<Self> {
        AssembledPrompt::join(query, Vec::new())
    }

    fn join(query: RenderedPrompt, demonstrations: Vec<RenderedPrompt>) -> Result<Self> {
        if query.is_demonstration() {
            return Err(Error::Assembly("query block carries a label".into()));
        }
        if let Some(d) = demonstrations.iter().find(|d| !d.is_demonstration()) {
            return Err(Error::Assembly(format!(
                "demonstration `{}` has no label",
                d.instance_id
            )));
        }
        let mut full_text = String::new();
        let mut segments = Vec::new();
        for (block, prompt) in std::iter::once(&query).chain(&demonstrations).enumerate() {
            if prompt.text.is_empty() {
                continue;
            }
            if !full_text.is_empty() {
                let start = full_text.len();
                full_text.push(' ');
                segments.push(AssembledSegment {
                    kind: SegmentKind::Literal,
                    start,
                    end: start + 1,
                    block: block - 1,
                });
            }
            let offset = full_text.len();
            full_text.push_str(&prompt.text);
            segments.extend(prompt.segments.iter().map(|s| AssembledSegment {
                kind: s.kind,
                start: s.start + offset,
                end: s.end + offset,
                block,
            }));
        }
        Ok(AssembledPrompt {
            query,
            demonstrations,
            full_text,
            segments,
        })
    }

    pub fn query(&self) -> &RenderedPrompt {
        &self.query
    }

    pub fn demonstrations(&self) -> &[RenderedPrompt] {
        &self.demonstrations
    }

    pub fn full_text(&self) -> &str {
        &self.full_text
    }

    pub fn segments(&self) -> &[AssembledSegment] {
        &self.segments
    }

    pub fn id(&self) -> &str {
        self.query.instance_id()
    }

    pub fn template(&self) -> &str {
        self.query.template()
    }

    pub fn mask_count(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Mask).count()
    }

    /// Blocks in order: query first, then demonstrations.
    pub fn blocks(&self) -> impl Iterator<Item = &RenderedPrompt> {
        std::iter::once(&self.query).chain(&self.demonstrations)
    }

    /// `(block, start, end)` byte range of every non-empty block in
    /// `full_text`, separators excluded.
    pub fn block_spans(&self) -> Vec<(usize, usize, usize)> {
        let mut spans = Vec::new();
        let mut offset = 0;
        for (block, prompt) in self.blocks().enumerate() {
            if prompt.text.is_empty() {
                continue;
            }
            if offset > 0 {
                offset += 1;
            }
            spans.push((block, offset, offset + prompt.text.len()));
            offset += prompt.text.len();
        }
        spans
    }

    pub fn word_count(&self) -> usize {
        self.full_text.split_whitespace().count()
    }

    /// Shortens the prompt to at most `max_words` whitespace-separated
    /// tokens by trimming raw text from the end: demonstrations last to
    /// first, then the query. Masks, labels, captions and sentinels are
    /// never touched; if that is not enough the prompt cannot fit.
    pub fn truncate_to_words(&self, max_words: usize) -> Result<AssembledPrompt> {
        if self.word_count() <= max_words {
            return Ok(self.clone());
        }
        let mut query = self.query.clone();
        let mut demos = self.demonstrations.clone();
        let total = |q: &RenderedPrompt, ds: &[RenderedPrompt]| -> usize {
            q.word_count() + ds.iter().map(RenderedPrompt::word_count).sum::<usize>()
        };
        for i in (0..demos.len()).rev() {
            while total(&query, &demos) > max_words && demos[i].pop_raw_word() {}
        }
        while total(&query, &demos) > max_words && query.pop_raw_word() {}
        if total(&query, &demos) > max_words {
            return Err(Error::Assembly(format!(
                "prompt for `{}` cannot fit in {max_words} words without dropping fixed tokens",
                query.instance_id
            )));
        }
        AssembledPrompt::join(query, demos)
    }
}

/// Concatenates the query with one demonstration per label, reordering the
/// demonstrations into label-space order.
pub fn assemble(
    query: RenderedPrompt,
    demos: Vec<RenderedPrompt>,
    label_space: &LabelSpace,
) -> Result<AssembledPrompt> {
    let mut slots: Vec<Option<RenderedPrompt>> = vec![None; label_space.len()];
    for demo in demos {
        if demo.template != query.template {
            return Err(Error::Assembly(format!(
                "demonstration `{}` uses template `{}`, query uses `{}`",
                demo.instance_id, demo.template, query.template
            )));
        }
        let label = demo
            .label()
            .ok_or_else(|| Error::Assembly(format!("demonstration `{}` has no label", demo.instance_id)))?;
        let idx = label_space
            .index_of(label)
            .ok_or_else(|| Error::Assembly(format!("demonstration label `{label}` not in label space")))?;
        if slots[idx].is_some() {
            return Err(Error::Assembly(format!("duplicate demonstration for label `{label}`")));
        }
        slots[idx] = Some(demo);
    }
    let demonstrations = slots
        .into_iter()
        .zip(label_space.labels())
        .map(|(slot, label)| slot.ok_or_else(|| Error::Assembly(format!("missing demonstration for label `{label}`"))))
        .collect::<Result<Vec<_>>>()?;
    AssembledPrompt::join(query, demonstrations)
}
