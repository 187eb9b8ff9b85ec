use serde::{Deserialize, Serialize};

use crate::dataset::Grain;
use crate::error::{Error, Result};

/// Placeholders understood by the pattern language. Anything else in a
/// pattern is literal text.
pub(crate) const TEXT: &str = "[T]";
pub(crate) const ASPECT: &str = "[A]";
pub(crate) const CAPTION: &str = "[C]";
/// Expands to one `<IMG_k>` sentinel per image slot.
pub(crate) const IMAGE_SLOTS: &str = "[V]";
/// Expands to `n_prompt_tokens` `<PT_k>` sentinels.
pub(crate) const PROMPT_TOKENS: &str = "[PT]";
pub(crate) const MASK: &str = "<mask>";

const MANUAL_IMAGE_PART: &str = "<s> [V] is [C] </s>";
const LEARNED_IMAGE_PART: &str = "<s> [V] [C] [PT] </s>";

/// The eight built-in template variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    C1,
    C2,
    C3,
    C4,
    F1,
    F2,
    F3,
    F4,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::C1,
        TemplateId::C2,
        TemplateId::C3,
        TemplateId::C4,
        TemplateId::F1,
        TemplateId::F2,
        TemplateId::F3,
        TemplateId::F4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::C1 => "c1",
            TemplateId::C2 => "c2",
            TemplateId::C3 => "c3",
            TemplateId::C4 => "c4",
            TemplateId::F1 => "f1",
            TemplateId::F2 => "f2",
            TemplateId::F3 => "f3",
            TemplateId::F4 => "f4",
        }
    }

    pub fn grain(self) -> Grain {
        match self {
            TemplateId::C1 | TemplateId::C2 | TemplateId::C3 | TemplateId::C4 => Grain::Coarse,
            _ => Grain::Fine,
        }
    }

    /// Variant 4 is the one with learned prompt tokens.
    pub fn is_learned(self) -> bool {
        matches!(self, TemplateId::C4 | TemplateId::F4)
    }

    fn text_part(self) -> &'static str {
        match self {
            TemplateId::C1 => "<s> [T] </s> It was <mask>. </s>",
            TemplateId::C2 => "<s> The sentence \"[T]\" has <mask> sentiment. </s>",
            TemplateId::C3 => "<s> Text: [T]. Sentiment of text: <mask>. </s>",
            TemplateId::C4 => "<s> <mask> [PT] [T] [PT] </s>",
            TemplateId::F1 => "<s> [T] [A] </s> It was <mask>. </s>",
            TemplateId::F2 => "<s> The aspect \"[A]\" in sentence \"[T]\" has <mask> sentiment. </s>",
            TemplateId::F3 => "<s> Text: [T]. Aspect: [A]. Sentiment of aspect: <mask>. </s>",
            TemplateId::F4 => "<s> <mask> [PT] [T] [PT] [A] [PT] </s>",
        }
    }

    fn image_part(self) -> &'static str {
        if self.is_learned() {
            LEARNED_IMAGE_PART
        } else {
            MANUAL_IMAGE_PART
        }
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Template(format!("unknown template `{s}`")))
    }
}

/// A multimodal prompt template: an image block followed by a text block.
///
/// Patterns use `[T]`, `[A]`, `[C]`, `[V]`, `[PT]` and `<mask>`; see the
/// README for the full syntax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub grain: Grain,
    pub image_part: String,
    pub text_part: String,
    pub n_image_slots: usize,
    pub n_prompt_tokens: usize,
}

impl PromptTemplate {
    /// One of the built-in variants. `n_prompt_tokens` only applies to the
    /// learned variants and is forced to zero for the manual ones.
    pub fn builtin(id: TemplateId, n_image_slots: usize, n_prompt_tokens: usize) -> Result<Self> {
        PromptTemplate::custom(
            id.as_str(),
            id.grain(),
            id.image_part(),
            id.text_part(),
            n_image_slots,
            if id.is_learned() { n_prompt_tokens } else { 0 },
        )
    }

    pub fn custom(
        name: impl Into<String>,
        grain: Grain,
        image_part: impl Into<String>,
        text_part: impl Into<String>,
        n_image_slots: usize,
        n_prompt_tokens: usize,
    ) -> Result<Self> {
        let template = PromptTemplate {
            name: name.into(),
            grain,
            image_part: image_part.into(),
            text_part: text_part.into(),
            n_image_slots,
            n_prompt_tokens,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Template(format!("{}: {msg}", self.name)));
        let masks = self.text_part.matches(MASK).count();
        if masks != 1 {
            return fail(format!("text part has {masks} masks, expected exactly 1"));
        }
        if self.image_part.contains(MASK) {
            return fail("image part must not contain a mask".into());
        }
        if self.n_image_slots == 0 {
            return fail("at least one image slot is required".into());
        }
        let has_aspect = self.text_part.contains(ASPECT) || self.image_part.contains(ASPECT);
        if has_aspect != (self.grain == Grain::Fine) {
            return fail(format!(
                "{} template {} the aspect placeholder",
                self.grain,
                if has_aspect { "must not use" } else { "must use" }
            ));
        }
        let has_pt = self.text_part.contains(PROMPT_TOKENS) || self.image_part.contains(PROMPT_TOKENS);
        if !has_pt && self.n_prompt_tokens > 0 {
            return fail("prompt tokens configured but the pattern has no [PT]".into());
        }
        Ok(())
    }
}
