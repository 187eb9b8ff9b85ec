//! Dataset manifests, instances and label spaces.
//!
//! A manifest is a JSON-lines file with one [`Instance`] per line. Captions
//! are expected to be precomputed; nothing here touches image bytes.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled text-image example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
    pub label: String,
    /// Pre-projected image slot vectors, one per image slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<Vec<f32>>>,
}

impl Instance {
    /// Minimal coarse-grained instance; mostly useful in tests and fixtures.
    pub fn coarse(id: &str, text: &str, caption: &str, label: &str) -> Self {
        Instance {
            id: id.to_string(),
            text: text.to_string(),
            image_ref: None,
            caption: Some(caption.to_string()),
            aspect: None,
            label: label.to_string(),
            image_features: None,
        }
    }

    pub fn fine(id: &str, text: &str, aspect: &str, caption: &str, label: &str) -> Self {
        Instance {
            aspect: Some(aspect.to_string()),
            ..Instance::coarse(id, text, caption, label)
        }
    }

    pub fn grain(&self) -> Grain {
        if self.aspect.is_some() {
            Grain::Fine
        } else {
            Grain::Coarse
        }
    }

    pub fn caption_or_empty(&self) -> &str {
        self.caption.as_deref().unwrap_or("")
    }
}

/// Coarse-grained: sentiment of a whole post. Fine-grained: sentiment
/// towards an aspect term of the post.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grain {
    Coarse,
    Fine,
}

impl std::fmt::Display for Grain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Grain::Coarse => f.write_str("coarse"),
            Grain::Fine => f.write_str("fine"),
        }
    }
}

/// Ordered label set together with its verbalizer (label → single word).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRecord", into = "LabelSpaceRecord")]
pub struct LabelSpace {
    kind: Grain,
    labels: Vec<String>,
    words: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceRecord {
    kind: Grain,
    labels: Vec<String>,
    verbalizer: Vec<String>,
}

impl TryFrom<LabelSpaceRecord> for LabelSpace {
    type Error = Error;

    fn try_from(r: LabelSpaceRecord) -> Result<Self> {
        if r.labels.len() != r.verbalizer.len() {
            return Err(Error::LabelSpace(format!(
                "{} labels but {} verbalizer words",
                r.labels.len(),
                r.verbalizer.len()
            )));
        }
        LabelSpace::new(r.kind, r.labels.into_iter().zip(r.verbalizer))
    }
}

impl From<LabelSpace> for LabelSpaceRecord {
    fn from(s: LabelSpace) -> Self {
        LabelSpaceRecord {
            kind: s.kind,
            labels: s.labels,
            verbalizer: s.words,
        }
    }
}

pub const SENTIMENT3_LABELS: [&str; 3] = ["Negative", "Neutral", "Positive"];
pub const TUMEMO_LABELS: [&str; 7] = ["Angry", "Bored", "Calm", "Fear", "Happy", "Love", "Sad"];

impl LabelSpace {
    /// Builds a label space from `(label, word)` pairs in label order.
    ///
    /// The verbalizer must be injective and every word must be a single
    /// whitespace-free token.
    pub fn new<L, W>(kind: Grain, pairs: impl IntoIterator<Item = (L, W)>) -> Result<Self>
    where
        L: Into<String>,
        W: Into<String>,
    {
        let (labels, words): (Vec<String>, Vec<String>) = pairs.into_iter().map(|(l, w)| (l.into(), w.into())).unzip();
        if labels.is_empty() {
            return Err(Error::LabelSpace("no labels".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() || !seen.insert(label.as_str()) {
                return Err(Error::LabelSpace(format!("empty or duplicate label `{label}`")));
            }
        }
        let mut seen = HashSet::new();
        for word in &words {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(Error::LabelSpace(format!(
                    "verbalizer word `{word}` is not a single token"
                )));
            }
            if !seen.insert(word.as_str()) {
                return Err(Error::LabelSpace(format!(
                    "verbalizer is not injective: `{word}` used twice"
                )));
            }
        }
        Ok(LabelSpace { kind, labels, words })
    }

    /// {Negative, Neutral, Positive} → {terrible, okay, great}.
    pub fn sentiment3(kind: Grain) -> Self {
        LabelSpace::new(kind, SENTIMENT3_LABELS.into_iter().zip(["terrible", "okay", "great"]))
            .expect("built-in label space")
    }

    /// MASAD: fine-grained, {Negative, Positive} → {terrible, great}.
    pub fn masad() -> Self {
        LabelSpace::new(Grain::Fine, [("Negative", "terrible"), ("Positive", "great")]).expect("built-in label space")
    }

    /// TumEmo keeps its original emotion words as the verbalizer.
    pub fn tumemo() -> Self {
        LabelSpace::new(Grain::Coarse, TUMEMO_LABELS.into_iter().map(|l| (l, l.to_lowercase())))
            .expect("built-in label space")
    }

    /// Parses a label space description.
    ///
    /// Accepts `sentiment3`, `masad`, `tumemo`, or an explicit list such as
    /// `Negative=terrible,Positive=great`. `kind` applies to `sentiment3` and
    /// explicit lists.
    pub fn parse(spec: &str, kind: Grain) -> Result<Self> {
        match spec.trim() {
            "sentiment3" => Ok(LabelSpace::sentiment3(kind)),
            "masad" => Ok(LabelSpace::masad()),
            "tumemo" => Ok(LabelSpace::tumemo()),
            other => {
                let pairs = other
                    .split(',')
                    .map(|pair| {
                        pair.split_once('=')
                            .map(|(l, w)| (l.trim().to_string(), w.trim().to_string()))
                            .ok_or_else(|| Error::LabelSpace(format!("expected label=word, got `{pair}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                LabelSpace::new(kind, pairs)
            }
        }
    }

    pub fn kind(&self) -> Grain {
        self.kind
    }

    pub fn with_kind(mut self, kind: Grain) -> Self {
        self.kind = kind;
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn verbalize(&self, label: &str) -> Option<&str> {
        self.index_of(label).map(|i| self.words[i].as_str())
    }
}

/// Options for [`load_manifest_with`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub name: Option<String>,
    /// When absent the label space is inferred from the records.
    pub label_space: Option<LabelSpace>,
    /// When set, every `image_features` must have exactly this many slots.
    pub n_image_slots: Option<usize>,
}

/// A validated dataset: label space plus instances with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    name: String,
    label_space: LabelSpace,
    instances: Vec<Instance>,
    aspect_categories: Option<Vec<String>>,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        label_space: LabelSpace,
        instances: Vec<Instance>,
        n_image_slots: Option<usize>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            validate_instance(inst, &label_space, n_image_slots)?;
            if index.insert(inst.id.clone(), i).is_some() {
                return Err(Error::validation(&inst.id, "duplicate id"));
            }
        }
        let aspect_categories = match label_space.kind() {
            Grain::Coarse => None,
            Grain::Fine => {
                let mut seen = HashSet::new();
                Some(
                    instances
                        .iter()
                        .filter_map(|i| i.aspect.as_deref())
                        .filter(|a| seen.insert(*a))
                        .map(str::to_string)
                        .collect(),
                )
            }
        };
        Ok(DatasetManifest {
            name: name.into(),
            label_space,
            instances,
            aspect_categories,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    /// Distinct aspect values in first-appearance order (fine-grained only).
    pub fn aspect_categories(&self) -> Option<&[String]> {
        self.aspect_categories.as_deref()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    /// A manifest over a subset of ids, keeping the given id order.
    pub fn subset(&self, name: impl Into<String>, ids: &[String]) -> Result<DatasetManifest> {
        let instances = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::validation(id, "id not in manifest"))
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetManifest::new(name, self.label_space.clone(), instances, None)
    }
}

fn validate_instance(inst: &Instance, space: &LabelSpace, n_image_slots: Option<usize>) -> Result<()> {
    if inst.id.is_empty() {
        return Err(Error::validation("", "empty id"));
    }
    if !space.contains(&inst.label) {
        return Err(Error::validation(&inst.id, format!("unknown label `{}`", inst.label)));
    }
    match (space.kind(), inst.aspect.is_some()) {
        (Grain::Fine, false) => return Err(Error::validation(&inst.id, "fine-grained record missing `aspect`")),
        (Grain::Coarse, true) => {
            return Err(Error::validation(
                &inst.id,
                "`aspect` present on a coarse-grained record",
            ))
        }
        _ => {}
    }
    if let (Some(features), Some(n)) = (&inst.image_features, n_image_slots) {
        if features.len() != n {
            return Err(Error::validation(
                &inst.id,
                format!("{} image slots, expected {n}", features.len()),
            ));
        }
    }
    if inst.caption.is_none() {
        log::warn!("instance `{}` has no caption; rendering it as empty", inst.id);
    }
    Ok(())
}

/// Loads a manifest, inferring name and label space.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_manifest_with(path, &LoadOptions::default())
}

pub fn load_manifest_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let instances = read_instances(path)?;
    let name = opts.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let label_space = match &opts.label_space {
        Some(space) => space.clone(),
        None => infer_label_space(&instances)?,
    };
    DatasetManifest::new(name, label_space, instances, opts.n_image_slots)
}

/// Reads raw instances without validation against a label space.
pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        instances.push(inst);
    }
    Ok(instances)
}

/// Grain comes from aspect presence; the label set must fit one of the
/// built-in spaces (sentiment3 first, then TumEmo). MASAD's binary space is
/// never inferred and has to be requested explicitly.
fn infer_label_space(instances: &[Instance]) -> Result<LabelSpace> {
    let kind = if instances.iter().any(|i| i.aspect.is_some()) {
        Grain::Fine
    } else {
        Grain::Coarse
    };
    let candidates = [LabelSpace::sentiment3(kind), LabelSpace::tumemo()];
    for space in &candidates {
        if instances.iter().all(|i| space.contains(&i.label)) {
            return Ok(space.clone().with_kind(kind));
        }
    }
    let bad = instances
        .iter()
        .find(|i| !candidates[0].contains(&i.label))
        .expect("some label falls outside sentiment3");
    Err(Error::validation(
        &bad.id,
        format!("unknown label `{}` (pass an explicit label space)", bad.label),
    ))
}

pub fn write_instances<'a>(path: impl AsRef<Path>, instances: impl IntoIterator<Item = &'a Instance>) -> Result<()> {
    write_jsonl(path, instances)
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: impl IntoIterator<Item = T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads any JSON-lines file of `T` records, reporting the failing line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?);
    }
    Ok(records)
}

/// Per-label instance counts in label-space order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassHistogram {
    entries: Vec<(String, usize)>,
}

impl ClassHistogram {
    pub fn from_counts<L: Into<String>>(counts: impl IntoIterator<Item = (L, usize)>) -> Self {
        ClassHistogram {
            entries: counts.into_iter().map(|(l, c)| (l.into(), c)).collect(),
        }
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, c)| *c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(l, c)| (l.as_str(), *c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, c)| c).sum()
    }
}

pub fn class_histogram(manifest: &DatasetManifest) -> ClassHistogram {
    let space = manifest.label_space();
    let mut counts = vec![0usize; space.len()];
    for inst in manifest.instances() {
        let idx = space.index_of(&inst.label).expect("validated label");
        counts[idx] += 1;
    }
    ClassHistogram::from_counts(space.labels().iter().cloned().zip(counts))
}

/// Counts per `(aspect, label)` cell, aspects in first-appearance order and
/// labels in label-space order. Empty cells are kept.
pub fn joint_histogram(manifest: &DatasetManifest) -> Vec<((String, String), usize)> {
    let space = manifest.label_space();
    let aspects = manifest.aspect_categories().unwrap_or(&[]);
    let mut cells = Vec::with_capacity(aspects.len() * space.len());
    for aspect in aspects {
        for label in space.labels() {
            let count = manifest
                .instances()
                .iter()
                .filter(|i| i.aspect.as_deref() == Some(aspect.as_str()) && &i.label == label)
                .count();
            cells.push(((aspect.clone(), label.clone()), count));
        }
    }
    cells
}
