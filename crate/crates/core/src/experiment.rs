//! End-to-end experiment driver: sample, retrieve, compile, classify, fuse
//! and evaluate over every (seed, repeat) pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendOptions, BackendSpec, MaskRequest, SessionKey};
use crate::dataset::{
    class_histogram, joint_histogram, load_manifest_with, write_instances, write_jsonl, DatasetManifest, Grain,
    Instance, LabelSpace, LoadOptions,
};
use crate::error::{Error, Result};
use crate::fusion::{
    distribution_from_scores, fuse_with, predict, FusionMode, LabelDistribution, PriorEstimate, PriorMode,
};
use crate::metrics::{aggregate, AggregateReport, Labeling, RunResult};
use crate::prompt::{assemble, render_demonstration, render_query, AssembledPrompt, PromptTemplate, TemplateId};
use crate::retrieval::{Retriever, SimilarityRecord};
use crate::sampling::{
    allocate_counts, allocate_counts_joint, draw_split, AllocationPlan, AllocationPolicy, FewShotSplit, PolicyKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionMode {
    /// One backend session per template (separately trained classifiers).
    Independent,
    /// All templates share one session.
    Shared,
}

fn default_fraction() -> f64 {
    0.01
}
fn default_policy() -> PolicyKind {
    PolicyKind::LargestRemainder
}
fn default_seeds() -> Vec<u64> {
    vec![13, 21, 42, 87, 100]
}
fn default_repeats() -> u32 {
    3
}
fn default_templates() -> Vec<TemplateId> {
    vec![TemplateId::C3, TemplateId::C4]
}
fn default_one() -> usize {
    1
}
fn default_prompt_tokens() -> usize {
    2
}
fn default_prior() -> PriorMode {
    PriorMode::Empirical
}
fn default_fusion() -> FusionMode {
    FusionMode::Probabilistic
}
fn default_backend() -> String {
    "stub:0".into()
}
fn default_workers() -> usize {
    4
}
fn default_batch_size() -> usize {
    8
}
fn default_max_in_flight() -> usize {
    4
}
fn default_sessions() -> SessionMode {
    SessionMode::Independent
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_embed_dim() -> usize {
    64
}

/// Configuration for [`run_experiment`], usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Full labelled pool the few-shot splits are drawn from.
    pub train_manifest: PathBuf,
    /// Evaluation set; when absent, everything outside train and dev.
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    /// `sentiment3`, `masad`, `tumemo` or `Label=word,...`; inferred if absent.
    #[serde(default)]
    pub label_space: Option<String>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    /// Per-label counts for the pinned policy.
    #[serde(default)]
    pub pins: BTreeMap<String, usize>,
    /// Stratify on (aspect, label) instead of label alone.
    #[serde(default)]
    pub joint: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default = "default_templates")]
    pub templates: Vec<TemplateId>,
    #[serde(default = "default_one")]
    pub n_image_slots: usize,
    #[serde(default = "default_prompt_tokens")]
    pub n_prompt_tokens: usize,
    #[serde(default = "default_prior")]
    pub prior: PriorMode,
    #[serde(default = "default_fusion")]
    pub fusion: FusionMode,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_sessions")]
    pub sessions: SessionMode,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Truncate assembled prompts to this many whitespace-separated words.
    #[serde(default)]
    pub max_prompt_words: Option<usize>,
}

impl ExperimentConfig {
    /// A config with every default filled in.
    pub fn new(train_manifest: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            train_manifest: train_manifest.into(),
            test_manifest: None,
            label_space: None,
            fraction: default_fraction(),
            policy: default_policy(),
            pins: BTreeMap::new(),
            joint: false,
            seeds: default_seeds(),
            repeats: default_repeats(),
            templates: default_templates(),
            n_image_slots: 1,
            n_prompt_tokens: default_prompt_tokens(),
            prior: default_prior(),
            fusion: default_fusion(),
            backend: default_backend(),
            workers: default_workers(),
            batch_size: default_batch_size(),
            max_in_flight: default_max_in_flight(),
            embed_dim: default_embed_dim(),
            sessions: default_sessions(),
            out_dir: default_out_dir(),
            max_prompt_words: None,
        }
    }

    /// Reads a TOML config. Relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.train_manifest);
        if let Some(p) = config.test_manifest.as_mut() {
            resolve(p);
        }
        resolve(&mut config.out_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one template is required".into()));
        }
        if self.n_image_slots == 0 {
            return Err(Error::Config("n_image_slots must be at least 1".into()));
        }
        if self.seeds.is_empty() || self.repeats == 0 {
            return Err(Error::Config("need at least one seed and one repeat".into()));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("batch_size and embed_dim must be positive".into()));
        }
        if self.policy == PolicyKind::Pinned && self.pins.is_empty() {
            return Err(Error::Config("pinned policy needs `pins`".into()));
        }
        if self.policy == PolicyKind::Pinned && self.joint {
            return Err(Error::Config(
                "pinned counts are per label; `joint` is not supported with them".into(),
            ));
        }
        let grain = self.templates[0].grain();
        if self.templates.iter().any(|t| t.grain() != grain) {
            return Err(Error::Config("templates mix coarse and fine variants".into()));
        }
        self.backend_spec()?;
        Ok(())
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        self.backend
            .parse::<BackendSpec>()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn backend_options(&self) -> BackendOptions {
        BackendOptions {
            embed_dim: self.embed_dim,
            batch_size: self.batch_size,
            max_in_flight: self.max_in_flight,
            ..BackendOptions::default()
        }
    }

    fn label_space_override(&self) -> Result<Option<LabelSpace>> {
        let grain = self.templates.first().map_or(Grain::Coarse, |t| t.grain());
        self.label_space
            .as_deref()
            .map(|s| LabelSpace::parse(s, grain))
            .transpose()
    }
}

/// Per-instance classification record, one line of `distributions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Template name → posterior from that prompt.
    pub distributions: BTreeMap<String, LabelDistribution>,
    pub fused: LabelDistribution,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

/// Scores assembled prompts with `backend` and returns one posterior per
/// prompt. Any failed item aborts with that item's error.
pub fn score_prompts(
    backend: &dyn Backend,
    prompts: &[AssembledPrompt],
    label_space: &LabelSpace,
    batch_size: usize,
) -> Result<Vec<LabelDistribution>> {
    let words = label_space.words();
    let mut dists = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(batch_size.max(1)) {
        let items: Vec<MaskRequest<'_>> = chunk.iter().map(|prompt| MaskRequest { prompt, words }).collect();
        for (prompt, result) in chunk.iter().zip(backend.score_mask_batch(&items)) {
            let logits = result.map_err(|e| Error::from(e).at_stage(format!("scoring `{}`", prompt.id())))?;
            dists.push(distribution_from_scores(&logits, label_space)?);
        }
    }
    Ok(dists)
}

/// Fuses per-template posteriors instance by instance.
///
/// `per_template[t][i]` is the posterior of prompt `t` for instance `ids[i]`.
pub fn fuse_predictions(
    ids: &[String],
    templates: &[String],
    per_template: &[Vec<LabelDistribution>],
    prior: &PriorEstimate,
    mode: FusionMode,
) -> Result<Vec<Prediction>> {
    if per_template.len() != templates.len() || per_template.iter().any(|d| d.len() != ids.len()) {
        return Err(Error::Distribution(
            "posterior table does not match ids × templates".into(),
        ));
    }
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let dists: Vec<LabelDistribution> = per_template.iter().map(|d| d[i].clone()).collect();
            let fused = fuse_with(mode, &dists, prior)?;
            Ok(Prediction {
                id: id.clone(),
                label: predict(&fused).to_string(),
                distributions: templates.iter().cloned().zip(dists).collect(),
                fused,
                gold: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    seed: u64,
    repeat_index: u32,
    backend_sessions: BTreeMap<String, String>,
    prior: PriorEstimate,
    plan: AllocationPlan,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    result: RunResult,
}

struct Prepared {
    config: ExperimentConfig,
    manifest: DatasetManifest,
    test: Option<DatasetManifest>,
    plan: AllocationPlan,
    templates: Vec<PromptTemplate>,
    spec: BackendSpec,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let space = config.label_space_override()?;
    let opts = LoadOptions {
        name: None,
        label_space: space,
        n_image_slots: Some(config.n_image_slots),
    };
    let manifest = load_manifest_with(&config.train_manifest, &opts).map_err(|e| e.at_stage("load"))?;
    let grain = config.templates[0].grain();
    if manifest.label_space().kind() != grain {
        return Err(Error::Config(format!(
            "templates are {grain}-grained but the manifest is {}-grained",
            manifest.label_space().kind()
        )));
    }
    let test = config
        .test_manifest
        .as_ref()
        .map(|path| {
            let opts = LoadOptions {
                label_space: Some(manifest.label_space().clone()),
                ..opts.clone()
            };
            load_manifest_with(path, &opts)
        })
        .transpose()
        .map_err(|e| e.at_stage("load"))?;

    let plan = if config.joint {
        allocate_counts_joint(&joint_histogram(&manifest), config.fraction)
    } else {
        let policy = match config.policy {
            PolicyKind::LargestRemainder => AllocationPolicy::LargestRemainder,
            PolicyKind::Pinned => AllocationPolicy::Pinned(config.pins.clone()),
        };
        allocate_counts(&class_histogram(&manifest), config.fraction, &policy)
    }
    .map_err(|e| e.at_stage("sample"))?;

    let templates = config
        .templates
        .iter()
        .map(|t| PromptTemplate::builtin(*t, config.n_image_slots, config.n_prompt_tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        spec: config.backend_spec()?,
        config: config.clone(),
        manifest,
        test,
        plan,
        templates,
    })
}

/// Runs every (seed, repeat) pair, writes per-run artifacts under
/// `out_dir/run-{seed}-{repeat}/`, and returns the aggregate report (also
/// written as `report.json` and `report.txt`).
pub fn run_experiment(config: &ExperimentConfig) -> Result<AggregateReport> {
    let prepared = prepare(config)?;
    let out = &prepared.config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let jobs: Vec<(u64, u32)> = config
        .seeds
        .iter()
        .flat_map(|&s| (0..config.repeats).map(move |r| (s, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, repeat)| {
                run_one(&prepared, seed, repeat).map_err(|e| e.at_stage(format!("seed {seed} repeat {repeat}")))
            })
            .collect::<Result<Vec<RunResult>>>()
    })?;

    let report = aggregate(runs)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = out.join("report.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let path = out.join("report.txt");
    std::fs::write(&path, report.render_table()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("record serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn run_one(p: &Prepared, seed: u64, repeat: u32) -> Result<RunResult> {
    let config = &p.config;
    let space = p.manifest.label_space();
    let dir = config.out_dir.join(format!("run-{seed}-{repeat}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let split: FewShotSplit = draw_split(&p.manifest, &p.plan, seed).map_err(|e| e.at_stage("sample"))?;
    let train: Vec<Instance> = split.train_instances(&p.manifest).into_iter().cloned().collect();
    let dev = split.dev_instances(&p.manifest);
    write_instances(dir.join("train.jsonl"), &train)?;
    write_instances(dir.join("dev.jsonl"), dev.iter().copied())?;
    let test: Vec<Instance> = match &p.test {
        Some(t) => t.instances().to_vec(),
        None => {
            let used: std::collections::HashSet<&str> =
                split.train.iter().chain(&split.dev).map(String::as_str).collect();
            p.manifest
                .instances()
                .iter()
                .filter(|i| !used.contains(i.id.as_str()))
                .cloned()
                .collect()
        }
    };
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }

    // The sentence encoder is frozen, so retrieval does not vary with the
    // repeat index.
    let opts = config.backend_options();
    let embedder = p.spec.open_plain(&opts);
    let mut retriever = Retriever::new(embedder.as_ref(), &train, space.clone()).map_err(|e| e.at_stage("retrieve"))?;
    retriever
        .warm(embedder.as_ref(), &test)
        .map_err(|e| e.at_stage("retrieve"))?;
    let selections: Vec<Vec<(&Instance, SimilarityRecord)>> = test
        .iter()
        .map(|q| retriever.select(q))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("retrieve"))?;
    write_jsonl(
        dir.join("demos.jsonl"),
        selections.iter().flat_map(|s| s.iter().map(|(_, rec)| rec)),
    )?;

    let shared_key = SessionKey {
        template: None,
        split_seed: seed,
        repeat,
    };
    let mut sessions = BTreeMap::new();
    let mut per_template = Vec::with_capacity(p.templates.len());
    for template in &p.templates {
        let prompts = test
            .iter()
            .zip(&selections)
            .map(|(query, picks)| {
                let demos = picks
                    .iter()
                    .map(|(inst, rec)| render_demonstration(inst, template, &rec.label, space))
                    .collect::<Result<Vec<_>>>()?;
                let prompt = assemble(render_query(query, template)?, demos, space)?;
                match config.max_prompt_words {
                    Some(max) => prompt.truncate_to_words(max),
                    None => Ok(prompt),
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage(format!("compile {}", template.name)))?;
        write_jsonl(dir.join(format!("prompts-{}.jsonl", template.name)), &prompts)?;

        let key = match config.sessions {
            SessionMode::Independent => SessionKey {
                template: Some(template.name.clone()),
                ..shared_key.clone()
            },
            SessionMode::Shared => shared_key.clone(),
        };
        let scorer = p.spec.open(&key, &opts);
        sessions.insert(template.name.clone(), scorer.describe());
        let dists = score_prompts(scorer.as_ref(), &prompts, space, config.batch_size)
            .map_err(|e| e.at_stage(format!("classify {}", template.name)))?;
        per_template.push(dists);
    }

    let prior = match config.prior {
        PriorMode::Empirical => PriorEstimate::empirical(space, train.iter().map(|i| i.label.as_str()))?,
        PriorMode::Uniform => PriorEstimate::uniform(space),
    };
    let ids: Vec<String> = test.iter().map(|i| i.id.clone()).collect();
    let names: Vec<String> = p.templates.iter().map(|t| t.name.clone()).collect();
    let mut predictions =
        fuse_predictions(&ids, &names, &per_template, &prior, config.fusion).map_err(|e| e.at_stage("fuse"))?;
    for (pred, inst) in predictions.iter_mut().zip(&test) {
        pred.gold = Some(inst.label.clone());
    }
    write_jsonl(dir.join("distributions.jsonl"), &predictions)?;

    let gold: Labeling = test.iter().map(|i| (i.id.clone(), i.label.clone())).collect();
    let preds: Labeling = predictions.iter().map(|p| (p.id.clone(), p.label.clone())).collect();
    let result = RunResult::evaluate(seed, repeat, preds, &gold, space).map_err(|e| e.at_stage("evaluate"))?;
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            seed,
            repeat_index: repeat,
            backend_sessions: sessions,
            prior,
            plan: p.plan.clone(),
            n_train: train.len(),
            n_dev: dev.len(),
            n_test: test.len(),
            result: result.clone(),
        },
    )?;
    Ok(result)
}
