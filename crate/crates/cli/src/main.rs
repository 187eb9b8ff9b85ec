use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multipoint::backend::{Backend, BackendOptions, BackendSpec, SessionKey};
use multipoint::dataset::{
    class_histogram, joint_histogram, read_instances, read_jsonl, write_instances, write_jsonl, DatasetManifest, Grain,
    LabelSpace,
};
use multipoint::experiment::{fuse_predictions, run_experiment, score_prompts, ExperimentConfig, Prediction};
use multipoint::fusion::{FusionMode, PriorEstimate, PriorMode};
use multipoint::metrics::{accuracy, weighted_f1, Labeling};
use multipoint::prompt::{assemble, render_demonstration, render_query, AssembledPrompt, PromptTemplate, TemplateId};
use multipoint::retrieval::{Retriever, SimilarityRecord};
use multipoint::sampling::{allocate_counts, allocate_counts_joint, draw_split, AllocationPolicy, PolicyKind};
use multipoint::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "multipoint", version, about = "Few-shot multimodal prompt toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a distribution-consistent few-shot train/dev split.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        #[arg(long, default_value = "largest-remainder")]
        policy: PolicyKind,
        /// JSON object of label → count, for the pinned policy.
        #[arg(long)]
        pin_file: Option<PathBuf>,
        /// Stratify on (aspect, label) cells.
        #[arg(long)]
        joint: bool,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        label_space: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render prompts for every instance of a manifest.
    Compile {
        #[arg(long)]
        template: TemplateId,
        #[arg(long)]
        manifest: PathBuf,
        /// Demonstration selections from `retrieve`; needs `--support`.
        #[arg(long, requires = "support")]
        demos: Option<PathBuf>,
        /// Manifest the demonstrations were selected from.
        #[arg(long)]
        support: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        n_image_slots: usize,
        #[arg(long, default_value_t = 2)]
        n_prompt_tokens: usize,
        #[arg(long)]
        max_words: Option<usize>,
        #[arg(long)]
        label_space: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select one demonstration per label for every query.
    Retrieve {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value = "stub:0")]
        backend: String,
        #[arg(long)]
        label_space: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score compiled prompt files and fuse their posteriors.
    Classify {
        #[arg(long, num_args = 1.., required = true)]
        prompts: Vec<PathBuf>,
        #[arg(long, default_value = "stub:0")]
        backend: String,
        #[arg(long, default_value = "empirical")]
        prior: PriorMode,
        #[arg(long, default_value = "probabilistic")]
        fusion: FusionMode,
        /// Few-shot train split; source of the empirical prior and the label space.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        label_space: Option<String>,
        /// Score every prompt file with one backend session.
        #[arg(long)]
        shared_session: bool,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and weighted F1 of predictions against gold labels.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        label_space: Option<String>,
    },
    /// Run the full pipeline over all seeds and repeats.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Backend => 3,
                ErrorClass::Data => 4,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Sample {
            manifest,
            fraction,
            policy,
            pin_file,
            joint,
            seed,
            label_space,
            out,
        } => {
            let manifest = load(&manifest, label_space.as_deref())?;
            let plan = if joint {
                allocate_counts_joint(&joint_histogram(&manifest), fraction)?
            } else {
                let policy = match (policy, pin_file) {
                    (PolicyKind::LargestRemainder, _) => AllocationPolicy::LargestRemainder,
                    (PolicyKind::Pinned, Some(path)) => AllocationPolicy::Pinned(read_pins(&path)?),
                    (PolicyKind::Pinned, None) => return Err(Error::Config("--policy pinned needs --pin-file".into())),
                };
                allocate_counts(&class_histogram(&manifest), fraction, &policy)?
            };
            let split = draw_split(&manifest, &plan, seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_instances(out.join("train.jsonl"), split.train_instances(&manifest))?;
            write_instances(out.join("dev.jsonl"), split.dev_instances(&manifest))?;
            for cell in plan.cells() {
                log::info!("{:?}: {} of {}", cell.stratum, cell.count, cell.available);
            }
            println!("train={} dev={}", split.train.len(), split.dev.len());
            Ok(())
        }

        Command::Compile {
            template,
            manifest,
            demos,
            support,
            n_image_slots,
            n_prompt_tokens,
            max_words,
            label_space,
            out,
        } => {
            let template = PromptTemplate::builtin(template, n_image_slots, n_prompt_tokens)?;
            let manifest = load(&manifest, label_space.as_deref())?;
            let space = manifest.label_space();
            let prompts = match (demos, support) {
                (Some(demos), Some(support)) => {
                    let support = load_with_space(&support, space)?;
                    let records: Vec<SimilarityRecord> = read_jsonl(&demos)?;
                    let mut by_query: BTreeMap<&str, Vec<&SimilarityRecord>> = BTreeMap::new();
                    for r in &records {
                        by_query.entry(r.query_id.as_str()).or_default().push(r);
                    }
                    manifest
                        .instances()
                        .iter()
                        .map(|query| {
                            let picks = by_query.get(query.id.as_str()).ok_or_else(|| {
                                Error::validation(&query.id, "no demonstrations selected for this query")
                            })?;
                            let rendered = picks
                                .iter()
                                .map(|r| {
                                    let inst = support.get(&r.support_id).ok_or_else(|| {
                                        Error::validation(&r.support_id, "demonstration not in support manifest")
                                    })?;
                                    render_demonstration(inst, &template, &r.label, space)
                                })
                                .collect::<Result<Vec<_>>>()?;
                            assemble(render_query(query, &template)?, rendered, space)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                _ => manifest
                    .instances()
                    .iter()
                    .map(|q| AssembledPrompt::query_only(render_query(q, &template)?))
                    .collect::<Result<Vec<_>>>()?,
            };
            let prompts = match max_words {
                Some(max) => prompts
                    .iter()
                    .map(|p| p.truncate_to_words(max))
                    .collect::<Result<Vec<_>>>()?,
                None => prompts,
            };
            write_jsonl(&out, &prompts)?;
            println!("{} prompts", prompts.len());
            Ok(())
        }

        Command::Retrieve {
            train,
            queries,
            backend,
            label_space,
            out,
        } => {
            let train = load(&train, label_space.as_deref())?;
            let queries = read_instances(&queries)?;
            let backend = open_backend(&backend, None)?;
            let mut retriever = Retriever::new(backend.as_ref(), train.instances(), train.label_space().clone())?;
            retriever.warm(backend.as_ref(), &queries)?;
            let mut records = Vec::new();
            for q in &queries {
                records.extend(retriever.select(q)?.into_iter().map(|(_, r)| r));
            }
            write_jsonl(&out, &records)?;
            println!("{} selections for {} queries", records.len(), queries.len());
            Ok(())
        }

        Command::Classify {
            prompts,
            backend,
            prior,
            fusion,
            train,
            label_space,
            shared_session,
            batch_size,
            out,
        } => {
            let train = train.map(|t| load(&t, label_space.as_deref())).transpose()?;
            let space = match (&train, &label_space) {
                (Some(t), _) => t.label_space().clone(),
                (None, Some(spec)) => LabelSpace::parse(spec, Grain::Coarse)?,
                (None, None) => {
                    return Err(Error::Config("classify needs --train or --label-space".into()));
                }
            };
            let prior = match (prior, &train) {
                (PriorMode::Uniform, _) => PriorEstimate::uniform(&space),
                (PriorMode::Empirical, Some(t)) => {
                    PriorEstimate::empirical(&space, t.instances().iter().map(|i| i.label.as_str()))?
                }
                (PriorMode::Empirical, None) => {
                    return Err(Error::Config("the empirical prior needs --train".into()));
                }
            };
            let files: Vec<Vec<AssembledPrompt>> = prompts.iter().map(read_jsonl).collect::<Result<_>>()?;
            let ids: Vec<String> = files[0].iter().map(|p| p.id().to_string()).collect();
            let mut names = Vec::new();
            let mut table = Vec::new();
            for (path, file) in prompts.iter().zip(&files) {
                let file_ids: Vec<&str> = file.iter().map(AssembledPrompt::id).collect();
                if file_ids != ids.iter().map(String::as_str).collect::<Vec<_>>() {
                    return Err(Error::validation(
                        path.display().to_string(),
                        "prompt files must list the same ids in the same order",
                    ));
                }
                let name = file
                    .first()
                    .map_or_else(|| path.display().to_string(), |p| p.template().to_string());
                let session = if shared_session { None } else { Some(name.clone()) };
                let scorer = open_backend(&backend, session)?;
                table.push(score_prompts(scorer.as_ref(), file, &space, batch_size)?);
                names.push(name);
            }
            let preds = fuse_predictions(&ids, &names, &table, &prior, fusion)?;
            write_jsonl(&out, &preds)?;
            println!("{} predictions", preds.len());
            Ok(())
        }

        Command::Evaluate {
            preds,
            gold,
            label_space,
        } => {
            let gold = load(&gold, label_space.as_deref())?;
            let preds: Vec<Prediction> = read_jsonl(&preds)?;
            let preds: Labeling = preds.into_iter().map(|p| (p.id, p.label)).collect();
            let gold_labels: Labeling = gold
                .instances()
                .iter()
                .map(|i| (i.id.clone(), i.label.clone()))
                .collect();
            let summary = serde_json::json!({
                "n": gold_labels.len(),
                "accuracy": accuracy(&preds, &gold_labels)?,
                "weighted_f1": weighted_f1(&preds, &gold_labels, gold.label_space())?,
            });
            println!("{summary}");
            Ok(())
        }

        Command::Run { config, out_dir } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(dir) = out_dir {
                config.out_dir = dir;
            }
            let report = run_experiment(&config)?;
            print!("{}", report.render_table());
            Ok(())
        }
    }
}

/// Loads a manifest; the label space is inferred unless `spec` is given, in
/// which case the grain comes from the records.
fn load(path: &Path, spec: Option<&str>) -> Result<DatasetManifest> {
    let instances = read_instances(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match spec {
        Some(spec) => {
            let grain = if instances.iter().any(|i| i.aspect.is_some()) {
                Grain::Fine
            } else {
                Grain::Coarse
            };
            DatasetManifest::new(name, LabelSpace::parse(spec, grain)?, instances, None)
        }
        None => multipoint::dataset::load_manifest(path),
    }
}

fn load_with_space(path: &Path, space: &LabelSpace) -> Result<DatasetManifest> {
    DatasetManifest::new(path.display().to_string(), space.clone(), read_instances(path)?, None)
}

fn read_pins(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn open_backend(uri: &str, template: Option<String>) -> Result<Box<dyn Backend>> {
    let spec: BackendSpec = uri
        .parse()
        .map_err(|e: multipoint::backend::BackendError| Error::Config(e.to_string()))?;
    let opts = BackendOptions::default();
    Ok(match template {
        Some(_) => spec.open(
            &SessionKey {
                template,
                ..SessionKey::default()
            },
            &opts,
        ),
        None => spec.open_plain(&opts),
    })
}
