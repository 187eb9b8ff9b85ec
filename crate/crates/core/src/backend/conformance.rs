//! Contract-conformance checks shared by every backend implementation.
//!
//! The same suite runs against the in-process stub and against a remote
//! service, so both sides of the contract are held to one definition.

use crate::dataset::{Grain, Instance, LabelSpace};
use crate::prompt::{assemble, render_demonstration, render_query, AssembledPrompt, PromptTemplate, TemplateId};

use super::{check_logits, Backend, BackendError, MaskRequest};

#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    Pass,
    Fail(String),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckOutcome>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !matches!(c.status, CheckStatus::Fail(_)))
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks
            .iter()
            .filter(|c| matches!(c.status, CheckStatus::Fail(_)))
            .collect()
    }

    fn record(&mut self, name: &'static str, result: Result<(), String>) {
        let status = match result {
            Ok(()) => CheckStatus::Pass,
            Err(msg) => CheckStatus::Fail(msg),
        };
        self.checks.push(CheckOutcome { name, status });
    }
}

#[derive(Debug, Clone)]
pub struct ConformanceOptions {
    /// Expect bit-identical outputs for repeated requests.
    pub deterministic: bool,
    /// Image-slot counts to exercise; empty skips the projection check.
    pub projection_slots: Vec<usize>,
    pub image_feature_dim: usize,
}

impl Default for ConformanceOptions {
    fn default() -> Self {
        ConformanceOptions {
            deterministic: true,
            projection_slots: vec![1, 2, 3, 4],
            image_feature_dim: 16,
        }
    }
}

/// Builds a small assembled prompt over `space` for probing a backend.
pub fn probe_prompt(space: &LabelSpace, tag: &str) -> AssembledPrompt {
    let template = PromptTemplate::builtin(TemplateId::C1, 1, 0).expect("built-in template");
    let space = space.clone().with_kind(Grain::Coarse);
    let query = render_query(
        &Instance::coarse(
            &format!("probe-{tag}"),
            &format!("probe text {tag}"),
            "a photo",
            &space.labels()[0],
        ),
        &template,
    )
    .expect("probe query renders");
    let demos = space
        .labels()
        .iter()
        .map(|label| {
            let inst = Instance::coarse(
                &format!("demo-{label}"),
                &format!("example for {label}"),
                "a scene",
                label,
            );
            render_demonstration(&inst, &template, label, &space).expect("probe demo renders")
        })
        .collect();
    assemble(query, demos, &space).expect("probe prompt assembles")
}

pub fn run(backend: &dyn Backend, opts: &ConformanceOptions) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let spaces = [
        LabelSpace::masad(),
        LabelSpace::sentiment3(Grain::Coarse),
        LabelSpace::tumemo(),
    ];

    report.record("logit completeness", {
        spaces.iter().try_for_each(|space| {
            let prompt = probe_prompt(space, "complete");
            let words = space.words().to_vec();
            let logits = backend.score_mask(&prompt, &words).map_err(|e| e.to_string())?;
            check_logits(&words, &logits).map_err(|e| e.to_string())
        })
    });

    report.record("per-item error isolation", {
        let space = &spaces[1];
        let prompt = probe_prompt(space, "isolation");
        let words = space.words().to_vec();
        let empty: Vec<String> = Vec::new();
        let results = backend.score_mask_batch(&[
            MaskRequest {
                prompt: &prompt,
                words: &words,
            },
            MaskRequest {
                prompt: &prompt,
                words: &empty,
            },
            MaskRequest {
                prompt: &prompt,
                words: &words,
            },
        ]);
        match results.as_slice() {
            [Ok(_), Err(_), Ok(_)] => Ok(()),
            other => Err(format!(
                "expected [ok, err, ok], got {:?}",
                other.iter().map(Result::is_ok).collect::<Vec<_>>()
            )),
        }
    });

    let texts: Vec<String> = [
        "",
        "a",
        "good day",
        "nice day",
        "a considerably longer sentence about a stock ticker",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let first = backend.embed_batch(&texts);

    report.record("embedding dimension stability", {
        match &first {
            Err(e) => Err(e.to_string()),
            Ok(vectors) if vectors.len() != texts.len() => {
                Err(format!("{} vectors for {} texts", vectors.len(), texts.len()))
            }
            Ok(vectors) => {
                let dim = vectors[0].len();
                match backend.embed("another text") {
                    Err(e) => Err(e.to_string()),
                    Ok(again) if dim == 0 || again.len() != dim || vectors.iter().any(|v| v.len() != dim) => {
                        Err("embedding dimension varies".into())
                    }
                    Ok(_) => Ok(()),
                }
            }
        }
    });

    report.record("embedding unit norm", {
        match &first {
            Err(e) => Err(e.to_string()),
            Ok(vectors) => vectors.iter().try_for_each(|v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() <= 1e-6 {
                    Ok(())
                } else {
                    Err(format!("norm {norm}"))
                }
            }),
        }
    });

    if opts.deterministic {
        report.record("determinism", {
            let space = &spaces[1];
            let prompt = probe_prompt(space, "determinism");
            let words = space.words().to_vec();
            let a = backend.score_mask(&prompt, &words);
            let b = backend.score_mask(&prompt, &words);
            let e1 = backend.embed_batch(&texts);
            let e2 = backend.embed_batch(&texts);
            if a.is_ok() && a == b && e1.is_ok() && e1 == e2 {
                Ok(())
            } else {
                Err("repeated requests gave different outputs".into())
            }
        });
    } else {
        report.checks.push(CheckOutcome {
            name: "determinism",
            status: CheckStatus::Skipped("backend not declared deterministic".into()),
        });
    }

    if opts.projection_slots.is_empty() {
        report.checks.push(CheckOutcome {
            name: "projection shapes",
            status: CheckStatus::Skipped("not requested".into()),
        });
    } else {
        let dim = first.as_ref().ok().and_then(|v| v.first()).map(Vec::len);
        let features: Vec<f32> = (0..opts.image_feature_dim).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut unsupported = false;
        let result = opts
            .projection_slots
            .iter()
            .try_for_each(|&n| match backend.project_image(&features, n) {
                Err(BackendError::Unsupported(_)) => {
                    unsupported = true;
                    Ok(())
                }
                Err(e) => Err(e.to_string()),
                Ok(slots) if slots.len() != n => Err(format!("{} slots for N_i = {n}", slots.len())),
                Ok(slots) => match dim {
                    Some(d) if slots.iter().any(|s| s.len() != d) => {
                        Err(format!("slot width differs from embedding dimension {d}"))
                    }
                    _ => Ok(()),
                },
            });
        if unsupported && result.is_ok() {
            report.checks.push(CheckOutcome {
                name: "projection shapes",
                status: CheckStatus::Skipped("projection not supported".into()),
            });
        } else {
            report.record("projection shapes", result);
        }
    }

    report
}
