//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances and time limits are pinned below.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use multipoint::backend::{Backend, StubBackend};
use multipoint::dataset::{class_histogram, DatasetManifest, Grain, Instance, LabelSpace};
use multipoint::experiment::{run_experiment, ExperimentConfig};
use multipoint::fusion::{fuse, LabelDistribution, PriorEstimate};
use multipoint::metrics::{accuracy, aggregate, weighted_f1, Labeling, RunResult};
use multipoint::retrieval::{select_demonstrations, select_with_embeddings};
use multipoint::sampling::{allocate_counts, draw_split, AllocationPolicy};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const CDS_TIME_LIMIT: Duration = Duration::from_secs(1);
const FUSION_TIME_LIMIT: Duration = Duration::from_secs(5);
const E2E_TIME_LIMIT: Duration = Duration::from_secs(60);
const FUSION_ORACLE_TOL: f64 = 1e-9;
const WORKED_FUSION_TOL: f64 = 1e-4;
const WEIGHTED_F1_TOL: f64 = 1e-5;
const AGGREGATE_TOL: f64 = 1e-12;
const SEEDS: [u64; 5] = [13, 21, 42, 87, 100];

type Outcome = Result<String, String>;

struct Runner {
    failed: Vec<&'static str>,
}

impl Runner {
    fn check(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) -> bool {
        match f() {
            Ok(detail) => {
                println!("PASS {name}: {detail}");
                true
            }
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                self.failed.push(name);
                false
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Rng(ChaCha8Rng);

impl Rng {
    fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }
}

// ---------------------------------------------------------------------------
// Sampling

struct Published {
    name: &'static str,
    space: LabelSpace,
    sizes: &'static [usize],
    counts: &'static [usize],
}

fn published() -> Vec<Published> {
    let s3 = LabelSpace::sentiment3(Grain::Coarse);
    vec![
        Published {
            name: "MVSA-Single",
            space: s3.clone(),
            sizes: &[1004, 345, 1921],
            counts: &[10, 4, 20],
        },
        Published {
            name: "MVSA-Multiple",
            space: s3.clone(),
            sizes: &[1909, 3170, 8166],
            counts: &[20, 32, 82],
        },
        Published {
            name: "Twitter-2015",
            space: s3.clone(),
            sizes: &[368, 1883, 928],
            counts: &[4, 19, 10],
        },
        Published {
            name: "Twitter-2017",
            space: s3,
            sizes: &[416, 1638, 1508],
            counts: &[4, 16, 15],
        },
        Published {
            name: "TumEmo",
            space: LabelSpace::tumemo(),
            sizes: &[5879, 10823, 6300, 8625, 22215, 15016, 6829],
            counts: &[60, 108, 63, 86, 222, 150, 68],
        },
    ]
}

fn manifest_with(p: &Published) -> DatasetManifest {
    let mut instances = Vec::with_capacity(p.sizes.iter().sum());
    // interleave labels so strata are not contiguous
    let mut left: Vec<usize> = p.sizes.to_vec();
    let mut i = 0usize;
    while left.iter().any(|n| *n > 0) {
        for (li, n) in left.iter_mut().enumerate() {
            if *n > 0 {
                *n -= 1;
                let label = &p.space.labels()[li];
                instances.push(Instance::coarse(&format!("x{i}"), "text", "caption", label));
                i += 1;
            }
        }
    }
    DatasetManifest::new(p.name, p.space.clone(), instances, None).expect("valid manifest")
}

fn per_label(manifest: &DatasetManifest, ids: &[String]) -> Vec<usize> {
    let space = manifest.label_space();
    let mut counts = vec![0; space.len()];
    for id in ids {
        let inst = manifest.get(id).expect("id from manifest");
        counts[space.index_of(&inst.label).expect("known label")] += 1;
    }
    counts
}

fn cds_allocation() -> Outcome {
    let datasets = published();
    let manifests: Vec<DatasetManifest> = datasets.iter().map(manifest_with).collect();
    let start = Instant::now();
    let mut notes = Vec::new();
    for (p, m) in datasets.iter().zip(&manifests) {
        let hist = class_histogram(m);
        let got_sizes: Vec<usize> = hist.iter().map(|(_, n)| n).collect();
        ensure(got_sizes == p.sizes, || format!("{}: histogram {got_sizes:?}", p.name))?;

        let pins: BTreeMap<String, usize> = p.space.labels().iter().cloned().zip(p.counts.iter().copied()).collect();
        let plan = allocate_counts(&hist, 0.01, &AllocationPolicy::Pinned(pins)).map_err(|e| e.to_string())?;
        for seed in SEEDS {
            let split = draw_split(m, &plan, seed).map_err(|e| e.to_string())?;
            let train = per_label(m, &split.train);
            let dev = per_label(m, &split.dev);
            ensure(train == p.counts && dev == p.counts, || {
                format!(
                    "{} seed {seed}: train {train:?} dev {dev:?}, want {:?}",
                    p.name, p.counts
                )
            })?;
            ensure(split.train.iter().all(|id| !split.dev.contains(id)), || {
                format!("{} seed {seed}: train and dev overlap", p.name)
            })?;
        }

        let plan = allocate_counts(&hist, 0.01, &AllocationPolicy::LargestRemainder).map_err(|e| e.to_string())?;
        let counts: Vec<usize> = plan.cells().iter().map(|c| c.count).collect();
        for (c, n) in counts.iter().zip(p.sizes) {
            let quota = 0.01 * *n as f64;
            ensure((*c as f64 - quota).abs() <= 1.0, || {
                format!("{}: count {c} vs quota {quota}", p.name)
            })?;
        }
        let n: usize = p.sizes.iter().sum();
        ensure(
            counts.iter().sum::<usize>() == (0.01 * n as f64).round() as usize,
            || format!("{}: total {}", p.name, counts.iter().sum::<usize>()),
        )?;
        if counts != p.counts {
            notes.push(format!("{} largest-remainder {counts:?}", p.name));
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < CDS_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "pinned counts exact for 5 datasets x 5 seeds; largest-remainder within ±1 ({}); {elapsed:.2?}",
        if notes.is_empty() {
            "all equal to published".into()
        } else {
            notes.join("; ")
        }
    ))
}

// ---------------------------------------------------------------------------
// Fusion

fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| 1e-3 + rng.unit()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("l{i}")).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fusion_oracle() -> Outcome {
    let mut rng = Rng::new(2024);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let k = rng.range(2, 7);
        let n = rng.range(1, 3);
        let posts: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
        let prior = random_simplex(&mut rng, k);
        let dists: Vec<LabelDistribution> = posts
            .iter()
            .map(|p| LabelDistribution::new(labels(k), p.clone()).unwrap())
            .collect();
        let pe = PriorEstimate::pinned(
            &LabelSpace::new(Grain::Coarse, labels(k).into_iter().map(|l| (l.clone(), l))).unwrap(),
            prior.clone(),
        )
        .map_err(|e| e.to_string())?;
        let fused = fuse(&dists, &pe).map_err(|e| e.to_string())?;

        // direct evaluation: product of posteriors over prior^(n-1), normalised
        let raw: Vec<f64> = (0..k)
            .map(|l| posts.iter().map(|p| p[l]).product::<f64>() / prior[l].powi(n as i32 - 1))
            .collect();
        let z: f64 = raw.iter().sum();
        let direct: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let d = max_abs_diff(fused.probs(), &direct);
        worst = worst.max(d);
        ensure(d <= FUSION_ORACLE_TOL, || format!("case {case}: diff {d:e}"))?;

        if n == 1 {
            let d = max_abs_diff(fused.probs(), &posts[0]);
            ensure(d <= FUSION_ORACLE_TOL, || {
                format!("case {case}: n = 1 not identity ({d:e})")
            })?;
        }
        let uniform = PriorEstimate::pinned(
            &LabelSpace::new(Grain::Coarse, labels(k).into_iter().map(|l| (l.clone(), l))).unwrap(),
            vec![1.0 / k as f64; k],
        )
        .map_err(|e| e.to_string())?;
        let fused_u = fuse(&dists, &uniform).map_err(|e| e.to_string())?;
        let prod: Vec<f64> = (0..k).map(|l| posts.iter().map(|p| p[l]).product()).collect();
        let zp: f64 = prod.iter().sum();
        let prod: Vec<f64> = prod.iter().map(|x| x / zp).collect();
        let d = max_abs_diff(fused_u.probs(), &prod);
        ensure(d <= FUSION_ORACLE_TOL, || {
            format!("case {case}: uniform prior diff {d:e}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < FUSION_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 cases, max |diff| {worst:.1e} <= {FUSION_ORACLE_TOL:e}; {elapsed:.2?}"
    ))
}

fn worked_fusion() -> Outcome {
    let d = |p: [f64; 2]| LabelDistribution::new(labels(2), p.to_vec()).unwrap();
    let space = LabelSpace::new(Grain::Coarse, [("l0", "l0"), ("l1", "l1")]).unwrap();
    let cases = [
        ([0.6, 0.4], [0.3, 0.7], [0.5, 0.5], [0.3913, 0.6087]),
        ([0.6, 0.4], [0.6, 0.4], [0.8, 0.2], [0.36, 0.64]),
    ];
    let mut shown = Vec::new();
    for (a, b, prior, want) in cases {
        let prior = PriorEstimate::pinned(&space, prior.to_vec()).map_err(|e| e.to_string())?;
        let got = fuse(&[d(a), d(b)], &prior).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(got.probs(), &want);
        ensure(diff <= WORKED_FUSION_TOL, || format!("{:?} vs {want:?}", got.probs()))?;
        shown.push(format!("[{:.4}, {:.4}]", got.probs()[0], got.probs()[1]));
    }
    Ok(format!("{} within ±{WORKED_FUSION_TOL:e}", shown.join(" and ")))
}

// ---------------------------------------------------------------------------
// Templates

fn template_goldens() -> Outcome {
    let rows = common::golden_rows();
    ensure(rows.len() == 16, || format!("{} golden rows", rows.len()))?;
    for (key, expected) in &rows {
        let got = common::render_golden(key);
        ensure(&got == expected, || format!("{key}: got `{got}`"))?;
    }
    Ok("16/16 renderings byte-exact".into())
}

// ---------------------------------------------------------------------------
// Retrieval

const WORDS: [&str; 12] = [
    "red", "blue", "stock", "goal", "rain", "sun", "food", "city", "night", "happy", "slow", "fast",
];

fn random_text(rng: &mut Rng) -> String {
    let n = rng.range(1, 6);
    (0..n)
        .map(|_| WORDS[rng.below(WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn dot_cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

fn retrieval() -> Outcome {
    let mut rng = Rng::new(77);
    let embedder = StubBackend::new(11, 64);
    let mut rescale_checks = 0;
    for case in 0..200 {
        let k = rng.range(1, 5);
        let space = LabelSpace::new(Grain::Coarse, (0..k).map(|i| (format!("L{i}"), format!("w{i}")))).unwrap();
        let size = rng.range(k, 50);
        let support: Vec<Instance> = (0..size)
            .map(|j| {
                // the first k instances cover every label
                let label = if j < k { j } else { rng.below(k) };
                let text = random_text(&mut rng);
                Instance::coarse(&format!("s{j}"), &text, &random_text(&mut rng), &format!("L{label}"))
            })
            .collect();
        let query = if rng.below(4) == 0 {
            support[rng.below(size)].clone()
        } else {
            let text = random_text(&mut rng);
            Instance::coarse("q", &text, &random_text(&mut rng), "L0")
        };

        let embed = |inst: &Instance| {
            let input = [inst.text.as_str(), inst.caption_or_empty()]
                .iter()
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            embedder.embed(&input).unwrap()
        };
        let qv = embed(&query);
        let svs: Vec<Vec<f64>> = support.iter().map(embed).collect();
        let mut oracle: Vec<Option<(usize, f64)>> = vec![None; k];
        for (j, inst) in support.iter().enumerate() {
            if inst.id == query.id {
                continue;
            }
            let li = space.index_of(&inst.label).unwrap();
            let s = dot_cosine(&qv, &svs[j]);
            if oracle[li].is_none_or(|(_, best)| s > best) {
                oracle[li] = Some((j, s));
            }
        }

        let picked = select_demonstrations(&query, &support, &space, &embedder);
        match (oracle.iter().all(Option::is_some), picked) {
            (true, Ok(picks)) => {
                let got: Vec<&str> = picks.iter().map(|(inst, _)| inst.id.as_str()).collect();
                let want: Vec<&str> = oracle.iter().map(|o| support[o.unwrap().0].id.as_str()).collect();
                ensure(got == want, || {
                    format!("case {case}: got {got:?}, brute force {want:?}")
                })?;
            }
            (false, Err(_)) => {}
            (true, Err(e)) => return Err(format!("case {case}: {e}")),
            (false, Ok(_)) => return Err(format!("case {case}: selected despite a label with no support")),
        }

        // positive rescaling of every vector leaves the selection unchanged
        let scale = |v: &[f64], rng: &mut Rng| -> Vec<f64> {
            let c = 1e-3 + 1e3 * rng.unit();
            v.iter().map(|x| x * c).collect()
        };
        let sq = scale(&qv, &mut rng);
        let ss: Vec<Vec<f64>> = svs.iter().map(|v| scale(v, &mut rng)).collect();
        let refs: Vec<&[f64]> = svs.iter().map(Vec::as_slice).collect();
        let scaled_refs: Vec<&[f64]> = ss.iter().map(Vec::as_slice).collect();
        let base = select_with_embeddings(&query, &qv, &support, &refs, &space);
        let scaled = select_with_embeddings(&query, &sq, &support, &scaled_refs, &space);
        if let (Ok(a), Ok(b)) = (base, scaled) {
            for ((ia, ra), (ib, rb)) in a.iter().zip(&b) {
                ensure(ia.id == ib.id, || format!("case {case}: rescaling changed a pick"))?;
                ensure((ra.score - rb.score).abs() < 1e-9, || {
                    format!("case {case}: cosine moved")
                })?;
            }
            rescale_checks += 1;
        }
    }
    Ok(format!(
        "200 support sets match brute force; scale invariance held on {rescale_checks}"
    ))
}

// ---------------------------------------------------------------------------
// Metrics

fn metrics() -> Outcome {
    let ids = ["a", "b", "c", "d"];
    let gold: Labeling = ids
        .iter()
        .zip(["A", "A", "A", "B"])
        .map(|(i, l)| (i.to_string(), l.to_string()))
        .collect();
    let pred: Labeling = ids
        .iter()
        .zip(["A", "A", "B", "B"])
        .map(|(i, l)| (i.to_string(), l.to_string()))
        .collect();
    let space = LabelSpace::new(Grain::Coarse, [("A", "a"), ("B", "b")]).unwrap();
    let f1 = weighted_f1(&pred, &gold, &space).map_err(|e| e.to_string())?;
    let acc = accuracy(&pred, &gold).map_err(|e| e.to_string())?;
    ensure((f1 - 0.76667).abs() <= WEIGHTED_F1_TOL, || format!("weighted F1 {f1}"))?;
    ensure(acc == 0.75, || format!("accuracy {acc}"))?;
    let run = |a: f64| RunResult {
        seed: 0,
        repeat_index: 0,
        accuracy: a,
        weighted_f1: a,
        predictions: Labeling::new(),
    };
    let report = aggregate(vec![run(0.6), run(0.8)]).map_err(|e| e.to_string())?;
    ensure((report.mean_acc - 0.7).abs() <= AGGREGATE_TOL, || {
        format!("mean {}", report.mean_acc)
    })?;
    ensure((report.std_acc - 0.1).abs() <= AGGREGATE_TOL, || {
        format!("std {}", report.std_acc)
    })?;
    Ok(format!(
        "weighted F1 {f1:.6}, accuracy {acc}, aggregate mean {:.4} std {:.4}",
        report.mean_acc, report.std_acc
    ))
}

// ---------------------------------------------------------------------------
// End to end

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = tmp.path().join("synthetic.jsonl");
    common::write_synthetic(&manifest, 200);
    let mut config = ExperimentConfig::new(&manifest);
    // at 1% a 200-instance pool leaves labels without any demonstration
    config.fraction = 0.1;
    config.backend = "stub:0".into();
    config.out_dir = tmp.path().join("first");

    let start = Instant::now();
    let first = run_experiment(&config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(first.runs.len() == 15, || format!("{} runs", first.runs.len()))?;
    ensure(elapsed < E2E_TIME_LIMIT, || format!("took {elapsed:?}"))?;

    config.out_dir = tmp.path().join("second");
    let second = run_experiment(&config).map_err(|e| e.to_string())?;
    ensure(first == second, || {
        "second invocation produced different metrics".into()
    })?;
    let a = std::fs::read(tmp.path().join("first/report.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(tmp.path().join("second/report.json")).map_err(|e| e.to_string())?;
    ensure(a == b, || "report.json differs between invocations".into())?;
    Ok(format!(
        "15 runs in {elapsed:.2?}; identical on rerun; acc {:.2}±{:.2}",
        100.0 * first.mean_acc,
        100.0 * first.std_acc
    ))
}

fn main() {
    let mut r = Runner { failed: Vec::new() };
    r.check("cds-allocation", cds_allocation);
    let oracle = r.check("fusion-oracle-equivalence", fusion_oracle);
    let worked = r.check("worked-fusion-values", worked_fusion);
    r.check("template-goldens", template_goldens);
    r.check("demonstration-retrieval", retrieval);
    let metrics_ok = r.check("metrics", metrics);
    r.check("end-to-end-determinism", end_to_end);
    r.check("published-results-note", || {
        ensure(oracle && worked && metrics_ok, || {
            "substitute oracle suites did not all pass".into()
        })?;
        Ok(
            "published accuracy/F1 values need a fine-tuned 355M-parameter model on licensed data and are not \
            reproduced here; the fusion and metric oracles above stand in for them"
                .into(),
        )
    });
    if !r.failed.is_empty() {
        eprintln!("{} acceptance check(s) failed: {}", r.failed.len(), r.failed.join(", "));
        std::process::exit(1);
    }
}
