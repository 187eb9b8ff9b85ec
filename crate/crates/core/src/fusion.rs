//! Cloze classification and multi-prompt posterior fusion.
//!
//! Each prompt yields a posterior over labels (softmax of the verbalizer
//! logits at the mask). Assuming the prompts are conditionally independent
//! given the label, Bayes' rule gives the fused posterior
//!
//! ```text
//! p(l | P1..Pn) ∝ Π_k p(l | Pk) / p(l)^(n-1)
//! ```
//!
//! evaluated in log space and renormalised per instance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSpace;
use crate::error::{Error, Result};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over an ordered label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionRecord", into = "DistributionRecord")]
pub struct LabelDistribution {
    labels: Vec<String>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DistributionRecord {
    labels: Vec<String>,
    probs: Vec<f64>,
}

impl TryFrom<DistributionRecord> for LabelDistribution {
    type Error = Error;

    fn try_from(r: DistributionRecord) -> Result<Self> {
        LabelDistribution::new(r.labels, r.probs)
    }
}

impl From<LabelDistribution> for DistributionRecord {
    fn from(d: LabelDistribution) -> Self {
        DistributionRecord {
            labels: d.labels,
            probs: d.probs,
        }
    }
}

impl LabelDistribution {
    /// Validates non-negativity and that the entries sum to one.
    pub fn new(labels: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if labels.is_empty() || labels.len() != probs.len() {
            return Err(Error::Distribution(format!(
                "{} labels for {} probabilities",
                labels.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Distribution(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Distribution(format!("probabilities sum to {sum}")));
        }
        Ok(LabelDistribution { labels, probs })
    }

    /// Normalises non-negative weights into a distribution.
    pub fn from_weights(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Distribution("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Distribution("weights sum to zero".into()));
        }
        LabelDistribution::new(labels, weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(space: &LabelSpace) -> Self {
        let n = space.len();
        LabelDistribution {
            labels: space.labels().to_vec(),
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.probs[i])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Softmax over verbalizer logits, restricted to the label words and
/// returned in label-space order.
pub fn distribution_from_scores(scores: &BTreeMap<String, f64>, space: &LabelSpace) -> Result<LabelDistribution> {
    let logits = space
        .words()
        .iter()
        .map(|w| match scores.get(w) {
            Some(v) if v.is_finite() => Ok(*v),
            Some(v) => Err(Error::Distribution(format!("non-finite logit {v} for `{w}`"))),
            None => Err(Error::Distribution(format!("no logit for verbalizer word `{w}`"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    LabelDistribution::new(space.labels().to_vec(), exps.into_iter().map(|e| e / sum).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    EmpiricalTrain,
    Uniform,
    Pinned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub probs: LabelDistribution,
    pub source: PriorSource,
}

impl PriorEstimate {
    pub fn uniform(space: &LabelSpace) -> Self {
        PriorEstimate {
            probs: LabelDistribution::uniform(space),
            source: PriorSource::Uniform,
        }
    }

    /// Add-one smoothed label frequencies of the few-shot training split.
    pub fn empirical<'a>(space: &LabelSpace, train_labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut counts = vec![1.0; space.len()];
        for label in train_labels {
            let i = space
                .index_of(label)
                .ok_or_else(|| Error::Distribution(format!("training label `{label}` not in label space")))?;
            counts[i] += 1.0;
        }
        Ok(PriorEstimate {
            probs: LabelDistribution::from_weights(space.labels().to_vec(), counts)?,
            source: PriorSource::EmpiricalTrain,
        })
    }

    pub fn pinned(space: &LabelSpace, probs: Vec<f64>) -> Result<Self> {
        Ok(PriorEstimate {
            probs: LabelDistribution::new(space.labels().to_vec(), probs)?,
            source: PriorSource::Pinned,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    Empirical,
    Uniform,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(PriorMode::Empirical),
            "uniform" => Ok(PriorMode::Uniform),
            other => Err(Error::Config(format!("unknown prior mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Probabilistic,
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilistic" => Ok(FusionMode::Probabilistic),
            "average" => Ok(FusionMode::Average),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

fn check_same_labels(dists: &[LabelDistribution], labels: &[String]) -> Result<()> {
    if let Some(d) = dists.iter().find(|d| d.labels != labels) {
        return Err(Error::Distribution(format!(
            "label sets differ: {:?} vs {:?}",
            d.labels, labels
        )));
    }
    Ok(())
}

/// Probabilistic fusion of `n` prompt posteriors under `prior`.
pub fn fuse(dists: &[LabelDistribution], prior: &PriorEstimate) -> Result<LabelDistribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Distribution("nothing to fuse".into()))?;
    let labels = first.labels.clone();
    check_same_labels(dists, &labels)?;
    check_same_labels(std::slice::from_ref(&prior.probs), &labels)?;
    if let Some(i) = prior.probs.probs.iter().position(|p| *p <= 0.0) {
        return Err(Error::Distribution(format!("prior is zero for label `{}`", labels[i])));
    }

    let n = dists.len() as f64;
    let log_scores: Vec<f64> = (0..labels.len())
        .map(|i| {
            let evidence: f64 = dists.iter().map(|d| d.probs[i].max(PROB_FLOOR).ln()).sum();
            evidence - (n - 1.0) * prior.probs.probs[i].max(PROB_FLOOR).ln()
        })
        .collect();
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_scores.iter().map(|s| (s - max).exp()).collect();
    LabelDistribution::from_weights(labels, weights)
}

/// Arithmetic mean of the posteriors.
pub fn average_fuse(dists: &[LabelDistribution]) -> Result<LabelDistribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Distribution("nothing to fuse".into()))?;
    check_same_labels(dists, &first.labels)?;
    let n = dists.len() as f64;
    let means = (0..first.len())
        .map(|i| dists.iter().map(|d| d.probs[i]).sum::<f64>() / n)
        .collect();
    LabelDistribution::from_weights(first.labels.clone(), means)
}

pub fn fuse_with(mode: FusionMode, dists: &[LabelDistribution], prior: &PriorEstimate) -> Result<LabelDistribution> {
    match mode {
        FusionMode::Probabilistic => fuse(dists, prior),
        FusionMode::Average => average_fuse(dists),
    }
}

/// Argmax label; the earliest label wins ties.
pub fn predict(dist: &LabelDistribution) -> &str {
    let mut best = 0;
    for (i, p) in dist.probs.iter().enumerate() {
        if *p > dist.probs[best] {
            best = i;
        }
    }
    &dist.labels[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Grain;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    fn dist(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(labels(p.len()), p.to_vec()).unwrap()
    }

    fn prior(p: &[f64]) -> PriorEstimate {
        PriorEstimate {
            probs: dist(p),
            source: PriorSource::Pinned,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_values() {
        let space = LabelSpace::sentiment3(Grain::Coarse);
        let scores: BTreeMap<String, f64> = [("terrible", 1.0), ("okay", 2.0), ("great", 3.0)]
            .map(|(w, v)| (w.to_string(), v))
            .into();
        let d = distribution_from_scores(&scores, &space).unwrap();
        // independent: e^k / (e + e^2 + e^3)
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let oracle = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        assert!(close(d.probs(), &oracle, 1e-12));
        assert!(close(d.probs(), &[0.09003057, 0.24472847, 0.66524096], 1e-6));

        let shifted: BTreeMap<String, f64> = scores.iter().map(|(k, v)| (k.clone(), v + 100.0)).collect();
        let ds = distribution_from_scores(&shifted, &space).unwrap();
        assert!(close(d.probs(), ds.probs(), 1e-9));

        let equal: BTreeMap<String, f64> = space.words().iter().map(|w| (w.clone(), 0.5)).collect();
        let du = distribution_from_scores(&equal, &space).unwrap();
        assert!(close(du.probs(), &[1.0 / 3.0; 3], 1e-12));
    }

    #[test]
    fn softmax_errors() {
        let space = LabelSpace::masad();
        let missing: BTreeMap<String, f64> = [("terrible".to_string(), 0.0)].into();
        assert!(distribution_from_scores(&missing, &space).is_err());
        let nan: BTreeMap<String, f64> = [("terrible".to_string(), f64::NAN), ("great".to_string(), 0.0)].into();
        assert!(distribution_from_scores(&nan, &space).is_err());
    }

    #[test]
    fn fusion_worked_examples() {
        let d = dist(&[0.25, 0.5, 0.25]);
        let single = fuse(std::slice::from_ref(&d), &prior(&[0.7, 0.2, 0.1])).unwrap();
        assert!(close(single.probs(), d.probs(), 1e-9));

        let fused = fuse(&[dist(&[0.6, 0.4]), dist(&[0.3, 0.7])], &prior(&[0.5, 0.5])).unwrap();
        assert!(close(fused.probs(), &[0.18 / 0.46, 0.28 / 0.46], 1e-12));
        assert!(close(fused.probs(), &[0.3913, 0.6087], 1e-4));
        assert_eq!(predict(&fused), "L1");

        let fused = fuse(&[dist(&[0.6, 0.4]), dist(&[0.6, 0.4])], &prior(&[0.8, 0.2])).unwrap();
        assert!(close(fused.probs(), &[0.36, 0.64], 1e-12));
    }

    #[test]
    fn fusion_errors() {
        assert!(fuse(&[], &prior(&[0.5, 0.5])).is_err());
        assert!(fuse(&[dist(&[0.5, 0.5])], &prior(&[1.0, 0.0])).is_err());
        assert!(fuse(&[dist(&[0.5, 0.5]), dist(&[0.2, 0.3, 0.5])], &prior(&[0.5, 0.5])).is_err());
        assert!(average_fuse(&[]).is_err());
    }

    #[test]
    fn average_examples() {
        let a = average_fuse(&[dist(&[0.6, 0.4]), dist(&[0.3, 0.7])]).unwrap();
        assert!(close(a.probs(), &[0.45, 0.55], 1e-12));
        let b = average_fuse(&[dist(&[1.0, 0.0]), dist(&[0.0, 1.0])]).unwrap();
        assert!(close(b.probs(), &[0.5, 0.5], 1e-12));
        let d = dist(&[0.2, 0.3, 0.5]);
        let c = average_fuse(&[d.clone(), d.clone(), d.clone()]).unwrap();
        assert!(close(c.probs(), d.probs(), 1e-12));
    }

    #[test]
    fn prediction_and_ties() {
        assert_eq!(predict(&dist(&[0.2, 0.3, 0.5])), "L2");
        assert_eq!(predict(&dist(&[0.5, 0.5])), "L0");
    }

    #[test]
    fn empirical_prior_is_smoothed() {
        let space = LabelSpace::sentiment3(Grain::Coarse);
        let p = PriorEstimate::empirical(&space, ["Positive", "Positive", "Negative"]).unwrap();
        assert!(close(p.probs.probs(), &[2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0], 1e-12));
        assert!(PriorEstimate::empirical(&space, ["Meh"]).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(LabelDistribution::new(labels(2), vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(labels(2), vec![-0.1, 1.1]).is_err());
        assert!(LabelDistribution::new(labels(2), vec![0.5]).is_err());
        let json = r#"{"labels":["a","b"],"probs":[0.9,0.9]}"#;
        assert!(serde_json::from_str::<LabelDistribution>(json).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-3f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    fn case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (2usize..=7, 1usize..=3)
            .prop_flat_map(|(n_labels, n)| (proptest::collection::vec(simplex(n_labels), n), simplex(n_labels)))
    }

    proptest! {
        #[test]
        fn permutation_invariant((ds, pr) in case(), rot in 0usize..3) {
            let dists: Vec<_> = ds.iter().map(|p| dist(p)).collect();
            let mut rotated = dists.clone();
            rotated.rotate_left(rot % dists.len());
            let a = fuse(&dists, &prior(&pr)).unwrap();
            let b = fuse(&rotated, &prior(&pr)).unwrap();
            prop_assert!(close(a.probs(), b.probs(), 1e-12));
        }

        #[test]
        fn log_space_matches_direct_product((ds, pr) in case()) {
            let dists: Vec<_> = ds.iter().map(|p| dist(p)).collect();
            let fused = fuse(&dists, &prior(&pr)).unwrap();
            let n = ds.len() as i32;
            let raw: Vec<f64> = (0..pr.len())
                .map(|i| ds.iter().map(|d| d[i]).product::<f64>() / pr[i].powi(n - 1))
                .collect();
            let z: f64 = raw.iter().sum();
            let direct: Vec<f64> = raw.iter().map(|r| r / z).collect();
            prop_assert!(close(fused.probs(), &direct, 1e-9));
        }

        #[test]
        fn uniform_prior_is_normalized_product((ds, _pr) in case()) {
            let k = ds[0].len();
            let dists: Vec<_> = ds.iter().map(|p| dist(p)).collect();
            let fused = fuse(&dists, &prior(&vec![1.0 / k as f64; k])).unwrap();
            let raw: Vec<f64> = (0..k).map(|i| ds.iter().map(|d| d[i]).product()).collect();
            let z: f64 = raw.iter().sum();
            let product: Vec<f64> = raw.iter().map(|r| r / z).collect();
            prop_assert!(close(fused.probs(), &product, 1e-9));
        }

        #[test]
        fn raising_one_posterior_never_lowers_unnormalized_score(
            (ds, pr) in case(), label in 0usize..7, bump in 0.0f64..0.5,
        ) {
            let k = pr.len();
            let l = label % k;
            let n = ds.len() as i32;
            let score = |ds: &[Vec<f64>]| ds.iter().map(|d| d[l]).product::<f64>() / pr[l].powi(n - 1);
            let mut raised = ds.clone();
            raised[0][l] += bump;
            prop_assert!(score(&raised) >= score(&ds));
        }

        #[test]
        fn matches_exact_bayes_on_conditionally_independent_joint(
            pr in simplex(3),
            like1 in proptest::collection::vec(simplex(4), 3),
            like2 in proptest::collection::vec(simplex(4), 3),
            o1 in 0usize..4,
            o2 in 0usize..4,
        ) {
            // joint p(l, x1, x2) = p(l) p(x1 | l) p(x2 | l), enumerated exactly
            let k = pr.len();
            let joint = |l: usize, a: usize, b: usize| pr[l] * like1[l][a] * like2[l][b];
            let post1: Vec<f64> = (0..k).map(|l| (0..4).map(|b| joint(l, o1, b)).sum()).collect();
            let post2: Vec<f64> = (0..k).map(|l| (0..4).map(|a| joint(l, a, o2)).sum()).collect();
            let exact: Vec<f64> = (0..k).map(|l| joint(l, o1, o2)).collect();
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let fused = fuse(
                &[dist(&norm(post1)), dist(&norm(post2))],
                &prior(&pr),
            ).unwrap();
            prop_assert!(close(fused.probs(), &norm(exact), 1e-9));
        }

        #[test]
        fn predict_invariant_under_monotone_transform(p in simplex(5)) {
            let d = dist(&p);
            let transformed: Vec<f64> = p.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let t = LabelDistribution::from_weights(labels(5), transformed).unwrap();
            prop_assert_eq!(predict(&d), predict(&t));
        }
    }
}
