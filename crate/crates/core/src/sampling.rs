//! Consistently distributed few-shot sampling.
//!
//! Counts are allocated per class (or per `(aspect, label)` cell) so the
//! few-shot split keeps the class proportions of the full training set, then
//! train and dev ids are drawn uniformly within each class.
//!
//! The generator is ChaCha8 (`rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`. Uniform indices below `n` are drawn by
//! rejection sampling on `next_u64` and each class is permuted with a
//! Fisher-Yates pass from the last position down. The first `count` ids of
//! the permutation form the train part, the next `count` the dev part.
//! Classes are visited in plan order with one generator per split.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassHistogram, DatasetManifest, Instance};
use crate::error::{Error, Result};

/// Quotas this close to an integer are treated as that integer.
const QUOTA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    LargestRemainder,
    Pinned,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "largest-remainder" => Ok(PolicyKind::LargestRemainder),
            "pinned" => Ok(PolicyKind::Pinned),
            other => Err(Error::Config(format!("unknown allocation policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AllocationPolicy {
    LargestRemainder,
    /// Counts taken verbatim from configuration, e.g. published split sizes.
    Pinned(BTreeMap<String, usize>),
}

/// A sampling stratum: a label, optionally restricted to one aspect.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stratum {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
    pub label: String,
}

impl Stratum {
    pub fn label(label: impl Into<String>) -> Self {
        Stratum {
            aspect: None,
            label: label.into(),
        }
    }

    pub fn cell(aspect: impl Into<String>, label: impl Into<String>) -> Self {
        Stratum {
            aspect: Some(aspect.into()),
            label: label.into(),
        }
    }

    pub fn matches(&self, inst: &Instance) -> bool {
        inst.label == self.label
            && match &self.aspect {
                None => true,
                Some(a) => inst.aspect.as_deref() == Some(a.as_str()),
            }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub stratum: Stratum,
    pub available: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    cells: Vec<Allocation>,
    fraction: f64,
    policy: PolicyKind,
}

impl AllocationPlan {
    pub fn cells(&self) -> &[Allocation] {
        &self.cells
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Count for a plain label stratum, or the sum over a label's cells.
    pub fn count_for_label(&self, label: &str) -> usize {
        self.cells
            .iter()
            .filter(|c| c.stratum.label == label)
            .map(|c| c.count)
            .sum()
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction.is_finite() && fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("fraction {fraction} is outside (0, 1]")))
    }
}

/// Largest-remainder apportionment of `round(fraction × Σ sizes)` units.
///
/// Every stratum is floored to its quota first; the leftover units go to the
/// largest fractional remainders, ties resolved by position.
pub fn largest_remainder(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let quotas: Vec<f64> = sizes.iter().map(|&n| fraction * n as f64).collect();
    let floors: Vec<usize> = quotas
        .iter()
        .map(|&q| {
            let r = q.round();
            if (q - r).abs() < QUOTA_EPS {
                r as usize
            } else {
                q.floor() as usize
            }
        })
        .collect();
    let total_n: usize = sizes.iter().sum();
    let target = (fraction * total_n as f64).round() as usize;
    let floored: usize = floors.iter().sum();
    let leftover = target.saturating_sub(floored);

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // stable sort keeps position order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - floors[a] as f64;
        let rb = quotas[b] - floors[b] as f64;
        rb.partial_cmp(&ra).expect("finite quotas")
    });
    let mut counts = floors;
    for &i in order.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

pub fn allocate_counts(histogram: &ClassHistogram, fraction: f64, policy: &AllocationPolicy) -> Result<AllocationPlan> {
    check_fraction(fraction)?;
    if histogram.is_empty() {
        return Err(Error::Config("empty histogram".into()));
    }
    match policy {
        AllocationPolicy::LargestRemainder => {
            let sizes: Vec<usize> = histogram.iter().map(|(_, c)| c).collect();
            let counts = largest_remainder(&sizes, fraction);
            Ok(AllocationPlan {
                cells: histogram
                    .iter()
                    .zip(counts)
                    .map(|((label, available), count)| Allocation {
                        stratum: Stratum::label(label),
                        available,
                        count,
                    })
                    .collect(),
                fraction,
                policy: PolicyKind::LargestRemainder,
            })
        }
        AllocationPolicy::Pinned(pins) => {
            if let Some(unknown) = pins.keys().find(|l| histogram.get(l).is_none()) {
                return Err(Error::Config(format!("pinned label `{unknown}` not in histogram")));
            }
            let cells = histogram
                .iter()
                .map(|(label, available)| {
                    let count = *pins
                        .get(label)
                        .ok_or_else(|| Error::Config(format!("no pinned count for label `{label}`")))?;
                    if count > available {
                        return Err(Error::Infeasible(format!(
                            "pinned {count} for `{label}` exceeds its {available} instances"
                        )));
                    }
                    Ok(Allocation {
                        stratum: Stratum::label(label),
                        available,
                        count,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AllocationPlan {
                cells,
                fraction,
                policy: PolicyKind::Pinned,
            })
        }
    }
}

/// Largest remainder over `(aspect, label)` cells, for datasets balanced on
/// aspect categories and sentiment at once.
pub fn allocate_counts_joint(cells: &[((String, String), usize)], fraction: f64) -> Result<AllocationPlan> {
    check_fraction(fraction)?;
    if cells.is_empty() {
        return Err(Error::Config("empty histogram".into()));
    }
    let sizes: Vec<usize> = cells.iter().map(|(_, n)| *n).collect();
    let counts = largest_remainder(&sizes, fraction);
    Ok(AllocationPlan {
        cells: cells
            .iter()
            .zip(counts)
            .map(|(((aspect, label), available), count)| Allocation {
                stratum: Stratum::cell(aspect, label),
                available: *available,
                count,
            })
            .collect(),
        fraction,
        policy: PolicyKind::LargestRemainder,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub seed: u64,
}

impl FewShotSplit {
    pub fn train_instances<'m>(&self, manifest: &'m DatasetManifest) -> Vec<&'m Instance> {
        pick(manifest, &self.train)
    }

    pub fn dev_instances<'m>(&self, manifest: &'m DatasetManifest) -> Vec<&'m Instance> {
        pick(manifest, &self.dev)
    }
}

fn pick<'m>(manifest: &'m DatasetManifest, ids: &[String]) -> Vec<&'m Instance> {
    let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    manifest
        .instances()
        .iter()
        .filter(|i| wanted.contains(i.id.as_str()))
        .collect()
}

struct SplitRng(ChaCha8Rng);

impl SplitRng {
    fn new(seed: u64) -> Self {
        SplitRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform integer in `0..n` by rejection.
    fn below(&mut self, n: usize) -> usize {
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Draws disjoint train and dev id sets with the planned count per stratum.
///
/// Output ids are listed in manifest order.
pub fn draw_split(manifest: &DatasetManifest, plan: &AllocationPlan, seed: u64) -> Result<FewShotSplit> {
    let mut rng = SplitRng::new(seed);
    let mut train_idx = Vec::with_capacity(plan.total());
    let mut dev_idx = Vec::with_capacity(plan.total());
    for cell in plan.cells() {
        let mut candidates: Vec<usize> = manifest
            .instances()
            .iter()
            .enumerate()
            .filter(|(_, inst)| cell.stratum.matches(inst))
            .map(|(i, _)| i)
            .collect();
        if 2 * cell.count > candidates.len() {
            return Err(Error::Infeasible(format!(
                "stratum {}{} needs {} train + {} dev but has {} instances",
                cell.stratum.label,
                cell.stratum
                    .aspect
                    .as_deref()
                    .map(|a| format!(" / aspect `{a}`"))
                    .unwrap_or_default(),
                cell.count,
                cell.count,
                candidates.len()
            )));
        }
        if cell.count == 0 {
            continue;
        }
        rng.shuffle(&mut candidates);
        train_idx.extend_from_slice(&candidates[..cell.count]);
        dev_idx.extend_from_slice(&candidates[cell.count..2 * cell.count]);
    }
    train_idx.sort_unstable();
    dev_idx.sort_unstable();
    let ids =
        |idx: Vec<usize>| -> Vec<String> { idx.into_iter().map(|i| manifest.instances()[i].id.clone()).collect() };
    Ok(FewShotSplit {
        train: ids(train_idx),
        dev: ids(dev_idx),
        seed,
    })
}
