//! Predicate recall for predicate classification with ground-truth pairs.
//!
//! A frame contributes every `(pair, predicate)` candidate with its score.
//! Candidates are ranked by score descending, ties by ascending class index
//! and then pair index. R@K is the matched fraction of a frame's
//! ground-truth triplets within the top K, averaged over frames with ground
//! truth. mR@K pools matches per predicate class over all frames and
//! averages the per-class recalls over classes present in ground truth.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// At most one predicate per (pair, relation type) enters the ranking.
    With,
    No,
}

impl FromStr for Constraint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "with" => Ok(Self::With),
            "no" => Ok(Self::No),
            other => Err(format!("unknown constraint mode {other:?} (with|no)")),
        }
    }
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::With => "with",
            Self::No => "no",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pair: usize,
    /// Global predicate index.
    pub class: usize,
    /// Relation type the class belongs to.
    pub group: usize,
    pub score: f64,
}

/// Scored candidates and ground truth `(pair, class)` for one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub candidates: Vec<Candidate>,
    pub truth: BTreeSet<(usize, usize)>,
}

/// Total order: higher score first, then lower class, then lower pair.
fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class.cmp(&b.class))
        .then(a.pair.cmp(&b.pair))
}

/// Heap entry whose `Ord` puts the worst-ranked candidate on top.
struct Worst(Candidate);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

fn admitted(frame: &ScoredFrame, constraint: Constraint) -> Vec<Candidate> {
    match constraint {
        Constraint::No => frame.candidates.clone(),
        Constraint::With => {
            let mut best: std::collections::BTreeMap<(usize, usize), Candidate> =
                Default::default();
            for c in &frame.candidates {
                best.entry((c.pair, c.group))
                    .and_modify(|b| {
                        if rank_order(c, b) == Ordering::Less {
                            *b = *c;
                        }
                    })
                    .or_insert(*c);
            }
            best.into_values().collect()
        }
    }
}

/// The `k` best-ranked admitted candidates, best first.
pub fn top_k(frame: &ScoredFrame, k: usize, constraint: Constraint) -> Vec<Candidate> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for c in admitted(frame, constraint) {
        heap.push(Worst(c));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut out: Vec<Candidate> = heap.into_iter().map(|w| w.0).collect();
    out.sort_by(rank_order);
    out
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    Ok(())
}

fn hits(frame: &ScoredFrame, k: usize, constraint: Constraint) -> BTreeSet<(usize, usize)> {
    top_k(frame, k, constraint)
        .into_iter()
        .map(|c| (c.pair, c.class))
        .filter(|key| frame.truth.contains(key))
        .collect()
}

/// Mean over frames with ground truth of `matched / |truth|`.
pub fn recall_at_k(frames: &[ScoredFrame], k: usize, constraint: Constraint) -> Result<f64> {
    check_k(k)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for f in frames.iter().filter(|f| !f.truth.is_empty()) {
        total += hits(f, k, constraint).len() as f64 / f.truth.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::contract("no frame carries ground truth"));
    }
    Ok(total / counted as f64)
}

/// Per-class recall (`None` for classes absent from ground truth) and
/// their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRecall {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
    pub matched: Vec<u64>,
    pub truth: Vec<u64>,
}

pub fn mean_recall_at_k(
    frames: &[ScoredFrame],
    k: usize,
    constraint: Constraint,
    classes: usize,
) -> Result<MeanRecall> {
    check_k(k)?;
    let mut matched = vec![0u64; classes];
    let mut truth = vec![0u64; classes];
    for f in frames {
        for &(_, c) in &f.truth {
            if c >= classes {
                return Err(Error::contract(format!(
                    "ground-truth class {c} out of range for {classes} classes"
                )));
            }
            truth[c] += 1;
        }
        for (_, c) in hits(f, k, constraint) {
            matched[c] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = matched
        .iter()
        .zip(&truth)
        .map(|(&m, &t)| (t > 0).then(|| m as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::contract("no frame carries ground truth"));
    }
    Ok(MeanRecall {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        matched,
        truth,
    })
}

/// Mean recall of the most and least frequent classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub head_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
    pub head: Option<f64>,
    pub tail: Option<f64>,
}

pub const HEAD_MASS: f64 = 0.3;
pub const TAIL_SHARE: f64 = 0.3;

/// Head: the fewest most-frequent classes holding at least 30% of the
/// frequency mass. Tail: the least-frequent 30% of classes (at least one).
/// Bucket means skip classes without a recall.
pub fn frequency_stratified_report(recalls: &[Option<f64>], freqs: &[f64]) -> Result<BucketReport> {
    if recalls.len() != freqs.len() || freqs.is_empty() {
        return Err(Error::contract(format!(
            "{} recalls for {} class frequencies",
            recalls.len(),
            freqs.len()
        )));
    }
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[b].total_cmp(&freqs[a]).then(a.cmp(&b)));
    let total: f64 = freqs.iter().sum();
    let mut head_classes = Vec::new();
    let mut mass = 0.0;
    for &c in &order {
        head_classes.push(c);
        mass += freqs[c];
        if mass >= HEAD_MASS * total {
            break;
        }
    }
    let n_tail = ((TAIL_SHARE * freqs.len() as f64).ceil() as usize).max(1);
    let tail_classes: Vec<usize> = order[order.len() - n_tail..].to_vec();
    let mean = |cs: &[usize]| {
        let v: Vec<f64> = cs.iter().filter_map(|&c| recalls[c]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(BucketReport {
        head: mean(&head_classes),
        tail: mean(&tail_classes),
        head_classes,
        tail_classes,
    })
}

/// Metrics at one K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
    pub per_class: Vec<Option<f64>>,
    pub buckets: BucketReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub constraint: Constraint,
    pub class_frequency: Vec<f64>,
    pub at: Vec<RecallAtK>,
}

pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

pub fn metrics_report(
    frames: &[ScoredFrame],
    ks: &[usize],
    constraint: Constraint,
    class_frequency: &[f64],
) -> Result<MetricsReport> {
    let at = ks
        .iter()
        .map(|&k| {
            let mr = mean_recall_at_k(frames, k, constraint, class_frequency.len())?;
            let buckets = frequency_stratified_report(&mr.per_class, class_frequency)?;
            Ok(RecallAtK {
                k,
                recall: recall_at_k(frames, k, constraint)?,
                mean_recall: mr.mean,
                per_class: mr.per_class,
                buckets,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        constraint,
        class_frequency: class_frequency.to_vec(),
        at,
    })
}

impl MetricsReport {
    pub fn mean_recall(&self, k: usize) -> Option<f64> {
        self.at.iter().find(|a| a.k == k).map(|a| a.mean_recall)
    }

    /// Rows `R`, `mR`, `head_mR`, `tail_mR`; one column per K.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for a in &self.at {
            s.push_str(&format!(",@{}", a.k));
        }
        s.push('\n');
        let fmt = |v: Option<f64>| v.map_or(String::from("nan"), |x| format!("{x:.6}"));
        let rows: [(&str, fn(&RecallAtK) -> Option<f64>); 4] = [
            ("R", |a| Some(a.recall)),
            ("mR", |a| Some(a.mean_recall)),
            ("head_mR", |a| a.buckets.head),
            ("tail_mR", |a| a.buckets.tail),
        ];
        for (name, get) in rows {
            s.push_str(name);
            for a in &self.at {
                s.push(',');
                s.push_str(&fmt(get(a)));
            }
            s.push('\n');
        }
        s
    }
}
