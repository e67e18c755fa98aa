#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, Output};

use fremure::metrics::{Candidate, Constraint, ScoredFrame};

pub fn fremure(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fremure"))
        .args(args)
        .env("FREMURE_THREADS", "1")
        .output()
        .expect("spawn fremure")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes `text` to a fresh `config-<n>.txt` inside `dir`.
pub fn write_config(dir: &Path, text: &str) -> String {
    let n = std::fs::read_dir(dir).map_or(0, |d| d.count());
    let path = dir.join(format!("config-{n}.txt"));
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

/// Small enough for a debug-speed end-to-end run.
pub const TINY: &str = "\
[data]
train_clips = 6
test_clips = 3
frames = 3
pairs = 2
[model]
dim = 8
heads = 2
ffn = 8
[bayes]
eval_samples = 4
[train]
epochs = 2
";

/// Hit set by a full sort: score descending, then class, then pair; under
/// the constraint only the first candidate of each (pair, group) counts.
pub fn oracle_hits(
    frame: &ScoredFrame,
    k: usize,
    constraint: Constraint,
) -> BTreeSet<(usize, usize)> {
    let mut sorted: Vec<Candidate> = frame.candidates.clone();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class.cmp(&b.class))
            .then(a.pair.cmp(&b.pair))
    });
    let mut seen = BTreeSet::new();
    let mut kept = Vec::new();
    for c in sorted {
        if constraint == Constraint::With && !seen.insert((c.pair, c.group)) {
            continue;
        }
        kept.push((c.pair, c.class));
    }
    kept.into_iter()
        .take(k)
        .filter(|key| frame.truth.contains(key))
        .collect()
}

/// Frame-averaged recall, in input order.
pub fn oracle_recall(frames: &[ScoredFrame], k: usize, constraint: Constraint) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for f in frames.iter().filter(|f| !f.truth.is_empty()) {
        total += oracle_hits(f, k, constraint).len() as f64 / f.truth.len() as f64;
        n += 1;
    }
    total / n as f64
}

/// Matched and ground-truth counts per class.
pub fn oracle_class_counts(
    frames: &[ScoredFrame],
    k: usize,
    constraint: Constraint,
    classes: usize,
) -> (Vec<u64>, Vec<u64>) {
    let mut matched = vec![0u64; classes];
    let mut truth = vec![0u64; classes];
    for f in frames {
        for &(_, c) in &f.truth {
            truth[c] += 1;
        }
        for (_, c) in oracle_hits(f, k, constraint) {
            matched[c] += 1;
        }
    }
    (matched, truth)
}

pub fn oracle_mean_recall(
    frames: &[ScoredFrame],
    k: usize,
    constraint: Constraint,
    classes: usize,
) -> f64 {
    let (matched, truth) = oracle_class_counts(frames, k, constraint, classes);
    let recalls: Vec<f64> = matched
        .iter()
        .zip(&truth)
        .filter(|(_, &t)| t > 0)
        .map(|(&m, &t)| m as f64 / t as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Rebuilds ranking frames from a labelled JSONL split and the prediction
/// lines written by `eval`, without going through the library's grouping.
pub fn frames_from_files(data: &Path, predictions: &Path) -> (Vec<ScoredFrame>, usize) {
    let read = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let key = |v: &serde_json::Value| {
        ["clip", "frame", "subj", "obj"].map(|f| v[f].as_u64().unwrap() as usize)
    };
    let labels: BTreeMap<[usize; 4], serde_json::Value> =
        read(data).into_iter().map(|v| (key(&v), v)).collect();
    let mut grouped: BTreeMap<(usize, usize), Vec<serde_json::Value>> = BTreeMap::new();
    for p in read(predictions) {
        let k = key(&p);
        grouped.entry((k[0], k[1])).or_default().push(p);
    }
    let mut classes = 0;
    let mut frames = Vec::new();
    for mut pairs in grouped.into_values() {
        pairs.sort_by_key(|p| key(p));
        let mut frame = ScoredFrame::default();
        for (pair, p) in pairs.iter().enumerate() {
            let label = &labels[&key(p)];
            let groups = ["attn_scores", "spat_scores", "cont_scores"].map(|f| {
                p[f].as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x.as_f64().unwrap())
                    .collect::<Vec<_>>()
            });
            let mut offset = 0;
            for (group, scores) in groups.iter().enumerate() {
                for (c, &score) in scores.iter().enumerate() {
                    frame.candidates.push(Candidate {
                        pair,
                        class: offset + c,
                        group,
                        score,
                    });
                }
                offset += scores.len();
            }
            classes = offset;
            let na = groups[0].len();
            let ns = groups[1].len();
            frame
                .truth
                .insert((pair, label["attn"].as_u64().unwrap() as usize));
            for (field, base) in [("spat", na), ("cont", na + ns)] {
                for (c, bit) in label[field].as_array().unwrap().iter().enumerate() {
                    if bit.as_u64().unwrap() == 1 {
                        frame.truth.insert((pair, base + c));
                    }
                }
            }
        }
        frames.push(frame);
    }
    (frames, classes)
}
