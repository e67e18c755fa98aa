//! Synthetic long-tail relation data and its JSONL form.
//!
//! Every clip follows a fixed set of subject–object pair tracks over a run
//! of frames. Each track draws Zipf-distributed labels for the three
//! relation types and keeps them from frame to frame, redrawing with
//! probability `drift`. A record's feature is the mean of the prototypes of
//! its labels plus Gaussian noise; emitted labels are then replaced with a
//! fresh Zipf draw at rate `flip_rate`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqgate::{compute_frequencies, FrequencyPrior, DEFAULT_FREQ_EPS};
use crate::numcore::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub attention: usize,
    pub spatial: usize,
    pub contact: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.attention + self.spatial + self.contact
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.attention, self.spatial, self.contact]
    }

    /// Offset of each type's first class in the global predicate index.
    pub fn offsets(&self) -> [usize; 3] {
        [0, self.attention, self.attention + self.spatial]
    }
}

impl Default for ClassCounts {
    fn default() -> Self {
        Self {
            attention: 10,
            spatial: 6,
            contact: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: ClassCounts,
    /// Zipf exponent: class `k` (0-based) has weight `(k + 1)^(−s)`.
    pub zipf_s: f64,
    pub feat_dim: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub pairs: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub flip_rate: f64,
    /// Probability that a track redraws its labels at a new frame.
    pub drift: f64,
    /// Upper bound on positives per multi-label type.
    pub max_positives: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: ClassCounts::default(),
            zipf_s: 1.5,
            feat_dim: 32,
            train_clips: 100,
            test_clips: 25,
            frames: 5,
            pairs: 4,
            noise: 1.0,
            flip_rate: 0.05,
            drift: 0.2,
            max_positives: 2,
        }
    }
}

impl SyntheticConfig {
    /// Every offending field, by config key.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut positive = |key: &str, v: usize| {
            if v == 0 {
                bad.push(format!("data.{key} must be at least 1"));
            }
        };
        positive("attention_classes", self.classes.attention);
        positive("spatial_classes", self.classes.spatial);
        positive("contact_classes", self.classes.contact);
        positive("feat_dim", self.feat_dim);
        positive("train_clips", self.train_clips);
        positive("test_clips", self.test_clips);
        positive("frames", self.frames);
        positive("pairs", self.pairs);
        positive("max_positives", self.max_positives);
        if !(self.zipf_s > 0.0 && self.zipf_s.is_finite()) {
            bad.push("data.zipf_s must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            bad.push("data.noise must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.flip_rate) {
            bad.push("data.flip_rate must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.drift) {
            bad.push("data.drift must lie in [0, 1]".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// One labelled subject–object pair in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub clip: usize,
    pub frame: usize,
    pub subj: usize,
    pub obj: usize,
    pub feat: Vec<f64>,
    /// Attention class.
    pub attn: usize,
    /// Spatial bit-vector.
    pub spat: Vec<u8>,
    /// Contact bit-vector.
    pub cont: Vec<u8>,
}

impl TripletRecord {
    pub fn check(&self, classes: &ClassCounts, feat_dim: usize) -> Result<()> {
        let ctx = || {
            format!(
                "record clip {} frame {} pair ({}, {})",
                self.clip, self.frame, self.subj, self.obj
            )
        };
        if self.attn >= classes.attention {
            return Err(Error::parse(
                ctx(),
                format!("attention label {} out of range", self.attn),
            ));
        }
        if self.spat.len() != classes.spatial || self.cont.len() != classes.contact {
            return Err(Error::parse(
                ctx(),
                "label bit-vector length differs from the class count",
            ));
        }
        if self.spat.iter().chain(&self.cont).any(|&b| b > 1) {
            return Err(Error::parse(ctx(), "label bit-vectors must hold 0 or 1"));
        }
        if self.feat.len() != feat_dim {
            return Err(Error::parse(
                ctx(),
                format!(
                    "feature has {} entries, expected {feat_dim}",
                    self.feat.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn spatial_targets(&self) -> Vec<f64> {
        self.spat.iter().map(|&b| b as f64).collect()
    }

    pub fn contact_targets(&self) -> Vec<f64> {
        self.cont.iter().map(|&b| b as f64).collect()
    }
}

/// Per-type priors estimated from label counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationPriors {
    pub attention: FrequencyPrior,
    pub spatial: FrequencyPrior,
    pub contact: FrequencyPrior,
}

impl RelationPriors {
    pub fn get(&self, r: usize) -> &FrequencyPrior {
        [&self.attention, &self.spatial, &self.contact][r]
    }

    /// Joint prior over all predicate classes, attention first.
    pub fn joint(&self) -> FrequencyPrior {
        FrequencyPrior::concat(&[&self.attention, &self.spatial, &self.contact])
            .expect("non-empty priors")
    }

    pub fn uniform(classes: &ClassCounts) -> Self {
        Self {
            attention: FrequencyPrior::uniform(classes.attention, DEFAULT_FREQ_EPS),
            spatial: FrequencyPrior::uniform(classes.spatial, DEFAULT_FREQ_EPS),
            contact: FrequencyPrior::uniform(classes.contact, DEFAULT_FREQ_EPS),
        }
    }

    /// Counts from `records`; a count of zero everywhere falls back to one
    /// observation per class.
    pub fn from_records(records: &[TripletRecord], classes: &ClassCounts) -> Self {
        let mut counts = [
            vec![0u64; classes.attention],
            vec![0u64; classes.spatial],
            vec![0u64; classes.contact],
        ];
        for r in records {
            if r.attn < classes.attention {
                counts[0][r.attn] += 1;
            }
            for (c, &b) in r.spat.iter().enumerate().take(classes.spatial) {
                counts[1][c] += b as u64;
            }
            for (c, &b) in r.cont.iter().enumerate().take(classes.contact) {
                counts[2][c] += b as u64;
            }
        }
        let prior = |c: &[u64]| {
            compute_frequencies(c, DEFAULT_FREQ_EPS)
                .unwrap_or_else(|_| FrequencyPrior::uniform(c.len(), DEFAULT_FREQ_EPS))
        };
        Self {
            attention: prior(&counts[0]),
            spatial: prior(&counts[1]),
            contact: prior(&counts[2]),
        }
    }

    pub fn class_counts(&self) -> ClassCounts {
        ClassCounts {
            attention: self.attention.num_classes(),
            spatial: self.spatial.num_classes(),
            contact: self.contact.num_classes(),
        }
    }

    /// Global frequency vector, attention first.
    pub fn global_frequencies(&self) -> Vec<f64> {
        self.joint().f
    }
}

/// Train and test splits from one generator run.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<TripletRecord>,
    pub test: Vec<TripletRecord>,
    pub priors: RelationPriors,
}

/// Cumulative Zipf weights over `n` classes.
pub fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = w
        .iter()
        .map(|v| {
            acc += v / total;
            acc
        })
        .collect();
    *cdf.last_mut().expect("n >= 1") = 1.0;
    cdf
}

/// Zipf probabilities `k^(−s) / Σ j^(−s)` for `k = 1..=n`.
pub fn zipf_pmf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
struct TrackLabels {
    attn: usize,
    spat: Vec<usize>,
    cont: Vec<usize>,
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    cdf: [Vec<f64>; 3],
    prototypes: [Vec<Vec<f64>>; 3],
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SyntheticConfig, seed: u64) -> Self {
        let counts = cfg.classes.as_array();
        let mut rng = Rng::with_stream(seed, 10);
        let prototypes = counts.map(|n| (0..n).map(|_| rng.normals(cfg.feat_dim)).collect());
        Self {
            cfg,
            cdf: counts.map(|n| zipf_cdf(n, cfg.zipf_s)),
            prototypes,
        }
    }

    /// Distinct Zipf draws; the count is uniform in `1..=max_positives`
    /// (capped by the class count).
    fn positives(&self, r: usize, rng: &mut Rng) -> Vec<usize> {
        let n = self.cdf[r].len();
        let want = 1 + rng.below(self.cfg.max_positives.min(n));
        let mut set = Vec::with_capacity(want);
        while set.len() < want {
            let c = rng.from_cdf(&self.cdf[r]);
            if !set.contains(&c) {
                set.push(c);
            }
        }
        set.sort_unstable();
        set
    }

    fn draw(&self, rng: &mut Rng) -> TrackLabels {
        TrackLabels {
            attn: rng.from_cdf(&self.cdf[0]),
            spat: self.positives(1, rng),
            cont: self.positives(2, rng),
        }
    }

    fn feature(&self, labels: &TrackLabels, rng: &mut Rng) -> Vec<f64> {
        let protos: Vec<&Vec<f64>> = std::iter::once(&self.prototypes[0][labels.attn])
            .chain(labels.spat.iter().map(|&c| &self.prototypes[1][c]))
            .chain(labels.cont.iter().map(|&c| &self.prototypes[2][c]))
            .collect();
        let m = protos.len() as f64;
        (0..self.cfg.feat_dim)
            .map(|i| protos.iter().map(|p| p[i]).sum::<f64>() / m + self.cfg.noise * rng.normal())
            .collect()
    }

    fn clip(&self, clip: usize, rng: &mut Rng, out: &mut Vec<TripletRecord>) {
        let c = &self.cfg.classes;
        let mut tracks: Vec<TrackLabels> = (0..self.cfg.pairs).map(|_| self.draw(rng)).collect();
        for frame in 0..self.cfg.frames {
            for (p, track) in tracks.iter_mut().enumerate() {
                if frame > 0 && rng.bernoulli(self.cfg.drift) {
                    *track = self.draw(rng);
                }
                let feat = self.feature(track, rng);
                let mut emitted = track.clone();
                if rng.bernoulli(self.cfg.flip_rate) {
                    emitted = self.draw(rng);
                }
                let bits = |n: usize, on: &[usize]| (0..n).map(|k| on.contains(&k) as u8).collect();
                out.push(TripletRecord {
                    clip,
                    frame,
                    subj: 0,
                    obj: p + 1,
                    feat,
                    attn: emitted.attn,
                    spat: bits(c.spatial, &emitted.spat),
                    cont: bits(c.contact, &emitted.cont),
                });
            }
        }
    }
}

/// Deterministic given `(cfg, seed)`. Priors come from the training split.
pub fn generate_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let generator = Generator::new(cfg, seed);
    let split = |clips: usize, stream: u64| {
        let mut rng = Rng::with_stream(seed, stream);
        let mut out = Vec::with_capacity(clips * cfg.frames * cfg.pairs);
        for clip in 0..clips {
            generator.clip(clip, &mut rng, &mut out);
        }
        out
    };
    let train = split(cfg.train_clips, 11);
    let test = split(cfg.test_clips, 12);
    let priors = RelationPriors::from_records(&train, &cfg.classes);
    Ok(SyntheticDataset {
        train,
        test,
        priors,
    })
}

/// Class counts of [`anti_correlated_records`].
pub const ANTI_CORRELATED_CLASSES: ClassCounts = ClassCounts {
    attention: 2,
    spatial: 2,
    contact: 1,
};

/// Width of the features in [`anti_correlated_records`].
pub const ANTI_CORRELATED_FEAT_DIM: usize = 4;

/// A gradient-conflict witness: attention class `a = [x₀ > 0]` and the
/// single active spatial class is `1 − a`, so the two relation types ask for
/// opposite scores on identical evidence. Contact is a coin flip.
///
/// Pair it with tied linear heads (`tie_head_init`) so both heads start
/// from the same near-zero logits.
pub fn anti_correlated_records(
    clips: usize,
    frames: usize,
    pairs: usize,
    seed: u64,
) -> Vec<TripletRecord> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(clips * frames * pairs);
    for clip in 0..clips {
        for frame in 0..frames {
            for p in 0..pairs {
                let feat = rng.normals(ANTI_CORRELATED_FEAT_DIM);
                let a = (feat[0] > 0.0) as usize;
                let mut spat = vec![0u8; 2];
                spat[1 - a] = 1;
                out.push(TripletRecord {
                    clip,
                    frame,
                    subj: 0,
                    obj: p + 1,
                    feat,
                    attn: a,
                    spat,
                    cont: vec![rng.bernoulli(0.5) as u8],
                });
            }
        }
    }
    out
}

pub fn write_records<W: Write>(mut out: W, records: &[TripletRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_records<R: BufRead>(input: R, context: &str) -> Result<Vec<TripletRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(context, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{context} line {}", n + 1), e))?;
        records.push(r);
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[TripletRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(std::io::BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<TripletRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file), &path.display().to_string())
}

/// Records grouped by clip id, each clip sorted by `(frame, subj, obj)`.
pub fn group_clips(records: &[TripletRecord]) -> Vec<Vec<TripletRecord>> {
    let mut by_clip: BTreeMap<usize, Vec<TripletRecord>> = BTreeMap::new();
    for r in records {
        by_clip.entry(r.clip).or_default().push(r.clone());
    }
    by_clip
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|r| (r.frame, r.subj, r.obj));
            v
        })
        .collect()
}
