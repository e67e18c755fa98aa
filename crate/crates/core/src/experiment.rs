//! Experiment configuration, run manifests, ablation sweeps and
//! gradient-conflict traces.
//!
//! The config file is plain `key = value` text. Keys are dotted
//! (`train.lr = 0.001`); a `[train]` line prefixes the keys after it.
//! `#` starts a comment.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{RelationPriors, SyntheticConfig};
use crate::dpeg::WindowMode;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::metrics::{Constraint, DEFAULT_KS};
use crate::model::{
    evaluate, grad_conflict, optimizer_step, train, AblationFlags, ClipBatch, EpochRecord,
    FReMuReModel, GradConflictReport, ModelConfig, MultiLabelLoss, TrainConfig,
};
use crate::numcore::{AdamState, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    /// Class counts and input width always follow `data`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        let model = ModelConfig {
            input_dim: data.feat_dim,
            classes: data.classes,
            ..ModelConfig::default()
        };
        Self {
            data,
            model,
            train: TrainConfig::default(),
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str, bad: &mut Vec<String>) -> Option<T>
where
    T::Err: std::fmt::Display,
{
    match raw.parse() {
        Ok(v) => Some(v),
        Err(e) => {
            bad.push(format!("{key}: cannot parse {raw:?} ({e})"));
            None
        }
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting; unknown keys and bad values are
    /// appended to `bad`.
    pub fn set(&mut self, key: &str, raw: &str, bad: &mut Vec<String>) {
        macro_rules! put {
            ($field:expr) => {
                if let Some(v) = parse_value(key, raw, bad) {
                    $field = v;
                }
            };
        }
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => put!(self.seed),
            "out" => self.out = PathBuf::from(raw),
            "data.attention_classes" => put!(d.classes.attention),
            "data.spatial_classes" => put!(d.classes.spatial),
            "data.contact_classes" => put!(d.classes.contact),
            "data.zipf_s" => put!(d.zipf_s),
            "data.feat_dim" => put!(d.feat_dim),
            "data.train_clips" => put!(d.train_clips),
            "data.test_clips" => put!(d.test_clips),
            "data.frames" => put!(d.frames),
            "data.pairs" => put!(d.pairs),
            "data.noise" => put!(d.noise),
            "data.flip_rate" => put!(d.flip_rate),
            "data.drift" => put!(d.drift),
            "data.max_positives" => put!(d.max_positives),
            "model.dim" => put!(m.dim),
            "model.heads" => put!(m.heads),
            "model.ffn" => put!(m.ffn),
            "model.window_length" => put!(m.window.length),
            "model.window_stride" => put!(m.window.stride),
            "model.window_mode" => put!(m.window.mode),
            "model.multilabel_loss" => put!(m.multilabel_loss),
            "model.tie_head_init" => put!(m.tie_head_init),
            "flags.decouple" => put!(m.flags.decouple),
            "flags.frequency" => put!(m.flags.frequency),
            "flags.dual_branch" => put!(m.flags.dual_branch),
            "flags.head" => put!(m.flags.head),
            "bayes.train_samples" => put!(m.head.bayesian.train_samples),
            "bayes.eval_samples" => put!(m.head.bayesian.eval_samples),
            "bayes.logvar_min" => put!(m.head.bayesian.logvar_min),
            "bayes.logvar_max" => put!(m.head.bayesian.logvar_max),
            "bayes.logvar_init" => put!(m.head.bayesian.logvar_init),
            "gmm.components" => put!(m.head.gmm.components),
            "gmm.sigma_min" => put!(m.head.gmm.sigma_min),
            "gmm.sigma_target" => put!(m.head.gmm.sigma_target),
            "gmm.tau" => put!(m.head.gmm.tau),
            "gmm.lambda" => put!(m.head.gmm.lambda),
            "train.lr" => put!(t.adam.lr),
            "train.beta1" => put!(t.adam.beta1),
            "train.beta2" => put!(t.adam.beta2),
            "train.eps" => put!(t.adam.eps),
            "train.epochs" => put!(t.epochs),
            "train.batch_clips" => put!(t.batch_clips),
            other => bad.push(format!("{other}: unknown key")),
        }
        self.model.classes = self.data.classes;
        self.model.input_dim = self.data.feat_dim;
    }

    /// Parses config text over the defaults and validates the result,
    /// reporting every offending key at once.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut bad = Vec::new();
        let mut section = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bad.push(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ));
                continue;
            };
            let key = key.trim();
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&key, value.trim(), &mut bad);
        }
        bad.extend(cfg.problems());
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut bad = self.data.problems();
        let m = &self.model;
        if m.dim < 2 || m.dim % 2 != 0 {
            bad.push(format!(
                "model.dim must be even and at least 2, got {}",
                m.dim
            ));
        }
        if m.heads == 0 || m.dim % m.heads.max(1) != 0 {
            bad.push(format!(
                "model.heads must divide model.dim ({}), got {}",
                m.dim, m.heads
            ));
        }
        if m.ffn == 0 {
            bad.push("model.ffn must be at least 1".into());
        }
        if m.window.length == 0 {
            bad.push("model.window_length must be at least 1".into());
        }
        if m.window.stride == 0 || m.window.stride > m.window.length {
            bad.push(format!(
                "model.window_stride must lie in 1..=window_length ({}), got {}",
                m.window.length, m.window.stride
            ));
        }
        let b = &m.head.bayesian;
        if b.train_samples == 0 {
            bad.push("bayes.train_samples must be at least 1".into());
        }
        if b.eval_samples == 0 {
            bad.push("bayes.eval_samples must be at least 1".into());
        }
        if !(b.logvar_min <= b.logvar_max) || b.logvar_max.is_nan() {
            bad.push("bayes.logvar_min must not exceed bayes.logvar_max".into());
        }
        let g = &m.head.gmm;
        if g.components == 0 {
            bad.push("gmm.components must be at least 1".into());
        }
        if !(g.sigma_min > 0.0) {
            bad.push("gmm.sigma_min must be positive".into());
        }
        if !(g.sigma_target >= 0.0) {
            bad.push("gmm.sigma_target must be non-negative".into());
        }
        if !(g.tau >= 0.0) {
            bad.push("gmm.tau must be non-negative".into());
        }
        if !(g.lambda >= 0.0) {
            bad.push("gmm.lambda must be non-negative".into());
        }
        bad.extend(self.train.problems());
        bad
    }

    /// Every key in a fixed order; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let b = &m.head.bayesian;
        let g = &m.head.gmm;
        let window_mode = match m.window.mode {
            WindowMode::Average => "average",
            WindowMode::Triangular => "triangular",
        };
        let multilabel = match m.multilabel_loss {
            MultiLabelLoss::Bce => "bce",
            MultiLabelLoss::Margin => "margin",
        };
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data.attention_classes", d.classes.attention.to_string()),
            ("data.spatial_classes", d.classes.spatial.to_string()),
            ("data.contact_classes", d.classes.contact.to_string()),
            ("data.zipf_s", d.zipf_s.to_string()),
            ("data.feat_dim", d.feat_dim.to_string()),
            ("data.train_clips", d.train_clips.to_string()),
            ("data.test_clips", d.test_clips.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.pairs", d.pairs.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.flip_rate", d.flip_rate.to_string()),
            ("data.drift", d.drift.to_string()),
            ("data.max_positives", d.max_positives.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn", m.ffn.to_string()),
            ("model.window_length", m.window.length.to_string()),
            ("model.window_stride", m.window.stride.to_string()),
            ("model.window_mode", window_mode.to_string()),
            ("model.multilabel_loss", multilabel.to_string()),
            ("model.tie_head_init", m.tie_head_init.to_string()),
            ("flags.decouple", m.flags.decouple.to_string()),
            ("flags.frequency", m.flags.frequency.to_string()),
            ("flags.dual_branch", m.flags.dual_branch.to_string()),
            ("flags.head", m.flags.head.to_string()),
            ("bayes.train_samples", b.train_samples.to_string()),
            ("bayes.eval_samples", b.eval_samples.to_string()),
            ("bayes.logvar_min", b.logvar_min.to_string()),
            ("bayes.logvar_max", b.logvar_max.to_string()),
            ("bayes.logvar_init", b.logvar_init.to_string()),
            ("gmm.components", g.components.to_string()),
            ("gmm.sigma_min", g.sigma_min.to_string()),
            ("gmm.sigma_target", g.sigma_target.to_string()),
            ("gmm.tau", g.tau.to_string()),
            ("gmm.lambda", g.lambda.to_string()),
            ("train.lr", t.adam.lr.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.eps", t.adam.eps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_clips", t.batch_clips.to_string()),
        ];
        lines
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text minus the `out` line, so the same
    /// experiment written to two directories hashes alike.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out ="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// What a command did, sufficient to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    /// Command-specific arguments beyond the config, e.g. `k` or `steps`.
    pub args: Vec<(String, String)>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            ..Self::from_text(command, cfg.to_text(), cfg.seed)
        }
    }

    /// Manifest for a run driven by some other document, such as a
    /// checkpoint; `config_hash` is the SHA-256 of `config`.
    pub fn from_text(command: &str, config: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: hex::encode(Sha256::digest(config.as_bytes())),
            seed,
            config,
            args: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("manifest", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullBayes,
    FullGmm,
    FullLinear,
    NoDecouple,
    NoFrequency,
    NoDualBranch,
}

impl Variant {
    /// The table rows run by default.
    pub const DEFAULT: [Variant; 5] = [
        Variant::FullBayes,
        Variant::FullGmm,
        Variant::NoDecouple,
        Variant::NoFrequency,
        Variant::NoDualBranch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FullBayes => "full_bayes",
            Self::FullGmm => "full_gmm",
            Self::FullLinear => "full_linear",
            Self::NoDecouple => "no_decouple",
            Self::NoFrequency => "no_frequency",
            Self::NoDualBranch => "no_dual_branch",
        }
    }

    /// Single-component ablations keep the GMM-Plus head.
    pub fn flags(self) -> AblationFlags {
        let full = AblationFlags::default();
        match self {
            Self::FullBayes => AblationFlags {
                head: HeadKind::Bayesian,
                ..full
            },
            Self::FullGmm => full,
            Self::FullLinear => AblationFlags {
                head: HeadKind::Linear,
                ..full
            },
            Self::NoDecouple => AblationFlags {
                decouple: false,
                ..full
            },
            Self::NoFrequency => AblationFlags {
                frequency: false,
                ..full
            },
            Self::NoDualBranch => AblationFlags {
                dual_branch: false,
                ..full
            },
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, Self::FullBayes | Self::FullGmm | Self::FullLinear)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            Self::FullBayes,
            Self::FullGmm,
            Self::FullLinear,
            Self::NoDecouple,
            Self::NoFrequency,
            Self::NoDualBranch,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    /// Test mR@10/20/50, no constraint.
    pub mean_recall: [f64; 3],
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            stderr: std / n.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<Variant>,
    pub seeds: usize,
    /// Variant-major, seed-minor.
    pub runs: Vec<AblationRun>,
}

pub const ABLATION_HEADER: &str =
    "variant,seeds,mR@10_mean,mR@10_std,mR@20_mean,mR@20_std,mR@50_mean,mR@50_std";

impl AblationTable {
    pub fn runs_of(&self, v: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Seed statistics of mR@K for K index `at` (0: @10, 1: @20, 2: @50).
    pub fn summary(&self, v: Variant, at: usize) -> Summary {
        let vals: Vec<f64> = self.runs_of(v).map(|r| r.mean_recall[at]).collect();
        Summary::of(&vals)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for &v in &self.variants {
            s.push_str(&format!("{v},{}", self.seeds));
            for at in 0..3 {
                let sm = self.summary(v, at);
                s.push_str(&format!(",{:.6},{:.6}", sm.mean, sm.std));
            }
            s.push('\n');
        }
        s
    }

    /// One line per run: `variant,seed,mR@10,mR@20,mR@50`.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,mR@10,mR@20,mR@50\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.variant, r.seed, r.mean_recall[0], r.mean_recall[1], r.mean_recall[2]
            ));
        }
        s
    }
}

/// Worker count from `FREMURE_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FREMURE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every variant for seeds `cfg.seed .. cfg.seed + seeds` on one
/// shared dataset and scores the test clips.
///
/// Runs are independent, so they are spread over `threads` workers; results
/// are stored by run index and do not depend on scheduling.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train_set: &[ClipBatch],
    test_set: &[ClipBatch],
    priors: &RelationPriors,
    variants: &[Variant],
    seeds: usize,
    threads: usize,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds == 0 {
        return Err(Error::Config(vec![
            "ablation needs at least one variant and one seed".into(),
        ]));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| (0..seeds as u64).map(move |i| (v, cfg.seed + i)))
        .collect();
    let slots: Vec<Mutex<Option<Result<AblationRun>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(variant, seed)) = jobs.get(i) else {
            break;
        };
        let run = (|| {
            let model_cfg = ModelConfig {
                flags: variant.flags(),
                ..cfg.model.clone()
            };
            let mut model = FReMuReModel::new(model_cfg, priors.clone(), seed)?;
            let outcome = train(&mut model, train_set, &[], &cfg.train, seed)?;
            let (report, _) = evaluate(&model, test_set, &DEFAULT_KS, Constraint::No, seed)?;
            Ok(AblationRun {
                variant,
                seed,
                mean_recall: [0, 1, 2].map(|k| report.at[k].mean_recall),
                history: outcome.history,
            })
        })();
        *slots[i].lock().expect("result slot") = Some(run);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            s.spawn(&work);
        }
    });
    let runs = slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        variants: variants.to_vec(),
        seeds,
        runs,
    })
}

/// Conflict report before each of `steps` optimizer steps, cycling through
/// `clips` in order.
pub fn conflict_trace(
    model: &mut FReMuReModel,
    clips: &[ClipBatch],
    steps: usize,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<GradConflictReport>> {
    if clips.is_empty() {
        return Err(Error::contract("no clips to diagnose"));
    }
    let mut adam = AdamState::new(&model.store, train_cfg.adam);
    let mut sampler = Rng::with_stream(seed, 2);
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let clip = &clips[step % clips.len()];
        out.push(grad_conflict(model, clip)?);
        optimizer_step(model, &mut adam, &[clip], &mut sampler, 0, step + 1)?;
    }
    Ok(out)
}
