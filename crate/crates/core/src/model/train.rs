use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ClipBatch, FReMuReModel, LossValues};
use crate::error::{Error, Result};
use crate::heads::{batch_uncertainty, probabilities, HeadPass, LabelMode, UncertaintyReport};
use crate::metrics::{
    metrics_report, Candidate, Constraint, MetricsReport, ScoredFrame, DEFAULT_KS,
};
use crate::numcore::{AdamConfig, AdamState, Graph, Rng};

const SHUFFLE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clips whose gradients are averaged into one optimizer step.
    pub batch_clips: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_clips: 1,
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_clips == 0 {
            out.push("train.batch_clips must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            out.push(format!(
                "train.lr must be finite and non-negative, got {}",
                a.lr
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) {
            out.push(format!("train.beta1 must lie in [0, 1), got {}", a.beta1));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            out.push(format!("train.beta2 must lie in [0, 1), got {}", a.beta2));
        }
        if !(a.eps > 0.0) {
            out.push(format!("train.eps must be positive, got {}", a.eps));
        }
        out
    }
}

/// Mean training losses of one epoch and validation mR@K (no constraint).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossValues,
    pub mean_recall: [f64; 3],
}

pub const HISTORY_HEADER: &str = "epoch,L_a,L_s,L_c,reg,mR@10,mR@20,mR@50";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.6}",
            r.epoch,
            l.attention,
            l.spatial,
            l.contact,
            l.reg,
            r.mean_recall[0],
            r.mean_recall[1],
            r.mean_recall[2]
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamState,
}

/// Minibatch Adam over clips.
///
/// Clip order is reshuffled each epoch from stream 1 of `seed`, head
/// sampling draws from stream 2, and every validation pass restarts
/// stream 3, so a run is a pure function of its inputs.
pub fn train(
    model: &mut FReMuReModel,
    train_set: &[ClipBatch],
    val_set: &[ClipBatch],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let mut shuffle = Rng::with_stream(seed, SHUFFLE_STREAM);
    let mut sampler = Rng::with_stream(seed, SAMPLE_STREAM);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle.shuffle(&mut order);
        let mut sums = LossValues::default();
        for chunk in order.chunks(cfg.batch_clips) {
            step += 1;
            let batch: Vec<&ClipBatch> = chunk.iter().map(|&i| &train_set[i]).collect();
            let v = optimizer_step(model, &mut adam, &batch, &mut sampler, epoch, step)?;
            sums.attention += v.attention;
            sums.spatial += v.spatial;
            sums.contact += v.contact;
            sums.reg += v.reg;
        }
        let n = train_set.len() as f64;
        let losses = LossValues {
            attention: sums.attention / n,
            spatial: sums.spatial / n,
            contact: sums.contact / n,
            reg: sums.reg / n,
        };
        let mean_recall = if val_set.is_empty() {
            [f64::NAN; 3]
        } else {
            let (report, _) = evaluate(model, val_set, &DEFAULT_KS, Constraint::No, seed)?;
            [0, 1, 2].map(|i| report.at[i].mean_recall)
        };
        history.push(EpochRecord {
            epoch,
            losses,
            mean_recall,
        });
    }
    model.store.zero_grads();
    Ok(TrainOutcome {
        history,
        optimizer: adam,
    })
}

/// One Adam update on the clip-averaged gradient of `batch`.
///
/// Returns the component losses summed over the batch. `epoch` and `step`
/// only label a numerical abort.
pub fn optimizer_step(
    model: &mut FReMuReModel,
    adam: &mut AdamState,
    batch: &[&ClipBatch],
    sampler: &mut Rng,
    epoch: usize,
    step: usize,
) -> Result<LossValues> {
    let mut sums = LossValues::default();
    model.store.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    for clip in batch {
        let mut g = Graph::new();
        let parts = model.clip_losses(&mut g, &model.store, clip, &mut HeadPass::train(sampler))?;
        let total = parts.total(&mut g)?;
        if !g.scalar(total).is_finite() {
            return Err(Error::Numerical {
                epoch,
                step,
                message: format!("non-finite loss on clip {}", clip.clip),
            });
        }
        let v = parts.values(&g);
        sums.attention += v.attention;
        sums.spatial += v.spatial;
        sums.contact += v.contact;
        sums.reg += v.reg;
        let scaled = g.scale(total, scale);
        g.backward(scaled)?;
        model.store.absorb_grads(&g)?;
    }
    adam.step(&mut model.store)?;
    if model
        .store
        .ids()
        .any(|id| !model.store.get(id).all_finite())
    {
        return Err(Error::Numerical {
            epoch,
            step,
            message: "non-finite parameter after optimizer step".into(),
        });
    }
    Ok(sums)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub clip: usize,
    pub frame: usize,
    pub subj: usize,
    pub obj: usize,
    pub attn_scores: Vec<f64>,
    pub spat_scores: Vec<f64>,
    pub cont_scores: Vec<f64>,
    pub uncertainty: BTreeMap<String, UncertaintyReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub pairs: Vec<PairPrediction>,
}

/// MC-mean probabilities and uncertainty for every pair of a clip.
pub fn predict(model: &FReMuReModel, clip: &ClipBatch, rng: &mut Rng) -> Result<ClipPrediction> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &model.store, clip, &mut HeadPass::eval(rng))?;
    let modes = [LabelMode::Single, LabelMode::Multi, LabelMode::Multi];
    let mut probs = Vec::with_capacity(3);
    let mut unc = Vec::with_capacity(3);
    for r in 0..3 {
        let p = probabilities(&g, &out[r], modes[r])?;
        unc.push(batch_uncertainty(&g, &out[r], &p, modes[r]));
        probs.push(p);
    }
    let pairs = clip
        .keys
        .iter()
        .enumerate()
        .map(|(i, &(frame, subj, obj))| PairPrediction {
            clip: clip.clip,
            frame,
            subj,
            obj,
            attn_scores: probs[0].row(i).to_vec(),
            spat_scores: probs[1].row(i).to_vec(),
            cont_scores: probs[2].row(i).to_vec(),
            uncertainty: super::RELATIONS
                .iter()
                .zip(&unc)
                .map(|(name, u)| (name.to_string(), u[i]))
                .collect(),
        })
        .collect();
    Ok(ClipPrediction { pairs })
}

/// One ranking problem per (clip, frame): every pair scores every class of
/// every relation type, indexed globally as attention, spatial, contact.
pub fn scored_frames(clips: &[ClipBatch], preds: &[ClipPrediction]) -> Result<Vec<ScoredFrame>> {
    let mut frames = Vec::new();
    for (clip, pred) in clips.iter().zip(preds) {
        let labels = clip
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract(format!("clip {} has no labels", clip.clip)))?;
        let mut by_frame: BTreeMap<usize, ScoredFrame> = BTreeMap::new();
        let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, p) in pred.pairs.iter().enumerate() {
            let frame = by_frame.entry(p.frame).or_default();
            let pair = {
                let n = slot.entry(p.frame).or_insert(0);
                *n += 1;
                *n - 1
            };
            let groups = [&p.attn_scores, &p.spat_scores, &p.cont_scores];
            let mut offset = 0;
            for (group, scores) in groups.into_iter().enumerate() {
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
            let (na, ns) = (p.attn_scores.len(), p.spat_scores.len());
            frame.truth.insert((pair, labels.attention[i]));
            for (c, &y) in labels.spatial[i].iter().enumerate() {
                if y > 0.5 {
                    frame.truth.insert((pair, na + c));
                }
            }
            for (c, &y) in labels.contact[i].iter().enumerate() {
                if y > 0.5 {
                    frame.truth.insert((pair, na + ns + c));
                }
            }
        }
        frames.extend(by_frame.into_values());
    }
    Ok(frames)
}

/// Metrics over labelled clips; the sampling stream restarts at stream 3 of
/// `seed` so repeated evaluations agree.
pub fn evaluate(
    model: &FReMuReModel,
    clips: &[ClipBatch],
    ks: &[usize],
    constraint: Constraint,
    seed: u64,
) -> Result<(MetricsReport, Vec<ClipPrediction>)> {
    let mut rng = Rng::with_stream(seed, EVAL_STREAM);
    let preds = clips
        .iter()
        .map(|c| predict(model, c, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let frames = scored_frames(clips, &preds)?;
    let report = metrics_report(&frames, ks, constraint, &model.priors.global_frequencies())?;
    Ok((report, preds))
}
