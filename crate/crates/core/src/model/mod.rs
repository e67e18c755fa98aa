//! Relation-type branches, losses and ablation routing.
//!
//! In decoupled mode each relation type (attention, spatial, contact) owns
//! a full embedding generator and a head, so the three losses update
//! disjoint parameter sets. In shared mode one generator, driven by the
//! joint frequency prior, feeds all three heads.

mod batch;
mod checkpoint;
mod conflict;
mod train;

use serde::{Deserialize, Serialize};

pub use batch::{clip_batches, ClipBatch, ClipLabels};
pub use checkpoint::Checkpoint;
pub use conflict::{cosine, grad_conflict, grad_conflict_with, GradConflictReport};
pub use train::{
    evaluate, history_csv, optimizer_step, predict, scored_frames, train, ClipPrediction,
    EpochRecord, PairPrediction, TrainConfig, TrainOutcome, HISTORY_HEADER,
};

use crate::data::{ClassCounts, RelationPriors};
use crate::dpeg::{Dpeg, DpegConfig, WindowConfig};
use crate::error::{Error, Result};
use crate::freqgate::FrequencyPrior;
use crate::heads::{
    mc_binary_cross_entropy, mc_cross_entropy, mc_margin_loss, Head, HeadHyper, HeadKind,
    HeadLogits, HeadPass,
};
use crate::numcore::{Graph, ParamId, ParamStore, Rng, Var};

pub const RELATIONS: [&str; 3] = ["attention", "spatial", "contact"];

const TIED_HEAD_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub decouple: bool,
    pub frequency: bool,
    pub dual_branch: bool,
    pub head: HeadKind,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            decouple: true,
            frequency: true,
            dual_branch: true,
            head: HeadKind::GmmPlus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiLabelLoss {
    Bce,
    Margin,
}

impl std::str::FromStr for MultiLabelLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bce" => Ok(Self::Bce),
            "margin" => Ok(Self::Margin),
            other => Err(format!("unknown multi-label loss {other:?} (bce|margin)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub window: WindowConfig,
    pub classes: ClassCounts,
    pub flags: AblationFlags,
    pub head: HeadHyper,
    pub multilabel_loss: MultiLabelLoss,
    /// Start the attention and spatial heads from one shared linear map with
    /// weights shrunk to 1% of their usual scale, so initial logits sit near
    /// zero (linear heads with equal class counts only). Used to build
    /// gradient-conflict cases.
    pub tie_head_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            dim: 64,
            heads: 4,
            ffn: 128,
            window: WindowConfig::default(),
            classes: ClassCounts {
                attention: 3,
                spatial: 6,
                contact: 16,
            },
            flags: AblationFlags::default(),
            head: HeadHyper::default(),
            multilabel_loss: MultiLabelLoss::Bce,
            tie_head_init: false,
        }
    }
}

impl ModelConfig {
    fn dpeg_config(&self) -> DpegConfig {
        DpegConfig {
            input_dim: self.input_dim,
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
            window: self.window,
            dual_branch: self.flags.dual_branch,
            frequency: self.flags.frequency,
        }
    }
}

/// Per-type losses of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub attention: Var,
    pub spatial: Var,
    pub contact: Var,
    /// Mixture-variance penalty summed over heads, when present.
    pub reg: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub attention: f64,
    pub spatial: f64,
    pub contact: f64,
    pub reg: f64,
}

impl LossValues {
    pub fn total(&self) -> f64 {
        self.attention + self.spatial + self.contact + self.reg
    }
}

impl LossParts {
    pub fn get(&self, r: usize) -> Var {
        [self.attention, self.spatial, self.contact][r]
    }

    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            attention: g.scalar(self.attention),
            spatial: g.scalar(self.spatial),
            contact: g.scalar(self.contact),
            reg: self.reg.map_or(0.0, |r| g.scalar(r)),
        }
    }

    /// `L_a + L_s + L_c (+ reg)`.
    pub fn total(&self, g: &mut Graph) -> Result<Var> {
        let s = g.add(self.attention, self.spatial)?;
        let s = g.add(s, self.contact)?;
        match self.reg {
            Some(r) => g.add(s, r),
            None => Ok(s),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FReMuReModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// Three generators when decoupled, one when shared.
    pub branches: Vec<Dpeg>,
    pub heads: Vec<Head>,
    pub priors: RelationPriors,
}

impl FReMuReModel {
    /// Parameters are initialised from stream 0 of `seed`.
    pub fn new(cfg: ModelConfig, priors: RelationPriors, seed: u64) -> Result<Self> {
        if priors.class_counts() != cfg.classes {
            return Err(Error::contract(format!(
                "priors cover {:?} classes, model configured for {:?}",
                priors.class_counts(),
                cfg.classes
            )));
        }
        let mut rng = Rng::with_stream(seed, 0);
        let mut store = ParamStore::new();
        let counts = cfg.classes.as_array();
        let branches = if cfg.flags.decouple {
            (0..3)
                .map(|r| {
                    Dpeg::new(
                        &mut store,
                        &format!("{}/dpeg", RELATIONS[r]),
                        cfg.dpeg_config(),
                        counts[r],
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![Dpeg::new(
                &mut store,
                "shared/dpeg",
                cfg.dpeg_config(),
                cfg.classes.total(),
                &mut rng,
            )?]
        };
        let heads = (0..3)
            .map(|r| {
                Head::new(
                    &mut store,
                    &format!("{}/head", RELATIONS[r]),
                    cfg.flags.head,
                    &cfg.head,
                    cfg.dim,
                    counts[r],
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            cfg,
            store,
            branches,
            heads,
            priors,
        };
        let mut model = model;
        if model.cfg.tie_head_init {
            model.tie_heads()?;
        }
        Ok(model)
    }

    fn tie_heads(&mut self) -> Result<()> {
        let (Head::Linear(a), Head::Linear(s)) = (&self.heads[0], &self.heads[1]) else {
            return Err(Error::contract(
                "tied head initialisation needs linear heads",
            ));
        };
        if a.classes != s.classes {
            return Err(Error::contract(format!(
                "tied head initialisation needs equal attention and spatial class counts, got {} and {}",
                a.classes, s.classes
            )));
        }
        let (a, s) = (a.linear, s.linear);
        self.store
            .get_mut(a.weight)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= TIED_HEAD_SCALE);
        for (src, dst) in [(a.weight, s.weight), (a.bias.unwrap(), s.bias.unwrap())] {
            let d = self.store.get(src).data().to_vec();
            self.store.get_mut(dst).data_mut().copy_from_slice(&d);
        }
        Ok(())
    }

    pub fn is_decoupled(&self) -> bool {
        self.branches.len() == 3
    }

    pub fn branch(&self, r: usize) -> &Dpeg {
        if self.is_decoupled() {
            &self.branches[r]
        } else {
            &self.branches[0]
        }
    }

    /// Prior consumed by the generator serving relation type `r`.
    pub fn branch_prior(&self, r: usize) -> FrequencyPrior {
        if self.is_decoupled() {
            self.priors.get(r).clone()
        } else {
            self.priors.joint()
        }
    }

    /// Prior used to weight the mixture regularizer of head `r`.
    pub fn regularizer_prior(&self, r: usize) -> FrequencyPrior {
        let p = self.priors.get(r);
        if self.cfg.flags.frequency {
            p.clone()
        } else {
            FrequencyPrior::uniform(p.num_classes(), p.eps)
        }
    }

    /// Parameters every relation loss reaches (the shared generator).
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        if self.is_decoupled() {
            Vec::new()
        } else {
            self.store.ids_with_prefix("shared/").collect()
        }
    }

    /// Parameters owned by relation type `r` alone.
    pub fn relation_param_ids(&self, r: usize) -> Vec<ParamId> {
        let prefix = format!("{}/", RELATIONS[r]);
        self.store.ids_with_prefix(&prefix).collect()
    }

    /// Per-type head outputs for one clip.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clip: &ClipBatch,
        pass: &mut HeadPass<'_>,
    ) -> Result<[HeadLogits; 3]> {
        let raw = g.constant(&clip.features);
        let mut embeddings = Vec::with_capacity(self.branches.len());
        for (b, dpeg) in self.branches.iter().enumerate() {
            let prior = self.branch_prior(b);
            embeddings.push(dpeg.forward(g, store, raw, &clip.layout, &prior)?.embedding);
        }
        let mut out = Vec::with_capacity(3);
        for r in 0..3 {
            let z = if self.is_decoupled() {
                embeddings[r]
            } else {
                embeddings[0]
            };
            out.push(self.heads[r].forward(g, store, z, pass)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        out: &[HeadLogits; 3],
        labels: &ClipLabels,
    ) -> Result<LossParts> {
        let attention = mc_cross_entropy(g, &out[0], &labels.attention)?;
        let multi = |g: &mut Graph, o: &HeadLogits, t: &[Vec<f64>]| match self.cfg.multilabel_loss {
            MultiLabelLoss::Bce => mc_binary_cross_entropy(g, o, t),
            MultiLabelLoss::Margin => mc_margin_loss(g, o, t),
        };
        let spatial = multi(g, &out[1], &labels.spatial)?;
        let contact = multi(g, &out[2], &labels.contact)?;
        let mut reg = None;
        for (r, head) in self.heads.iter().enumerate() {
            if let Some(v) = head.regularizer(g, store, &self.regularizer_prior(r))? {
                reg = Some(match reg {
                    Some(acc) => g.add(acc, v)?,
                    None => v,
                });
            }
        }
        Ok(LossParts {
            attention,
            spatial,
            contact,
            reg,
        })
    }

    /// Forward pass plus losses on a labelled clip.
    pub fn clip_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clip: &ClipBatch,
        pass: &mut HeadPass<'_>,
    ) -> Result<LossParts> {
        let labels = clip
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("clip has no labels"))?;
        let out = self.forward(g, store, clip, pass)?;
        self.losses(g, store, &out, labels)
    }

    /// Total and component losses with sampling and perturbation disabled.
    pub fn total_loss(&self, clip: &ClipBatch) -> Result<LossValues> {
        let mut g = Graph::new();
        let parts = self.clip_losses(&mut g, &self.store, clip, &mut HeadPass::deterministic())?;
        Ok(parts.values(&g))
    }

    /// Smallest mixture variance across all GMM-Plus heads.
    pub fn min_mixture_variance(&self) -> Option<f64> {
        self.heads
            .iter()
            .filter_map(|h| match h {
                Head::GmmPlus(h) => h.variances(&self.store).into_iter().reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }
}

#[cfg(test)]
mod tests;
