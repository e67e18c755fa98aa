use serde::{Deserialize, Serialize};

use super::{probabilities, uncertainty, HeadLogits, HeadPass, LabelMode, UncertaintyReport};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesianConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Predicted log-variance is clamped to `[logvar_min, logvar_max]`.
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Initial log-variance bias.
    pub logvar_init: f64,
}

impl Default for BayesianConfig {
    fn default() -> Self {
        Self {
            train_samples: 5,
            eval_samples: 20,
            logvar_min: -10.0,
            logvar_max: 5.0,
            logvar_init: -4.0,
        }
    }
}

/// Logit mean and log-variance from two linear maps; draws
/// `ẑ_s = μ + ε_s ⊙ √σ²` with reparameterised noise.
#[derive(Clone, Debug)]
pub struct BayesianHead {
    pub mu: Linear,
    pub logvar: Linear,
    pub classes: usize,
    pub cfg: BayesianConfig,
}

impl BayesianHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: BayesianConfig,
        dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.train_samples == 0 || cfg.eval_samples == 0 {
            return Err(Error::contract(
                "Monte Carlo sample count must be at least 1",
            ));
        }
        let mu = Linear::new(store, &format!("{prefix}/mu"), dim, classes, true, rng)?;
        let logvar = Linear::new(store, &format!("{prefix}/logvar"), dim, classes, true, rng)?;
        if let Some(b) = logvar.bias {
            store.get_mut(b).data_mut().fill(cfg.logvar_init);
        }
        Ok(Self {
            mu,
            logvar,
            classes,
            cfg,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.mu, self.logvar]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    pub fn samples(&self, training: bool) -> usize {
        if training {
            self.cfg.train_samples
        } else {
            self.cfg.eval_samples
        }
    }

    /// Draws are taken from `pass.rng` in draw-major, row-major, class-minor
    /// order. Without an rng the mean logits are returned as a single draw.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        pass: &mut HeadPass<'_>,
    ) -> Result<HeadLogits> {
        let rows = g.rows(z);
        let mu = self.mu.forward(g, store, z)?;
        let lv = self.logvar.forward(g, store, z)?;
        let lv = g.clamp(lv, self.cfg.logvar_min, self.cfg.logvar_max);
        let variance = g.exp(lv);
        let Some(rng) = pass.rng.as_deref_mut() else {
            return Ok(HeadLogits {
                logits: mu,
                draws: 1,
                rows,
                variance: Some(variance),
            });
        };
        let draws = self.samples(pass.training);
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let idx: Vec<usize> = (0..draws).flat_map(|_| 0..rows).collect();
        let (mu_rep, std_rep) = if draws == 1 {
            (mu, std)
        } else {
            (g.gather_rows(mu, &idx)?, g.gather_rows(std, &idx)?)
        };
        let noise = g.constant_vec(
            vec![draws * rows, self.classes],
            rng.normals(draws * rows * self.classes),
        )?;
        let scaled = g.mul(noise, std_rep)?;
        let logits = g.add(mu_rep, scaled)?;
        Ok(HeadLogits {
            logits,
            draws,
            rows,
            variance: Some(variance),
        })
    }
}

/// Class probabilities and uncertainty for a single embedding.
///
/// `rng = None` disables sampling and yields `softmax(μ)` / `σ(μ)`.
pub fn bayesian_forward(
    head: &BayesianHead,
    store: &ParamStore,
    z: &[f64],
    rng: Option<&mut Rng>,
    training: bool,
    mode: LabelMode,
) -> Result<(Vec<f64>, UncertaintyReport)> {
    let mut g = Graph::new();
    let zv = g.constant(&Tensor::matrix(1, z.len(), z.to_vec())?);
    let mut pass = HeadPass { training, rng };
    let out = head.forward(&mut g, store, zv, &mut pass)?;
    let probs = probabilities(&g, &out, mode)?;
    let var = out.variance.map(|v| g.value(v).to_vec());
    let report = uncertainty(probs.data(), var.as_deref(), mode);
    Ok((probs.into_data(), report))
}
