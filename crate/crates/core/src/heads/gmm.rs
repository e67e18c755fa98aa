use serde::{Deserialize, Serialize};

use super::{HeadLogits, HeadPass};
use crate::error::{Error, Result};
use crate::freqgate::FrequencyPrior;
use crate::numcore::{softplus_scalar, Graph, Linear, ParamId, ParamStore, Rng, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    /// Components per class.
    pub components: usize,
    /// Variance floor added to every component.
    pub sigma_min: f64,
    /// Standard deviation below which the regularizer engages.
    pub sigma_target: f64,
    /// Scale of the training-time mean perturbation.
    pub tau: f64,
    /// Regularizer weight.
    pub lambda: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 3,
            sigma_min: 1e-3,
            sigma_target: 0.1,
            tau: 0.01,
            lambda: 0.1,
        }
    }
}

/// Each class owns a 1-D mixture over its own projected score `s_c = z·w_c`.
///
/// `σ²_{c,k} = σ_min + softplus(ρ_{c,k})`, `π_{c,·} = softmax(a_{c,·})`, and
/// the class logit is `log Σ_k π_{c,k} N(s_c | μ_{c,k}, σ²_{c,k}) + b_c`.
#[derive(Clone, Debug)]
pub struct GmmPlusHead {
    pub projection: Linear,
    /// `[C, K]`
    pub means: ParamId,
    /// `[C, K]` raw variances.
    pub rho: ParamId,
    /// `[C, K]` mixing logits.
    pub mix: ParamId,
    /// `[C]` calibration bias.
    pub calibration: ParamId,
    pub classes: usize,
    pub cfg: GmmConfig,
}

/// Plain-number parameters of one class mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmClass {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `Σ_k π_k N(score | μ_k, σ²_k)`, accumulated in log space.
pub fn gmm_density(score: f64, class: &GmmClass) -> f64 {
    log_density(score, class).exp()
}

fn log_density(score: f64, class: &GmmClass) -> f64 {
    let terms: Vec<f64> = class
        .means
        .iter()
        .zip(&class.variances)
        .zip(&class.weights)
        .map(|((m, v), w)| w.ln() - 0.5 * (LN_2PI + v.ln()) - 0.5 * (score - m).powi(2) / v)
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

impl GmmPlusHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: GmmConfig,
        dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.components == 0 {
            return Err(Error::contract("mixture needs at least one component"));
        }
        if cfg.sigma_min <= 0.0 || cfg.tau < 0.0 || cfg.lambda < 0.0 {
            return Err(Error::contract(
                "sigma_min must be positive; tau and lambda non-negative",
            ));
        }
        let k = cfg.components;
        let projection = Linear::new(store, &format!("{prefix}/proj"), dim, classes, false, rng)?;
        let spread: Vec<f64> = (0..k)
            .map(|i| {
                if k == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (k - 1) as f64
                }
            })
            .collect();
        let means = store.insert(
            format!("{prefix}/means"),
            crate::numcore::Tensor::matrix(classes, k, spread.repeat(classes))?,
        )?;
        // softplus(ρ) = 1 − σ_min, so every component starts at unit variance.
        let rho0 = ((1.0 - cfg.sigma_min).exp() - 1.0).ln();
        let rho = store.insert_const(format!("{prefix}/rho"), &[classes, k], rho0)?;
        let mix = store.insert_const(format!("{prefix}/mix"), &[classes, k], 0.0)?;
        let calibration = store.insert_const(format!("{prefix}/calib"), &[classes], 0.0)?;
        Ok(Self {
            projection,
            means,
            rho,
            mix,
            calibration,
            classes,
            cfg,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.projection.weight,
            self.means,
            self.rho,
            self.mix,
            self.calibration,
        ]
    }

    pub fn variances(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.rho)
            .data()
            .iter()
            .map(|&r| self.cfg.sigma_min + softplus_scalar(r))
            .collect()
    }

    pub fn class_params(&self, store: &ParamStore, c: usize) -> GmmClass {
        let k = self.cfg.components;
        let span = c * k..(c + 1) * k;
        let mix = &store.get(self.mix).data()[span.clone()];
        let max = mix.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = mix.iter().map(|a| (a - max).exp()).collect();
        let z: f64 = e.iter().sum();
        GmmClass {
            means: store.get(self.means).data()[span.clone()].to_vec(),
            variances: self.variances(store)[span].to_vec(),
            weights: e.iter().map(|v| v / z).collect(),
        }
    }

    /// `μ + τ·ε` with `ε` drawn in class-major order; identity outside
    /// training or when `τ = 0`.
    pub fn perturbation(&self, rng: Option<&mut Rng>, training: bool) -> Option<Vec<f64>> {
        match rng {
            Some(rng) if training && self.cfg.tau > 0.0 => Some(
                rng.normals(self.classes * self.cfg.components)
                    .into_iter()
                    .map(|e| self.cfg.tau * e)
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn perturb_means(
        &self,
        store: &ParamStore,
        rng: Option<&mut Rng>,
        training: bool,
    ) -> Vec<f64> {
        let base = store.get(self.means).data();
        match self.perturbation(rng, training) {
            Some(noise) => base.iter().zip(noise).map(|(m, e)| m + e).collect(),
            None => base.to_vec(),
        }
    }

    fn variance_var(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let rho = g.param(store, self.rho);
        let rho = g.reshape(rho, vec![self.classes * self.cfg.components])?;
        let sp = g.softplus(rho);
        Ok(g.add_scalar(sp, self.cfg.sigma_min))
    }

    /// Per-class projected scores `[n, C]`.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        self.projection.forward(g, store, z)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        pass: &mut HeadPass<'_>,
    ) -> Result<HeadLogits> {
        let n = g.rows(z);
        let (c, k) = (self.classes, self.cfg.components);
        let s = self.scores(g, store, z)?;
        let s = g.repeat_cols(s, k)?;

        let mu = g.param(store, self.means);
        let mu = g.reshape(mu, vec![c * k])?;
        let mu = match self.perturbation(pass.rng.as_deref_mut(), pass.training) {
            Some(noise) => {
                let nv = g.constant_vec(vec![c * k], noise)?;
                g.add(mu, nv)?
            }
            None => mu,
        };
        let var = self.variance_var(g, store)?;
        let log_var = g.ln(var);
        let neg_lv = g.neg(log_var);
        let inv_var = g.exp(neg_lv);

        let neg_mu = g.neg(mu);
        let diff = g.add_row(s, neg_mu)?;
        let sq = g.mul(diff, diff)?;
        let quad = g.mul_row(sq, inv_var)?;
        let quad = g.scale(quad, -0.5);

        let mix = g.param(store, self.mix);
        let log_pi = g.log_softmax_last(mix)?;
        let log_pi = g.reshape(log_pi, vec![c * k])?;
        let half_lv = g.scale(log_var, -0.5);
        let offset = g.add(log_pi, half_lv)?;
        let offset = g.add_scalar(offset, -0.5 * LN_2PI);

        let terms = g.add_row(quad, offset)?;
        let terms = g.reshape(terms, vec![n, c, k])?;
        let log_density = g.log_sum_exp(terms, 2)?;
        let calib = g.param(store, self.calibration);
        let logits = g.add_row(log_density, calib)?;
        Ok(HeadLogits {
            logits,
            draws: 1,
            rows: n,
            variance: None,
        })
    }

    /// `λ Σ_c w_c Σ_k max(0, σ_target² − σ²_{c,k})` with `w` the
    /// self-information of each class normalised to sum to one.
    pub fn regularizer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prior: &FrequencyPrior,
    ) -> Result<Var> {
        if prior.num_classes() != self.classes {
            return Err(Error::contract(format!(
                "prior covers {} classes, head has {}",
                prior.num_classes(),
                self.classes
            )));
        }
        let info = prior.self_information();
        let total: f64 = info.iter().sum();
        let k = self.cfg.components;
        let weights: Vec<f64> = info
            .iter()
            .flat_map(|w| std::iter::repeat_n(w / total, k))
            .collect();
        let var = self.variance_var(g, store)?;
        let gap = g.neg(var);
        let gap = g.add_scalar(gap, self.cfg.sigma_target.powi(2));
        let hinge = g.relu(gap);
        let wv = g.constant_vec(vec![weights.len()], weights)?;
        let weighted = g.mul(hinge, wv)?;
        let s = g.sum(weighted);
        Ok(g.scale(s, self.cfg.lambda))
    }
}
