//! Relation classification heads.
//!
//! Every head maps a batch of `[n, d]` embeddings to class logits. The
//! Bayesian head returns several Monte Carlo draws stacked along rows
//! (`[S·n, C]`, draw-major); the others return a single draw. Losses and
//! probabilities below average over draws in probability space, so a head
//! with one draw reduces to plain softmax / sigmoid.

mod bayesian;
mod gmm;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bayesian::{bayesian_forward, BayesianConfig, BayesianHead};
pub use gmm::{gmm_density, GmmClass, GmmConfig, GmmPlusHead};

use crate::error::{Error, Result};
use crate::freqgate::FrequencyPrior;
use crate::numcore::{Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// One class per pair; probabilities via softmax.
    Single,
    /// Independent per-class probabilities via sigmoid.
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Bayesian,
    GmmPlus,
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "bayesian" => Ok(Self::Bayesian),
            "gmm_plus" => Ok(Self::GmmPlus),
            other => Err(format!("unknown head {other:?} (linear|bayesian|gmm_plus)")),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Bayesian => "bayesian",
            Self::GmmPlus => "gmm_plus",
        })
    }
}

/// How stochastic parts of a head behave on one pass.
///
/// Without an rng, Bayesian sampling and mean perturbation are both off and
/// the pass is deterministic.
pub struct HeadPass<'a> {
    pub training: bool,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> HeadPass<'a> {
    pub fn deterministic() -> Self {
        Self {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
        }
    }

    pub fn eval(rng: &'a mut Rng) -> Self {
        Self {
            training: false,
            rng: Some(rng),
        }
    }
}

/// Head output for a batch of `rows` embeddings.
#[derive(Clone, Copy, Debug)]
pub struct HeadLogits {
    /// `[draws · rows, C]`, draw-major.
    pub logits: Var,
    pub draws: usize,
    pub rows: usize,
    /// Predicted per-class variance `[rows, C]` (Bayesian head only).
    pub variance: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LinearHead {
    pub linear: Linear,
    pub classes: usize,
}

impl LinearHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{prefix}/out"), dim, classes, true, rng)?,
            classes,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<HeadLogits> {
        let logits = self.linear.forward(g, store, z)?;
        Ok(HeadLogits {
            logits,
            draws: 1,
            rows: g.rows(z),
            variance: None,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Linear(LinearHead),
    Bayesian(BayesianHead),
    GmmPlus(GmmPlusHead),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub bayesian: BayesianConfig,
    pub gmm: GmmConfig,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: HeadKind,
        hyper: &HeadHyper,
        dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            HeadKind::Linear => Head::Linear(LinearHead::new(store, prefix, dim, classes, rng)?),
            HeadKind::Bayesian => Head::Bayesian(BayesianHead::new(
                store,
                prefix,
                hyper.bayesian,
                dim,
                classes,
                rng,
            )?),
            HeadKind::GmmPlus => Head::GmmPlus(GmmPlusHead::new(
                store, prefix, hyper.gmm, dim, classes, rng,
            )?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::Bayesian(_) => HeadKind::Bayesian,
            Head::GmmPlus(_) => HeadKind::GmmPlus,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Linear(h) => h.classes,
            Head::Bayesian(h) => h.classes,
            Head::GmmPlus(h) => h.classes,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        pass: &mut HeadPass<'_>,
    ) -> Result<HeadLogits> {
        match self {
            Head::Linear(h) => h.forward(g, store, z),
            Head::Bayesian(h) => h.forward(g, store, z, pass),
            Head::GmmPlus(h) => h.forward(g, store, z, pass),
        }
    }

    /// Frequency-aware variance penalty; `None` for heads without one.
    pub fn regularizer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prior: &FrequencyPrior,
    ) -> Result<Option<Var>> {
        match self {
            Head::GmmPlus(h) => h.regularizer(g, store, prior).map(Some),
            _ => Ok(None),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Head::Linear(h) => std::iter::once(h.linear.weight)
                .chain(h.linear.bias)
                .collect(),
            Head::Bayesian(h) => h.param_ids(),
            Head::GmmPlus(h) => h.param_ids(),
        }
    }
}

// ── probabilities and losses over draws ─────────────────────────────────

/// Mean of `rows` across `draws` blocks, as `first + Σ (x_s − first) / S` so
/// identical draws average to the first draw bit for bit.
fn mean_over_draws(values: &[f64], draws: usize) -> Vec<f64> {
    let block = values.len() / draws;
    let first = &values[..block];
    let mut acc = vec![0.0; block];
    for s in 1..draws {
        for (a, (v, f)) in acc
            .iter_mut()
            .zip(values[s * block..(s + 1) * block].iter().zip(first))
        {
            *a += v - f;
        }
    }
    first
        .iter()
        .zip(acc)
        .map(|(f, a)| f + a / draws as f64)
        .collect()
}

/// MC-mean class probabilities `[rows, C]`.
pub fn probabilities(g: &Graph, out: &HeadLogits, mode: LabelMode) -> Result<Tensor> {
    let classes = g.cols(out.logits);
    let logits = g.tensor(out.logits);
    let mut per_draw = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        match mode {
            LabelMode::Single => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                per_draw.extend(e.iter().map(|v| v / z));
            }
            LabelMode::Multi => {
                per_draw.extend(row.iter().map(|&x| crate::numcore::sigmoid_scalar(x)))
            }
        }
    }
    Tensor::matrix(out.rows, classes, mean_over_draws(&per_draw, out.draws))
}

/// Per-pair uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Mean predicted variance across classes.
    pub aleatoric: f64,
    /// Entropy (nats) of the MC-mean distribution; for multi-label output,
    /// the mean binary entropy across classes.
    pub epistemic: f64,
}

pub fn uncertainty(probs: &[f64], variance: Option<&[f64]>, mode: LabelMode) -> UncertaintyReport {
    let plogp = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
    let epistemic = match mode {
        LabelMode::Single => -probs.iter().map(|&p| plogp(p)).sum::<f64>(),
        LabelMode::Multi => {
            -probs
                .iter()
                .map(|&p| plogp(p) + plogp(1.0 - p))
                .sum::<f64>()
                / probs.len() as f64
        }
    };
    let aleatoric = variance.map_or(0.0, |v| v.iter().sum::<f64>() / v.len() as f64);
    UncertaintyReport {
        aleatoric,
        epistemic: epistemic.max(0.0),
    }
}

/// Per-row uncertainty for a whole batch.
pub fn batch_uncertainty(
    g: &Graph,
    out: &HeadLogits,
    probs: &Tensor,
    mode: LabelMode,
) -> Vec<UncertaintyReport> {
    let var = out.variance.map(|v| g.tensor(v));
    (0..probs.rows())
        .map(|r| uncertainty(probs.row(r), var.as_ref().map(|v| v.row(r)), mode))
        .collect()
}

/// `log` of the MC-mean of `exp(x)` over draws: `[draws · m] → [m]`.
fn log_mean_exp_draws(g: &mut Graph, x: Var, draws: usize) -> Result<Var> {
    let m = g.value(x).len() / draws;
    if draws == 1 {
        return g.reshape(x, vec![m]);
    }
    let stacked = g.reshape(x, vec![draws, m])?;
    let lse = g.log_sum_exp(stacked, 0)?;
    Ok(g.add_scalar(lse, -(draws as f64).ln()))
}

/// Mean over rows of `−log p̄(target)`, with `p̄` the MC-mean softmax.
pub fn mc_cross_entropy(g: &mut Graph, out: &HeadLogits, targets: &[usize]) -> Result<Var> {
    let classes = g.cols(out.logits);
    if targets.len() != out.rows {
        return Err(Error::contract(format!(
            "{} targets for {} rows",
            targets.len(),
            out.rows
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::contract(format!(
            "target class {t} out of range for {classes} classes"
        )));
    }
    let logp = g.log_softmax_last(out.logits)?;
    let flat: Vec<usize> = (0..out.draws)
        .flat_map(|s| {
            targets
                .iter()
                .enumerate()
                .map(move |(i, &t)| (s * out.rows + i) * classes + t)
        })
        .collect();
    let picked = g.pick(logp, &flat)?;
    let lp = log_mean_exp_draws(g, picked, out.draws)?;
    let m = g.mean(lp);
    Ok(g.neg(m))
}

/// Mean over rows and classes of binary cross-entropy against the MC-mean
/// sigmoid, evaluated through log-sigmoid.
pub fn mc_binary_cross_entropy(
    g: &mut Graph,
    out: &HeadLogits,
    targets: &[Vec<f64>],
) -> Result<Var> {
    let classes = g.cols(out.logits);
    if targets.len() != out.rows || targets.iter().any(|t| t.len() != classes) {
        return Err(Error::contract(format!(
            "multi-label targets must be {} rows of {classes} entries",
            out.rows
        )));
    }
    let pos = g.log_sigmoid(out.logits);
    let negx = g.neg(out.logits);
    let neg = g.log_sigmoid(negx);
    let pos = log_mean_exp_draws(g, pos, out.draws)?;
    let neg = log_mean_exp_draws(g, neg, out.draws)?;
    let y: Vec<f64> = targets.iter().flatten().copied().collect();
    let ny: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let yv = g.constant_vec(vec![y.len()], y)?;
    let nyv = g.constant_vec(vec![ny.len()], ny)?;
    let a = g.mul(pos, yv)?;
    let b = g.mul(neg, nyv)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

/// Pairwise hinge `max(0, 1 − s_p + s_n)` averaged over positive/negative
/// pairs of each row, then over rows and draws. Scores are the logits.
pub fn mc_margin_loss(g: &mut Graph, out: &HeadLogits, targets: &[Vec<f64>]) -> Result<Var> {
    let classes = g.cols(out.logits);
    if targets.len() != out.rows || targets.iter().any(|t| t.len() != classes) {
        return Err(Error::contract(format!(
            "multi-label targets must be {} rows of {classes} entries",
            out.rows
        )));
    }
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut weights = Vec::new();
    for s in 0..out.draws {
        for (i, t) in targets.iter().enumerate() {
            let base = (s * out.rows + i) * classes;
            let p: Vec<usize> = (0..classes).filter(|&c| t[c] > 0.5).collect();
            let n: Vec<usize> = (0..classes).filter(|&c| t[c] <= 0.5).collect();
            let w = 1.0 / (p.len() * n.len()).max(1) as f64;
            for &pc in &p {
                for &nc in &n {
                    pos_idx.push(base + pc);
                    neg_idx.push(base + nc);
                    weights.push(w);
                }
            }
        }
    }
    let denom = (out.rows * out.draws) as f64;
    if pos_idx.is_empty() {
        return g.constant_vec(vec![], vec![0.0]);
    }
    let sp = g.pick(out.logits, &pos_idx)?;
    let sn = g.pick(out.logits, &neg_idx)?;
    let diff = g.sub(sn, sp)?;
    let hinge = g.add_scalar(diff, 1.0);
    let hinge = g.relu(hinge);
    let wv = g.constant_vec(vec![weights.len()], weights)?;
    let weighted = g.mul(hinge, wv)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / denom))
}

/// Loss on already-averaged probabilities: `−log p(target)` for single-label
/// output, mean binary cross-entropy for multi-label output (`target` holds
/// the positive class indices).
pub fn probability_loss(probs: &[f64], target: &[usize], mode: LabelMode) -> Result<f64> {
    if let Some(&t) = target.iter().find(|&&t| t >= probs.len()) {
        return Err(Error::contract(format!(
            "target class {t} out of range for {} classes",
            probs.len()
        )));
    }
    match mode {
        LabelMode::Single => {
            let [t] = target else {
                return Err(Error::contract(
                    "single-label loss needs exactly one target",
                ));
            };
            Ok(-probs[*t].ln())
        }
        LabelMode::Multi => {
            let total: f64 = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    if target.contains(&c) {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum();
            Ok(total / probs.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_check, Rng};

    fn single_draw(g: &mut Graph, logits: &[f64], rows: usize) -> HeadLogits {
        let classes = logits.len() / rows;
        let v = g
            .constant_vec(vec![rows, classes], logits.to_vec())
            .unwrap();
        HeadLogits {
            logits: v,
            draws: 1,
            rows,
            variance: None,
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let out = single_draw(&mut g, &[0.0, 0.0], 1);
        let l = mc_cross_entropy(&mut g, &out, &[0]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let out = single_draw(&mut g, &[30.0, 0.0], 1);
        let l = mc_cross_entropy(&mut g, &out, &[0]).unwrap();
        assert!(g.scalar(l) < 1e-12 && g.scalar(l) >= 0.0);
        assert!(mc_cross_entropy(&mut g, &out, &[2]).is_err());

        let mut rng = Rng::new(3);
        let x = rng.normals(12);
        let out = single_draw(&mut g, &x, 3);
        let targets = [1, 3, 0];
        let l = mc_cross_entropy(&mut g, &out, &targets).unwrap();
        let direct: f64 = (0..3)
            .map(|r| {
                let row = &x[r * 4..r * 4 + 4];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[targets[r]].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.scalar(l) - direct).abs() < 1e-14);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let out = single_draw(&mut g, &[0.0], 1);
        let l = mc_binary_cross_entropy(&mut g, &out, &[vec![1.0]]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let out = single_draw(&mut g, &[30.0, -30.0], 1);
        let l = mc_binary_cross_entropy(&mut g, &out, &[vec![1.0, 0.0]]).unwrap();
        assert!(g.scalar(l) < 1e-12);
        assert!(mc_binary_cross_entropy(&mut g, &out, &[vec![1.0]]).is_err());

        let mut rng = Rng::new(4);
        let x: Vec<f64> = rng.normals(10).iter().map(|v| 4.0 * v).collect();
        let y: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                (0..5)
                    .map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let out = single_draw(&mut g, &x, 2);
        let l = mc_binary_cross_entropy(&mut g, &out, &y).unwrap();
        let naive: f64 = x
            .iter()
            .zip(y.iter().flatten())
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 10.0;
        assert!((g.scalar(l) - naive).abs() < 1e-12);
    }

    #[test]
    fn margin_examples() {
        let mut g = Graph::new();
        let out = single_draw(&mut g, &[3.0, 1.5, 0.0], 1);
        let l = mc_margin_loss(&mut g, &out, &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = mc_margin_loss(&mut g, &out, &[vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = mc_margin_loss(&mut g, &out, &[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let out = single_draw(&mut g, &[0.7, 0.7], 1);
        let l = mc_margin_loss(&mut g, &out, &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
    }

    #[test]
    fn probability_loss_examples() {
        assert_eq!(
            probability_loss(&[1.0, 0.0], &[0], LabelMode::Single).unwrap(),
            0.0
        );
        assert!(
            (probability_loss(&[0.5, 0.5], &[1], LabelMode::Single).unwrap() - 2f64.ln()).abs()
                < 1e-15
        );
        assert!(probability_loss(&[0.5, 0.5], &[2], LabelMode::Single).is_err());
        let p = [0.2, 0.7, 0.1];
        let direct = -(0.2f64.ln() + 0.3f64.ln() + 0.9f64.ln()) / 3.0;
        assert!((probability_loss(&p, &[0], LabelMode::Multi).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn mean_over_identical_draws_is_exact() {
        let v = [0.1, 0.7, 0.1, 0.7, 0.1, 0.7];
        assert_eq!(mean_over_draws(&v, 3), vec![0.1, 0.7]);
    }

    #[test]
    fn uncertainty_bounds() {
        let u = uncertainty(&[0.25; 4], Some(&[0.0; 4]), LabelMode::Single);
        assert!((u.epistemic - 4f64.ln()).abs() < 1e-15);
        assert_eq!(u.aleatoric, 0.0);
        let u = uncertainty(&[1.0, 0.0], Some(&[0.5, 1.5]), LabelMode::Single);
        assert_eq!(u.epistemic, 0.0);
        assert_eq!(u.aleatoric, 1.0);
    }

    #[test]
    fn multi_draw_losses_match_finite_differences() {
        // Three draws of two rows.
        let mut rng = Rng::new(8);
        let x = Tensor::new(vec![6, 3], rng.normals(18)).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let out = HeadLogits {
                    logits: x,
                    draws: 3,
                    rows: 2,
                    variance: None,
                };
                let a = mc_cross_entropy(g, &out, &[2, 0])?;
                let b =
                    mc_binary_cross_entropy(g, &out, &[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]])?;
                let c = mc_margin_loss(g, &out, &[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]])?;
                let s = g.add(a, b)?;
                g.add(s, c)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
