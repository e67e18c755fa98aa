//! Relation-frequency prior and the frequency-aware feature correction.
//!
//! The gate maps the self-information of every class frequency into feature
//! space, `g = σ(log(1/(f + ε))·W + b)` with `W: [|R|, d]`, and blends the
//! raw features with their parameter-free layer norm:
//! `x' = g ⊙ LN(x) + (1 − g) ⊙ x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Rng, Tensor, Var, LAYER_NORM_EPS};

/// Smoothing inside `log(1/(f + ε))`.
pub const DEFAULT_FREQ_EPS: f64 = 1e-6;

/// Half-width of the uniform initialisation of the gate weight.
pub const GATE_INIT_BOUND: f64 = 1e-2;

/// Per-class occurrence counts and their normalised frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPrior {
    pub counts: Vec<u64>,
    pub f: Vec<f64>,
    pub eps: f64,
}

/// `f_k = n_k / Σ n_j`.
pub fn compute_frequencies(counts: &[u64], eps: f64) -> Result<FrequencyPrior> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::contract(
            "frequency prior needs at least one positive count",
        ));
    }
    let f = counts.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(FrequencyPrior {
        counts: counts.to_vec(),
        f,
        eps,
    })
}

impl FrequencyPrior {
    /// Equal counts over `classes`; stands in for the prior when frequency
    /// guidance is ablated.
    pub fn uniform(classes: usize, eps: f64) -> Self {
        compute_frequencies(&vec![1; classes.max(1)], eps).expect("positive counts")
    }

    pub fn num_classes(&self) -> usize {
        self.f.len()
    }

    /// `log(1/(f_k + ε))`, strictly decreasing in `f_k`.
    pub fn self_information(&self) -> Vec<f64> {
        self.f
            .iter()
            .map(|&f| (1.0 / (f + self.eps)).ln())
            .collect()
    }

    /// Joint prior over the concatenated class sets.
    pub fn concat(parts: &[&FrequencyPrior]) -> Result<Self> {
        let counts: Vec<u64> = parts
            .iter()
            .flat_map(|p| p.counts.iter().copied())
            .collect();
        let eps = parts.first().map_or(DEFAULT_FREQ_EPS, |p| p.eps);
        compute_frequencies(&counts, eps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prior serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::parse("frequency prior", e))?;
        let check = compute_frequencies(&p.counts, p.eps)?;
        if check.f.len() != p.f.len() {
            return Err(Error::parse(
                "frequency prior",
                "counts and f lengths differ",
            ));
        }
        Ok(p)
    }
}

/// Learnable gate parameters `W: [|R|, d]`, `b: [d]`.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyGate {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl FrequencyGate {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight =
            store.insert_uniform(format!("{prefix}/w"), &[classes, dim], GATE_INIT_BOUND, rng)?;
        let bias = store.insert_const(format!("{prefix}/b"), &[dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            classes,
            dim,
        })
    }

    pub fn from_weights(
        store: &mut ParamStore,
        prefix: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        let (classes, dim) = match weight.shape() {
            [r, d] => (*r, *d),
            s => return Err(Error::shape(format!("gate weight must be 2-D, got {s:?}"))),
        };
        if bias.numel() != dim {
            return Err(Error::shape(format!(
                "gate bias has {} values for d = {dim}",
                bias.numel()
            )));
        }
        let weight = store.insert(format!("{prefix}/w"), weight)?;
        let bias = store.insert(format!("{prefix}/b"), bias)?;
        Ok(Self {
            weight,
            bias,
            classes,
            dim,
        })
    }

    /// Records `σ(log(1/(f + ε))·W + b)` as a `[d]` vector.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prior: &FrequencyPrior,
    ) -> Result<Var> {
        if prior.num_classes() != self.classes {
            return Err(Error::contract(format!(
                "prior covers {} classes, gate expects {}",
                prior.num_classes(),
                self.classes
            )));
        }
        let info = g.constant_vec(vec![1, self.classes], prior.self_information())?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let pre = g.matmul(info, w)?;
        let pre = g.add_row(pre, b)?;
        let gate = g.sigmoid(pre);
        g.reshape(gate, vec![self.dim])
    }
}

/// Evaluates the gate outside of a training graph.
pub fn gate_values(
    prior: &FrequencyPrior,
    gate: &FrequencyGate,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = gate.forward(&mut g, store, prior)?;
    Ok(g.tensor(v))
}

/// Records `gate ⊙ LN(x) + (1 − gate) ⊙ x` with `gate: [d]` broadcast over rows.
pub fn frequency_correct(g: &mut Graph, x: Var, gate: Var) -> Result<Var> {
    if g.value(gate).len() != g.cols(x) {
        return Err(Error::contract(format!(
            "gate has {} entries for features of width {}",
            g.value(gate).len(),
            g.cols(x)
        )));
    }
    let normed = g.layer_norm(x, LAYER_NORM_EPS)?;
    let keep = g.one_minus(gate);
    let a = g.mul_row(normed, gate)?;
    let b = g.mul_row(x, keep)?;
    g.add(a, b)
}

pub fn frequency_correct_tensor(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gv = g.constant(gate);
    let y = frequency_correct(&mut g, xv, gv)?;
    Ok(g.tensor(y))
}
