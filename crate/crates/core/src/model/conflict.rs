use serde::{Deserialize, Serialize};

use super::{ClipBatch, FReMuReModel, LossParts};
use crate::error::{Error, Result};
use crate::heads::HeadPass;
use crate::numcore::{Graph, Var};

/// Pairwise cosines between relation-loss gradients on shared parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradConflictReport {
    /// `None` when nothing is shared.
    pub attention_spatial: Option<f64>,
    pub attention_contact: Option<f64>,
    pub spatial_contact: Option<f64>,
    /// Number of shared scalar parameters.
    pub shared_params: usize,
}

impl GradConflictReport {
    pub fn not_applicable() -> Self {
        Self {
            attention_spatial: None,
            attention_contact: None,
            spatial_contact: None,
            shared_params: 0,
        }
    }

    pub fn cosines(&self) -> Vec<f64> {
        [
            self.attention_spatial,
            self.attention_contact,
            self.spatial_contact,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn any_negative(&self) -> bool {
        self.cosines().iter().any(|&c| c < 0.0)
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Conflict report for the three relation losses of `clip`.
pub fn grad_conflict(model: &FReMuReModel, clip: &ClipBatch) -> Result<GradConflictReport> {
    grad_conflict_with(model, clip, |_, parts| {
        Ok([parts.attention, parts.spatial, parts.contact])
    })
}

/// Conflict report for three losses derived from the clip's loss parts.
///
/// Sampling and perturbation are disabled; each loss is backpropagated
/// separately and its gradient restricted to the shared parameters.
pub fn grad_conflict_with<F>(
    model: &FReMuReModel,
    clip: &ClipBatch,
    select: F,
) -> Result<GradConflictReport>
where
    F: Fn(&mut Graph, &LossParts) -> Result<[Var; 3]>,
{
    let shared = model.shared_param_ids();
    if shared.is_empty() {
        return Ok(GradConflictReport::not_applicable());
    }
    let mut store = model.store.clone();
    let mut g = Graph::new();
    let parts = model.clip_losses(&mut g, &store, clip, &mut HeadPass::deterministic())?;
    let losses = select(&mut g, &parts)?;
    let mut grads = Vec::with_capacity(3);
    for loss in losses {
        if !g.scalar(loss).is_finite() {
            return Err(Error::Numerical {
                epoch: 0,
                step: 0,
                message: "non-finite loss while measuring gradient conflict".into(),
            });
        }
        g.zero_grad();
        store.zero_grads();
        g.backward(loss)?;
        store.absorb_grads(&g)?;
        grads.push(store.flat_grad(&shared));
    }
    Ok(GradConflictReport {
        attention_spatial: Some(cosine(&grads[0], &grads[1])),
        attention_contact: Some(cosine(&grads[0], &grads[2])),
        spatial_contact: Some(cosine(&grads[1], &grads[2])),
        shared_params: grads[0].len(),
    })
}
