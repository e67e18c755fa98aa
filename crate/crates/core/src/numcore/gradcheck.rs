//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|autodiff − fd| / (|fd| + 1e-8)`
pub fn relative_error(autodiff: f64, fd: f64) -> f64 {
    (autodiff - fd).abs() / (fd.abs() + 1e-8)
}

/// Outcome of a parameter-space check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval_scalar(g: &Graph, v: Var) -> Result<f64> {
    if g.value(v).len() != 1 {
        return Err(Error::contract("finite-difference target is not scalar"));
    }
    Ok(g.scalar(v))
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`, over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    probe.set_requires_grad(true);

    let mut g = Graph::new();
    let xv = g.input(&probe);
    let out = f(&mut g, xv)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let autodiff = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = {
            let mut g = Graph::new();
            let v = g.input(&probe);
            let o = f(&mut g, v)?;
            eval_scalar(&g, o)?
        };
        probe.data_mut()[i] = orig - h;
        let minus = {
            let mut g = Graph::new();
            let v = g.input(&probe);
            let o = f(&mut g, v)?;
            eval_scalar(&g, o)?
        };
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(autodiff[i], fd));
    }
    Ok(worst)
}

/// Same check over parameter coordinates of a store.
///
/// `coords` selects `(param, flat index)` pairs; `None` checks every
/// coordinate of `ids`. The store is restored before returning.
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    coords: Option<&[(ParamId, usize)]>,
    f: F,
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    store.absorb_grads(&g)?;

    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = ids
                .iter()
                .flat_map(|&id| (0..store.get(id).numel()).map(move |k| (id, k)))
                .collect();
            &all
        }
    };

    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for &(id, k) in coords {
        let autodiff = store.get(id).grad().map_or(0.0, |g| g[k]);
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + h;
        let plus = {
            let mut g = Graph::new();
            let o = f(&mut g, store)?;
            eval_scalar(&g, o)?
        };
        store.get_mut(id).data_mut()[k] = orig - h;
        let minus = {
            let mut g = Graph::new();
            let o = f(&mut g, store)?;
            eval_scalar(&g, o)?
        };
        store.get_mut(id).data_mut()[k] = orig;
        let err = relative_error(autodiff, (plus - minus) / (2.0 * h));
        if err > result.max_rel_error || result.worst.is_none() {
            result.max_rel_error = result.max_rel_error.max(err);
            result.worst = Some((store.name(id).to_string(), k));
        }
    }
    store.zero_grads();
    Ok(result)
}
