//! Finite-difference gradient checking.
//!
//! `f` receives a fresh graph and the leaf ids of the parameters and must
//! return a scalar node. Analytic gradients come from one backward sweep;
//! numeric gradients from central differences `(f(p+e) - f(p-e)) / 2e`.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

/// Denominator floor of the element-wise relative error, so that entries
/// where both gradients are ~0 compare by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

fn evaluate<T, F>(f: &mut F, params: &[Tensor<T>]) -> Result<(Graph<T>, Vec<NodeId>, NodeId)>
where
    T: Element,
    F: FnMut(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    Ok((g, ids, root))
}

pub fn analytic_gradient<T, F>(f: &mut F, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Element,
    F: FnMut(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, root) = evaluate(f, params)?;
    g.backward(root)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

pub fn numeric_gradient<T, F>(f: &mut F, params: &[Tensor<T>], eps: f64) -> Result<Vec<Tensor<T>>>
where
    T: Element,
    F: FnMut(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape());
        for e in 0..params[pi].numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = T::of(orig.as_f64() + eps);
            let (g, _, root) = evaluate(f, &work)?;
            let plus = g.value(root).data()[0].as_f64();
            work[pi].data_mut()[e] = T::of(orig.as_f64() - eps);
            let (g, _, root) = evaluate(f, &work)?;
            let minus = g.value(root).data()[0].as_f64();
            work[pi].data_mut()[e] = orig;
            grad.data_mut()[e] = T::of((plus - minus) / (2.0 * eps));
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)` over all entries.
pub fn max_relative_error<T: Element>(analytic: &[Tensor<T>], numeric: &[Tensor<T>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Maximum relative error between analytic and central-difference
/// gradients of `f` at `params`.
pub fn grad_check<T, F>(mut f: F, params: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Element,
    F: FnMut(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_gradient(&mut f, params)?;
    let numeric = numeric_gradient(&mut f, params, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
