//! Second-derivative operations built on the symbolic backward pass:
//! Hessian-vector products and mixed (parameter-of-input) gradients.
//!
//! Both run backward-of-backward on one tape: the first adjoint sweep
//! records the gradient as tape nodes, a scalarization of that gradient is
//! then differentiated again. The Hessian itself is never materialized.

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::tape::{Bindings, NodeId, Tape};
use crate::tensor::Tensor;

/// Splits a trainable-subspace vector into one tensor per trainable segment.
pub fn split_trainable(params: &ParamVector, v: &[f64]) -> Result<Vec<(String, Tensor)>> {
    if v.len() != params.trainable_len() {
        return Err(Error::Dimension(format!(
            "vector length {} vs trainable parameter count {}",
            v.len(),
            params.trainable_len()
        )));
    }
    let mut out = Vec::new();
    let mut at = 0;
    for seg in params.trainable_segments() {
        let t = Tensor::new(seg.shape.clone(), v[at..at + seg.len()].to_vec())?;
        at += seg.len();
        out.push((seg.name.clone(), t));
    }
    Ok(out)
}

/// Flattens per-segment tensors back into the trainable-subspace layout.
pub fn flatten_trainable(params: &ParamVector, parts: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.trainable_len());
    for t in parts {
        out.extend_from_slice(t.data());
    }
    out
}

/// Node ids of the trainable segment variables, in segment order.
pub fn trainable_var_nodes(tape: &Tape, params: &ParamVector) -> Result<Vec<NodeId>> {
    params
        .trainable_segments()
        .map(|seg| {
            tape.var_node(&seg.name)
                .ok_or_else(|| Error::UnboundVariable(seg.name.clone()))
        })
        .collect()
}

/// Appends the nodes computing H*v for the scalar `loss`, where H is the
/// Hessian over the trainable segments and v enters as variables named
/// `v_<segment>`. Returns one output node per trainable segment.
///
/// Keeping v symbolic lets callers rebind it and re-run a cached evaluator,
/// which is how Hessian columns and the stochastic estimator iterate.
pub fn hvp_nodes(tape: &mut Tape, loss: NodeId, params: &ParamVector) -> Result<Vec<NodeId>> {
    let wrt = trainable_var_nodes(tape, params)?;
    let first = tape.adjoints(loss, &wrt)?;
    let mut gdotv: Option<NodeId> = None;
    for (grad, seg) in first.grads.iter().zip(params.trainable_segments()) {
        let v = tape.var(format!("v_{}", seg.name), &seg.shape)?;
        let term = tape.dot(*grad, v)?;
        gdotv = Some(match gdotv {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let gdotv = gdotv.ok_or_else(|| Error::InvalidArgument("no trainable segments".into()))?;
    let second = tape.adjoints(gdotv, &wrt)?;
    Ok(second.grads)
}

/// Binds `v_<segment>` variables from a flat trainable-subspace vector.
pub fn bind_hvp_vector(bindings: &mut Bindings, params: &ParamVector, v: &[f64]) -> Result<()> {
    for (name, tensor) in split_trainable(params, v)? {
        bindings.set(format!("v_{name}"), tensor);
    }
    Ok(())
}

/// Hessian-vector product H*v of a scalar loss node, H taken over the
/// trainable segments of `params`. One-shot convenience over [`hvp_nodes`].
pub fn hvp(
    tape: &mut Tape,
    loss: NodeId,
    params: &ParamVector,
    v: &[f64],
    bindings: &Bindings,
) -> Result<Vec<f64>> {
    let outs = hvp_nodes(tape, loss, params)?;
    let mut b = bindings.clone();
    bind_hvp_vector(&mut b, params, v)?;
    let parts = tape.evaluate_many(&outs, &b)?;
    Ok(flatten_trainable(params, &parts))
}

/// Mixed second derivative: the gradient over trainable parameters of a
/// scalarized inner gradient.
pub struct MixedGradient {
    /// Flat vector over the trainable subspace.
    pub grad: Vec<f64>,
    /// True when the scalar did not depend on the inner node at all; the
    /// gradient is then exactly zero and callers may surface a warning.
    pub independent: bool,
}

/// Computes d/dtheta [ <weights, d(scalar)/d(inner)> ].
///
/// With `weights = None` the inner gradient is summed over all components.
/// A weights tensor restricted to one row of an embedding block turns this
/// into the parameter gradient of a single token's saliency score.
pub fn mixed_gradient(
    tape: &mut Tape,
    scalar: NodeId,
    inner: NodeId,
    weights: Option<&Tensor>,
    params: &ParamVector,
    bindings: &Bindings,
) -> Result<MixedGradient> {
    let first = tape.adjoints(scalar, &[inner])?;
    let independent = first.missing[0];
    let g_inner = first.grads[0];
    let scalarized = match weights {
        Some(w) => {
            if w.shape() != tape.shape(g_inner) {
                return Err(Error::Dimension(format!(
                    "weight shape {:?} vs inner gradient {:?}",
                    w.shape(),
                    tape.shape(g_inner)
                )));
            }
            let w = tape.constant(w.clone());
            tape.dot(g_inner, w)?
        }
        None => tape.sum(g_inner),
    };
    let wrt = trainable_var_nodes(tape, params)?;
    let second = tape.adjoints(scalarized, &wrt)?;
    let parts = tape.evaluate_many(&second.grads, bindings)?;
    Ok(MixedGradient {
        grad: flatten_trainable(params, &parts),
        independent,
    })
}
