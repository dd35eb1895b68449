//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::Result;

/// Compares the tape gradient of `build`'s scalar output against central
/// finite differences, elementwise over every entry of every input, and
/// returns the maximum relative error (denominator floored at 1e−8).
///
/// `build` must construct the same computation for any input values; inputs
/// should be sampled away from kinks (relu corners, pooling ties), where the
/// derivative is not defined.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let loss = build(&mut graph, &ids)?;
    let grads = graph.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).as_scalar())
    };

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let tape_grad = grads.grad_tensor(ids[i], input);
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + eps;
            let f_plus = eval(&work)?;
            work[i].data_mut()[j] = x - eps;
            let f_minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let tape = tape_grad.data()[j];
            let rel = (tape - fd).abs() / tape.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
