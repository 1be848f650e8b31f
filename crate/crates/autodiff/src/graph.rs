use std::collections::{HashMap, HashSet};

use crate::error::AutodiffError;
use crate::tensor::{backward_rule, with_grad_mode, Tensor};

/// Nodes reachable from `root` that take part in differentiation, in
/// topological order (inputs before outputs).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for p in op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// With `create_graph` the returned gradients carry their own derivative
/// graph and can be differentiated again. Inputs that `output` does not
/// depend on get exact zeros.
pub fn grad(
    output: &Tensor,
    inputs: &[&Tensor],
    create_graph: bool,
) -> Result<Vec<Tensor>, AutodiffError> {
    if output.numel() != 1 {
        return Err(AutodiffError::NonScalarLoss(output.shape().to_vec()));
    }
    if !output.all_finite() {
        return Err(AutodiffError::NonFinite("loss".into()));
    }
    let wanted: HashSet<usize> = inputs.iter().map(|t| t.id()).collect();
    let order = if output.requires_grad() {
        topo_order(output)
    } else {
        Vec::new()
    };
    if create_graph {
        if let Some(bad) = order
            .iter()
            .filter_map(|n| n.op())
            .find(|op| !op.twice_differentiable())
        {
            return Err(AutodiffError::NotTwiceDifferentiable(bad.name()));
        }
    }

    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    let mut kept: HashMap<usize, Tensor> = HashMap::new();
    with_grad_mode(create_graph, || {
        if let Some(root) = order.last() {
            grads.insert(root.id(), Tensor::ones(root.shape()));
        }
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if wanted.contains(&node.id()) {
                kept.insert(node.id(), g.clone());
            }
            let Some(op) = node.op() else {
                continue;
            };
            let parents = op.parents();
            let pgrads = backward_rule(node, op, &g);
            for (p, pg) in parents.into_iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                let acc = match grads.remove(&p.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
    });

    Ok(inputs
        .iter()
        .map(|t| {
            kept.remove(&t.id())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Plain first-order gradients of a scalar loss.
pub fn backward(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>, AutodiffError> {
    let refs: Vec<&Tensor> = params.iter().collect();
    grad(loss, &refs, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::param(&[], vec![3.0]);
        let y = x.mul(&x);
        let g = grad(&y, &[&x], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let unused = Tensor::param(&[3], vec![1.0, 1.0, 1.0]);
        let y = x.square().sum();
        let g = grad(&y, &[&x, &unused], false).unwrap();
        assert_eq!(g[1].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        assert!(matches!(
            grad(&x.square(), &[&x], false),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Tensor::param(&[], vec![2.0]);
        let y = x.mul(&x).mul(&x);
        let g = grad(&y, &[&x], true).unwrap();
        assert_eq!(g[0].item(), 12.0);
        let h = grad(&g[0], &[&x], false).unwrap();
        assert_eq!(h[0].item(), 12.0);
    }

    #[test]
    fn fused_op_blocks_double_backward() {
        let x = Tensor::param(&[3], vec![0.1, -0.2, 0.3]);
        let y = x.silu_fused().sum();
        assert!(grad(&y, &[&x], false).is_ok());
        assert!(matches!(
            grad(&y, &[&x], true),
            Err(AutodiffError::NotTwiceDifferentiable("fused_silu"))
        ));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::param(&[], vec![1.5]);
        let a = x.scale(2.0);
        let y = a.mul(&a).add(&a);
        let g = grad(&y, &[&x], false).unwrap();
        // y = 4x^2 + 2x
        assert!((g[0].item() - (8.0 * 1.5 + 2.0)).abs() < 1e-12);
    }
}
