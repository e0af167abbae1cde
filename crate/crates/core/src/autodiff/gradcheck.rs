//! Central finite-difference gradient oracle.

use crate::autodiff::graph::{Graph, Node};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check: the worst relative error and where it was.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `build_loss` must deterministically construct a scalar loss from leaf
/// nodes bound to `params` (in order). Returns the maximum over all
/// parameter elements of
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn finite_difference_check<F>(
    params: &mut [Tensor],
    h: f64,
    mut build_loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Node]) -> Result<Node>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {h} must be > 0")));
    }
    for p in params.iter_mut() {
        p.set_requires_grad(true);
    }

    // Analytic pass.
    let mut g = Graph::new();
    let nodes: Vec<Node> = params.iter().map(|p| g.leaf(p)).collect();
    let loss = build_loss(&mut g, &nodes)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Contract(
            "finite_difference_check requires a scalar loss".into(),
        ));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = nodes
        .iter()
        .zip(params.iter())
        .map(|(n, p)| match g.grad(*n) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    drop(g);

    let eval = |params: &[Tensor], build_loss: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let nodes: Vec<Node> = params.iter().map(|p| g.leaf(p)).collect();
        let loss = build_loss(&mut g, &nodes)?;
        g.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_index: 0,
    };
    for p_idx in 0..params.len() {
        for e_idx in 0..params[p_idx].numel() {
            let orig = params[p_idx].data()[e_idx];
            params[p_idx].data_mut()[e_idx] = orig + h;
            let plus = eval(params, &mut build_loss)?;
            params[p_idx].data_mut()[e_idx] = orig - h;
            let minus = eval(params, &mut build_loss)?;
            params[p_idx].data_mut()[e_idx] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[p_idx][e_idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = p_idx;
                report.worst_index = e_idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_checks_out() {
        let mut params = vec![Tensor::scalar(2.0)];
        let report = finite_difference_check(&mut params, 1e-5, |g, nodes| {
            g.pow_scalar(nodes[0], 2.0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let report = finite_difference_check(&mut params, 1e-5, |g, _nodes| {
            let c = g.leaf(&Tensor::scalar(4.0));
            g.sum(c)
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut params = vec![Tensor::scalar(1.0)];
        assert!(
            finite_difference_check(&mut params, 0.0, |g, nodes| g.sum(nodes[0])).is_err()
        );
    }
}
