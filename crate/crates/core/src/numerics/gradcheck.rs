//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{PaeError, Result};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat offset of the worst element.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &ids)?;
    if g.value(loss).len() != 1 {
        return Err(PaeError::Contract("grad_check needs a scalar-valued computation".into()));
    }
    Ok(g.scalar(loss))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` for every element of every tensor in `params`.
///
/// `f` receives the parameters already bound as differentiable leaves, in
/// order, and must return a scalar node. It must be deterministic; two
/// forward passes that disagree are reported as a contract error.
pub fn grad_check<F>(f: F, params: &mut [Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
        let loss = f(&mut g, &ids)?;
        g.backward(loss)?;
        ids.iter()
            .zip(params.iter())
            .map(|(&id, p)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    };

    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(PaeError::Contract(format!(
            "computation is not deterministic ({first} vs {second})"
        )));
    }

    let mut checks = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut worst = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            params[pi].data_mut()[e] = orig + h;
            let up = evaluate(&f, params)?;
            params[pi].data_mut()[e] = orig - h;
            let down = evaluate(&f, params)?;
            params[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][e];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error {
                worst = ParamCheck {
                    index: pi,
                    max_rel_error: err,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
        checks.push(worst);
    }
    let passed = checks.iter().all(|c| c.max_rel_error < tol);
    Ok(GradCheckReport {
        params: checks,
        tol,
        passed,
    })
}
