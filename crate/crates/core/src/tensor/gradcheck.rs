//! Central finite-difference verification of analytic gradients (`f64` only).

use super::dense::Tensor;
use super::graph::{Graph, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over checked elements.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements whose finite difference is unstable under step refinement
    /// (a kink such as `relu` or `abs` lies within one step).
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.skipped * 100 <= self.checked + self.skipped
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub const REL_FLOOR: f64 = 1e-3;

/// Compares gradients of the scalar built by `f` with respect to every element
/// of every input against central differences with the given `step`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |pert: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pert.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.item(loss))
    };
    let central = |work: &mut Vec<Tensor<f64>>, i: usize, j: usize, h: f64| -> Result<f64> {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(work)?;
        work[i].data_mut()[j] = orig;
        Ok((plus - minus) / (2.0 * h))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let coarse = central(&mut work, i, j, step)?;
            let fine = central(&mut work, i, j, step / 4.0)?;
            let scale = coarse.abs().max(fine.abs()).max(REL_FLOOR);
            if (coarse - fine).abs() > 1e-3 * scale {
                report.skipped += 1;
                continue;
            }
            let a = analytic[i].data()[j];
            let err = (a - coarse).abs() / a.abs().max(coarse.abs()).max(REL_FLOOR);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
