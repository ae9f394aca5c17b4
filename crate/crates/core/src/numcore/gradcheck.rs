//! Central finite-difference check of reverse-mode gradients.

use super::graph::{Graph, NodeId, ParamId};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Magnitudes below this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries checked per parameter; larger matrices are strided evenly.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

impl GradCheck {
    /// `loss` receives one node per entry of `params`, registered as
    /// `ParamId(i)`, and must return a scalar node.
    pub fn run<F>(&self, params: &[Matrix], loss: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let eval = |ps: &[Matrix]| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let nodes: Vec<NodeId> = ps
                .iter()
                .enumerate()
                .map(|(i, p)| g.param(ParamId(i), p))
                .collect();
            let out = loss(&mut g, &nodes)?;
            Ok((g, out))
        };
        let (g, out) = eval(params)?;
        let grads = g.backward(out)?;
        let mut report = GradCheckReport::default();
        let mut work = params.to_vec();
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads
                .param(ParamId(pi))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
            let stride = p.len().div_ceil(self.max_entries.max(1)).max(1);
            for e in (0..p.len()).step_by(stride) {
                let orig = p.data()[e];
                work[pi].data_mut()[e] = orig + self.step;
                let (gp, op) = eval(&work)?;
                let plus = gp.value(op).item()?;
                work[pi].data_mut()[e] = orig - self.step;
                let (gm, om) = eval(&work)?;
                let minus = gm.value(om).item()?;
                work[pi].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                if !numeric.is_finite() {
                    return Err(Error::NonFinite(format!("finite difference of param {pi}")));
                }
                let err = rel_error(analytic.data()[e], numeric);
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    if err >= report.max_rel_error {
                        report.worst = Some((pi, e));
                    }
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}
