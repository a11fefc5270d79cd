//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check over one operator closure.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative disagreement seen across all input elements.
    pub max_rel_err: f64,
    /// Tolerance the check was run at.
    pub tol: f64,
    /// `(input index, element index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric values at the worst element.
    pub worst_pair: Option<(f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.tol
        )?;
        if let (Some((i, j)), Some((a, n))) = (self.worst, self.worst_pair) {
            write!(f, " at input {} elem {} (analytic {:.6e}, numeric {:.6e})", i, j, a, n)?;
        }
        Ok(())
    }
}

/// Check the analytic gradient of `build` against central finite differences.
///
/// `build` receives a fresh graph and one gradient-tracked leaf per entry of
/// `inputs`, and must return a scalar output variable. Relative error uses
/// `|a − n| / max(|a|, |n|, 1)`, which degrades to absolute error for
/// small-magnitude gradients where the quotient would be noise-dominated.
pub fn gradcheck<B>(
    build: B,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    // Analytic gradients from one taped pass.
    let (analytic, _) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.backward(out)?;
        let grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (grads, g.value(out).item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, tol, worst: None, worst_pair: None };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
                report.worst_pair = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
