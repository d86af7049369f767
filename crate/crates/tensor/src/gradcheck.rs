use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    /// Max relative error per input.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + εe) − f(x − εe)) / 2ε`, coordinate by coordinate.
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(op: &str, inputs: &[Tensor], eps: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let r = f(&mut g, &vars)?;
        Ok(g.value(r).item())
    };

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].shape());
        let mut worst = 0.0f64;
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tolerance);
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error,
        tolerance,
        passed,
    })
}
