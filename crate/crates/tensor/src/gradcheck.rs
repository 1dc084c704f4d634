//! Central finite differences, used as the independent oracle for every
//! analytic gradient produced by [`crate::Graph::backward`].

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every element `i` of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Worst mismatch found by [`check_gradients`].
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

/// Relative error with a magnitude floor below which differences are
/// measured absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward() against central differences for a scalar function
/// built from `inputs`. `build` receives a fresh graph and one differentiable
/// leaf per input and must return a scalar.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let graph = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let root = build(&graph, &leaves)?;
    graph.backward(root)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let r = build(&g, &vars)?;
        let v = g.value(r).item();
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut current: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..current[which].numel() {
            let orig = current[which].data()[i];
            current[which].data_mut()[i] = orig + eps;
            let plus = eval(&current)?;
            current[which].data_mut()[i] = orig - eps;
            let minus = eval(&current)?;
            current[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((which, i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check of the projection `Σ out ∘ R` of a tensor-valued `build`.
///
/// Numerically the same central difference as [`check_gradients`] on that
/// scalar, but the two perturbed outputs are subtracted element by element
/// before projecting, so the rounding of a large projected sum does not
/// swamp small derivatives.
pub fn check_projected_gradients<F>(
    build: F,
    inputs: &[Tensor<f64>],
    projection: &Tensor<f64>,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let graph = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = build(&graph, &leaves)?;
    if graph.shape(out) != projection.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "check_projected_gradients",
            lhs: graph.shape(out),
            rhs: projection.shape().to_vec(),
        });
    }
    let r = graph.constant(projection.clone());
    let root = graph.sum(graph.mul(out, r)?)?;
    graph.backward(root)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &vars)?;
        let v = g.value(out).clone();
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut current: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..current[which].numel() {
            let orig = current[which].data()[i];
            current[which].data_mut()[i] = orig + eps;
            let plus = eval(&current)?;
            current[which].data_mut()[i] = orig - eps;
            let minus = eval(&current)?;
            current[which].data_mut()[i] = orig;
            let diff: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(projection.data())
                .map(|((p, m), w)| (p - m) * w)
                .sum();
            let numeric = diff / (2.0 * eps);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((which, i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
