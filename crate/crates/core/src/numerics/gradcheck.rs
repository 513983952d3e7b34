use super::{Graph, NumericsError, Tensor, Var};

/// Result of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`; infinite when
    /// any comparison is non-finite.
    pub max_rel_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// Smallest kink distance seen in the analytic graph.
    pub kink_margin: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Evaluate `build` once for a value.
pub fn evaluate<F>(build: &F, point: &Tensor) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let root = build(&mut g, x)?;
    Ok(g.value(root).item())
}

/// Gradient of `build` at `point` via the graph's backward pass.
pub fn analytic_gradient<F>(build: &F, point: &Tensor) -> Result<(Tensor, f64), NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let root = build(&mut g, x)?;
    let grads = g.backward(root)?;
    Ok((grads.wrt(x), g.kink_margin()))
}

/// Central-difference gradient with step `h`.
pub fn numeric_gradient<F>(build: &F, point: &Tensor, h: f64) -> Result<Tensor, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    let mut out = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(build, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(build, &probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Compare the analytic gradient of a scalar graph builder with central
/// differences at `point`.
pub fn grad_check<F>(build: F, point: &Tensor, h: f64) -> Result<GradCheck, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    let (analytic, kink_margin) = analytic_gradient(&build, point)?;
    let numeric = numeric_gradient(&build, point, h)?;
    let mut max_rel_error: f64 = 0.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let err = (a - n).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            max_rel_error = f64::INFINITY;
            break;
        }
        max_rel_error = max_rel_error.max(err);
    }
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
        kink_margin,
    })
}
