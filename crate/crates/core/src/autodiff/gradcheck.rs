use super::{AutodiffError, Graph, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over components of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the reverse-mode gradient of a scalar function with central
/// differences `(f(x+eps) - f(x-eps)) / 2 eps`, one component at a time.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let eval = |t: &Tensor| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    if !g.value(out).item().is_finite() {
        return Err(AutodiffError::NonFiniteObjective);
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut numeric = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(AutodiffError::NonFiniteObjective);
        }
        numeric.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }

    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        numeric,
    })
}

pub fn grad_check_default<F>(f: F, x: &Tensor) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    grad_check(f, x, DEFAULT_EPS)
}
