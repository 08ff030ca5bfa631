use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(parameter index, flat entry)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Central difference stencil used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p + h) - f(p - h)) / 2h`, truncation error O(h^2).
    ThreePoint,
    /// `(f(p - 2h) - 8 f(p - h) + 8 f(p + h) - f(p + 2h)) / 12h`, O(h^4).
    ///
    /// Tolerates a larger step, which keeps rounding noise in `f` from
    /// swamping very small gradient entries.
    FivePoint,
}

/// Checks every entry of every parameter against
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. `f` must be
/// deterministic; it receives one graph variable per parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_with(f, params, eps, Stencil::ThreePoint)
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], eps: f64, stencil: Stencil) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let entries: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, t)| (0..t.data().len()).map(move |j| (p, j))).collect();
    grad_check_entries(f, params, eps, stencil, &entries)
}

/// Like [`grad_check_with`] but only compares the listed
/// `(parameter index, flat entry)` pairs. Large models are checked on a
/// sample of their coordinates this way.
pub fn grad_check_entries<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    stencil: Stencil,
    entries: &[(usize, usize)],
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Invalid { op: "grad_check", msg: format!("eps {eps} outside (0, 1e-2]") });
    }
    if let Some(&(p, j)) = entries.iter().find(|&&(p, j)| p >= params.len() || j >= params[p].data().len()) {
        return Err(TensorError::Invalid { op: "grad_check", msg: format!("entry ({p}, {j}) out of range") });
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(TensorError::NonFinite("objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    drop(g);

    let mut report = GradCheck { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for &(p, j) in entries {
        let a = analytic[p][j];
        let orig = work[p].data()[j];
        let mut at = |offset: f64| {
            work[p].data_mut()[j] = orig + offset;
            let v = evaluate(&f, &work);
            work[p].data_mut()[j] = orig;
            v
        };
        let n = match stencil {
            Stencil::ThreePoint => (at(eps)? - at(-eps)?) / (2.0 * eps),
            Stencil::FivePoint => (at(-2.0 * eps)? - 8.0 * at(-eps)? + 8.0 * at(eps)? - at(2.0 * eps)?) / (12.0 * eps),
        };
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report = GradCheck { max_rel_err: rel, worst: (p, j), analytic: a, numeric: n };
        }
    }
    Ok(report)
}
