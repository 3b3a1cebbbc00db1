//! Central-difference gradient checking.

use super::{Graph, Tensor, TensorError, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NotScalar(value.shape().to_vec()));
    }
    Ok(value.values()[0])
}

/// Central differences `(f(x + eps) - f(x - eps)) / 2 eps` for every entry
/// of every parameter.
pub fn numerical_grad<F>(f: &F, params: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut gp = vec![0.0; params[p].numel()];
        for (i, slot) in gp.iter_mut().enumerate() {
            let orig = params[p].values()[i];
            work[p].values_mut()[i] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[p].values_mut()[i] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[p].values_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        grads.push(gp);
    }
    Ok(grads)
}

/// Outcome of [`grad_check`]; the worst entry is reported.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub analytic_grads: Vec<Vec<f64>>,
}

/// Compares reverse-mode gradients of the scalar `f` at `params` against
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad_tensor(*v).into_values()).collect();
    let numeric = numerical_grad(&f, params, eps)?;

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        analytic_grads: Vec::new(),
    };
    for (p, (ga, gn)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&a, &n)) in ga.iter().zip(gn).enumerate() {
            let err = relative_error(a, n);
            if err > worst.max_rel_error || err.is_nan() {
                worst = GradCheck {
                    max_rel_error: err,
                    param: p,
                    index: i,
                    analytic: a,
                    numeric: n,
                    analytic_grads: Vec::new(),
                };
            }
        }
    }
    worst.analytic_grads = analytic;
    Ok(worst)
}
