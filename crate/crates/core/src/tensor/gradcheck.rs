use super::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&g, xv)?;
    let out = g.value(y);
    if out.numel() != 1 {
        return Err(shape_err!("grad_check needs a scalar function, got {:?}", out.shape()));
    }
    Ok(out.item())
}

/// Maximum over elements of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`,
/// with `numeric` from central differences of step `eps`. Runs in `f64`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must lie in [1e-5, 1e-2], got {eps}"
        )));
    }
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(shape_err!(
            "grad_check needs a scalar function, got {:?}",
            g.shape(y)
        ));
    }
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
