//! Central finite-difference checks of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub mod suite;

/// Pins a closure to the higher-ranked signature the checks expect, so it
/// can be bound with `let` and reused.
pub fn scalar_fn<S, F>(f: F) -> F
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    f
}

/// Relative error used by every gradient check: `|a - n| / max(1, |n|)`.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    (analytic - numeric).abs() / numeric.abs().max(S::one())
}

/// Evaluates a scalar function of one tensor on a fresh graph.
pub fn eval_scalar<S, F>(f: &F, x: &Tensor<S>) -> Result<S>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&g, xv)?;
    out.item().ok_or(Error::NotScalar { shape: out.shape() })
}

/// Reverse-mode gradient of a scalar function of one tensor.
pub fn analytic_grad<S, F>(f: &F, x: &Tensor<S>) -> Result<Tensor<S>>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&g, xv)?;
    let d = g.grad(out, &[xv], false)?;
    let value = (*d[0].value()).clone();
    Ok(value)
}

/// Central differences `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for
/// every coordinate.
pub fn numeric_grad<S, F>(f: &F, x: &Tensor<S>, eps: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    if !(eps > S::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (eps + eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest relative error between the reverse-mode gradient of `f` at `x` and
/// its central-difference estimate.
pub fn finite_difference_check<S, F>(f: &F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    let analytic = analytic_grad(f, x)?;
    let numeric = numeric_grad(f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(S::zero(), S::max))
}

/// Outcome of a finite-difference check with the kink guard.
#[derive(Clone, Debug, PartialEq)]
pub struct GuardedCheck {
    pub name: String,
    /// Largest relative error over the coordinates that were compared.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` probes changed some ReLU sign.
    pub skipped: usize,
}

impl GuardedCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_error < tol
    }
}

/// Value of `f` at `x` together with the ReLU sign pattern of its tape.
pub fn eval_with_pattern<S, F>(f: &F, x: &Tensor<S>) -> Result<(S, Vec<bool>)>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    let g = Graph::new();
    let out = f(&g, g.leaf(x.clone()))?;
    let v = out.item().ok_or(Error::NotScalar { shape: out.shape() })?;
    Ok((v, g.relu_pattern()))
}

/// Central differences on the coordinates `coords` of `x`, skipping any
/// coordinate whose probes land on a different ReLU piece than `x` itself.
pub fn guarded_check<S, F>(
    name: impl Into<String>,
    f: &F,
    x: &Tensor<S>,
    coords: &[usize],
    eps: S,
) -> Result<GuardedCheck>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    if !(eps > S::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = analytic_grad(f, x)?;
    let (_, base) = eval_with_pattern(f, x)?;
    let mut probe = x.clone();
    let mut check = GuardedCheck {
        name: name.into(),
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, p_plus) = eval_with_pattern(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, p_minus) = eval_with_pattern(f, &probe)?;
        probe.data_mut()[i] = orig;
        if p_plus != base || p_minus != base {
            check.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (eps + eps);
        let err = relative_error(analytic.data()[i], numeric).to_f64().unwrap();
        check.max_error = check.max_error.max(err);
        check.checked += 1;
    }
    Ok(check)
}

/// [`guarded_check`] over every coordinate.
pub fn guarded_check_all<S, F>(name: impl Into<String>, f: &F, x: &Tensor<S>, eps: S) -> Result<GuardedCheck>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    guarded_check(name, f, x, &coords, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::from_slice(&[4], &[0.3, -1.2, 5.0, 2.5]).unwrap();
        let err = finite_difference_check(&scalar_fn(|_g, x: Var<'_, f64>| x.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn square_gradient_close() {
        let x = Tensor::from_slice(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let f = scalar_fn(|_g: &Graph<f64>, x| x.mul(x)?.sum_all());
        let err = finite_difference_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        let a = analytic_grad(&f, &x).unwrap();
        assert_eq!(a.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn kink_probes_are_skipped() {
        let x = Tensor::from_slice(&[3], &[1e-9, 0.5, -0.5]).unwrap();
        let f = scalar_fn(|_g: &Graph<f64>, x| x.relu()?.sum_all());
        let c = guarded_check_all("relu", &f, &x, 1e-6).unwrap();
        assert_eq!((c.checked, c.skipped), (2, 1));
        assert!(c.max_error < 1e-9);
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let x = Tensor::from_slice(&[1], &[1.0]).unwrap();
        let f = scalar_fn(|_g: &Graph<f64>, x| x.sum_all());
        assert!(finite_difference_check(&f, &x, 0.0).is_err());
    }
}
