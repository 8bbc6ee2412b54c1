//! Finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::tensor::no_grad;
use crate::{Float, Tensor};

/// Numerical derivative scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`
    #[default]
    Central,
    /// Fourth-order: `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`
    FivePoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Every checked coordinate, in parameter order.
    pub entries: Vec<GradEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

impl GradCheckReport {
    /// Worst relative error over the entries accepted by `keep`.
    pub fn max_rel_error_where(&self, keep: impl Fn(&GradEntry) -> bool) -> f64 {
        self.entries.iter().filter(|e| keep(e)).map(GradEntry::rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(1e−8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_finite<T: Float>(name: &str, v: &[T]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(TensorError::NonFinite {
            name: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Compares the backward pass of `f` against finite differences over every
/// coordinate of every named parameter. `f` receives fresh parameter
/// tensors in the order given and must return a scalar.
pub fn grad_check<T, F>(f: F, params: &[(&str, Tensor<T>)], eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    T: Float,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    for (name, p) in params {
        check_finite(name, p.data())?;
    }
    let leaves: Vec<Tensor<T>> = params.iter().map(|(_, p)| p.detached_leaf(true)).collect();
    let loss = f(&leaves)?;
    check_finite("loss", loss.data())?;
    loss.backward()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        entries: Vec::new(),
    };
    let base: Vec<Vec<T>> = params.iter().map(|(_, p)| p.to_vec()).collect();
    for (pi, (name, p)) in params.iter().enumerate() {
        let analytic: Vec<T> = match leaves[pi].grad() {
            Some(g) => g.clone(),
            None => vec![T::zero(); p.numel()],
        };
        check_finite(name, &analytic)?;
        for i in 0..p.numel() {
            let eval = |delta: f64| -> Result<f64> {
                no_grad(|| {
                    let inputs: Vec<Tensor<T>> = params
                        .iter()
                        .enumerate()
                        .map(|(pj, (_, q))| {
                            let mut d = base[pj].clone();
                            if pj == pi {
                                d[i] = T::from_f64(d[i].as_f64() + delta);
                            }
                            Tensor::from_vec(d, q.shape())
                        })
                        .collect::<Result<_>>()?;
                    let v = f(&inputs)?.item().as_f64();
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(TensorError::NonFinite {
                            name: name.to_string(),
                            index: i,
                        })
                    }
                })
            };
            let numeric = match stencil {
                Stencil::Central => (eval(eps)? - eval(-eps)?) / (2.0 * eps),
                Stencil::FivePoint => {
                    (-eval(2.0 * eps)? + 8.0 * eval(eps)? - 8.0 * eval(-eps)? + eval(-2.0 * eps)?) / (12.0 * eps)
                }
            };
            let a = analytic[i].as_f64();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            report.entries.push(GradEntry {
                name: name.to_string(),
                index: i,
                analytic: a,
                numeric,
            });
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((name.to_string(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1]).unwrap();
        let r = grad_check(|p| p[0].mul(&p[0])?.sum(), &[("x", x)], 1e-3, Stencil::Central).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let r = grad_check(|p| p[0].scale(0.0)?.sum(), &[("x", x)], 1e-3, Stencil::Central).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_parameter_is_named() {
        let x = Tensor::<f64>::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
        let err = grad_check(|p| p[0].sum(), &[("weights", x)], 1e-3, Stencil::Central).unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFinite {
                name: "weights".into(),
                index: 1
            }
        );
    }
}
