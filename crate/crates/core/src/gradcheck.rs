//! Central finite-difference verification of [`Graph::backward`].

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates per parameter, spread evenly.
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    /// Restrict the check to parameters whose name starts with one of these.
    pub only: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: None,
            only: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences, perturbing each selected coordinate of `store` in turn.
///
/// `f` must be deterministic (no dropout) and return a one-element node.
pub fn grad_check<T, F>(
    store: &ParameterStore<T>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'s> Fn(&mut Graph<'s, T>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                param: "<loss>".into(),
            });
        }
        g.backward(loss)?
    };

    let eval = |s: &ParameterStore<T>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item()?.as_f64())
    };

    let mut work = store.clone();
    let eps = opts.epsilon;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };

    for (id, param) in store.iter() {
        if !opts.only.is_empty() && !opts.only.iter().any(|p| param.name.starts_with(p.as_str())) {
            continue;
        }
        let n = param.value.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let original = param.value.data()[idx];
            work.get_mut(id).value.data_mut()[idx] = T::of(original.as_f64() + eps);
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[idx] = T::of(original.as_f64() - eps);
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[idx].as_f64());
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    param: param.name.clone(),
                });
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = param.name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn nan_is_reported_with_parameter_name() {
        let mut store = ParameterStore::<f64>::new(0);
        store.add("ok", Tensor::filled(&[2], 1.0), true).unwrap();
        store
            .add("bad", Tensor::filled(&[2], f64::NAN), true)
            .unwrap();
        let f = |g: &mut Graph<'_, f64>| {
            let s = g.store();
            let ok = g.param(s.id("ok").unwrap());
            let bad = g.param(s.id("bad").unwrap());
            let m = g.mul(ok, bad)?;
            Ok(g.sum(m))
        };
        let err = grad_check(&store, f, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut store = ParameterStore::<f64>::new(0);
        store.add("p", Tensor::filled(&[1], 0.0), true).unwrap();
        let f = |g: &mut Graph<'_, f64>| {
            let p = g.param(g.store().id("p").unwrap());
            let r = g.relu(p);
            Ok(g.sum(r))
        };
        // relu'(0) is 0 analytically; the central difference gives 0.5.
        let report = grad_check(&store, f, &GradCheckOptions::default()).unwrap();
        assert!(report.max_relative_error > 0.5);
    }
}
