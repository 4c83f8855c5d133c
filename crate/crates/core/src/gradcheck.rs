//! Central finite-difference oracle for analytic gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, ParamStore};

/// Outcome of [`check_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over all scalars of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter holding the worst scalar.
    pub worst_param: Option<String>,
}

/// Compare reverse-mode gradients of `f` with central differences of step `step`.
///
/// `f` receives a fresh graph and the store bound with every parameter
/// differentiable, and must return a scalar.
pub fn check_gradient<F>(f: F, params: &ParamStore, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    check_gradient_in(Graph::new, f, params, step)
}

/// As [`check_gradient`], with a caller-supplied graph factory for the analytic pass.
#[doc(hidden)]
pub fn check_gradient_in<F, G>(make_graph: G, f: F, params: &ParamStore, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
    G: Fn() -> Graph,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut g = make_graph();
    let vars = params.bind(&mut g, BindMode::All);
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::Numeric(format!("function value is not finite: {base}")));
    }
    let grads = g.backward(out)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g, BindMode::All);
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("function value is not finite: {v}")))
        }
    };

    let mut probe = params.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_param: None,
    };
    for (name, p) in params.iter() {
        let analytic = grads.by_name(name);
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(name).expect("same keys").value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("same keys").value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("same keys").value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > worst.max_rel_error || worst.worst_param.is_none() {
                worst.max_rel_error = err;
                worst.worst_param = Some(name.clone());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::tensor::Tensor;

    #[test]
    fn exact_quadratic() {
        let mut s = ParamStore::new();
        s.insert("t", Tensor::from_vec(vec![0.5, -1.2, 2.0]), Group::Visual);
        let r = check_gradient(
            |g, v| {
                let sq = g.mul(v["t"], v["t"])?;
                Ok(g.sum(sq))
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut s = ParamStore::new();
        s.insert("t", Tensor::from_vec(vec![0.5, -1.2]), Group::Visual);
        let r = check_gradient(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &s, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut s = ParamStore::new();
        s.insert("t", Tensor::from_vec(vec![-1.0]), Group::Visual);
        let err = check_gradient(
            |g, v| {
                let l = g.log(v["t"]);
                Ok(g.sum(l))
            },
            &s,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn rejects_non_positive_step() {
        let s = ParamStore::new();
        assert!(check_gradient(|g, _| Ok(g.constant(Tensor::scalar(0.0))), &s, 0.0).is_err());
    }
}
