use super::{backward, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Central finite-difference check of the gradient of `f` at `point`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates. Points where `f` is not differentiable (e.g. `|w|` at 0)
/// are outside the contract.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let id = ParamId(usize::MAX);
    let leaf = Tensor::param(id, point.shape(), point.to_vec())?;
    let grads = backward(&f(&leaf)?)?;
    let analytic = grads.get_or_zeros(&leaf);

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..probe.len() {
        let x = probe[i];
        probe[i] = x + eps;
        let plus = eval(&f, point.shape(), &probe, "point", i)?;
        probe[i] = x - eps;
        let minus = eval(&f, point.shape(), &probe, "point", i)?;
        probe[i] = x;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

fn eval<F>(f: &F, shape: &[usize], data: &[f64], tensor: &str, coord: usize) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let nonfinite = || Error::GradCheck {
        tensor: tensor.to_string(),
        coord,
    };
    let t = Tensor::new(shape, data.to_vec()).map_err(|_| nonfinite())?;
    let v = f(&t).map_err(|_| nonfinite())?.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(nonfinite())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Finite-difference check over every coordinate of every trainable
/// parameter in `store`.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let grads = backward(&f(store)?)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = store.clone();
    for (id, name, tensor) in store.trainable() {
        let analytic = grads.get_or_zeros(tensor);
        let base = tensor.to_vec();
        for i in 0..base.len() {
            let mut data = base.clone();
            let failed = || Error::GradCheck {
                tensor: name.to_string(),
                coord: i,
            };
            data[i] = base[i] + eps;
            probe.set_data(id, data.clone())?;
            let plus = f(&probe).map_err(|_| failed())?.item()?;
            data[i] = base[i] - eps;
            probe.set_data(id, data)?;
            let minus = f(&probe).map_err(|_| failed())?.item()?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(failed());
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.to_string(), i));
            }
            report.coordinates += 1;
        }
        probe.set_data(id, base)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = grad_check(|w| w.mul(w)?.sum_all(), &w, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from the graph but not from the numeric side
        let w = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let err = grad_check(|w| w.mul(&w.detach())?.sum_all(), &w, 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn nonfinite_evaluation_names_coordinate() {
        let w = Tensor::new(&[2], vec![1.0, 700.0]).unwrap();
        let err = grad_check(|w| w.exp()?.exp()?.sum_all(), &w, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. } | Error::GradCheck { .. }));
    }

    #[test]
    fn store_check_walks_all_params() {
        let mut store = ParamStore::default();
        let a = store.add("a", &[2], vec![0.5, -0.25], true).unwrap();
        let b = store.add("b", &[2], vec![1.5, 0.75], true).unwrap();
        store.add("frozen", &[1], vec![2.0], false).unwrap();
        let report = grad_check_params(
            |s| s.get(a).mul(s.get(b))?.tanh()?.mul(&s.by_name("frozen").unwrap().clone())?.sum_all(),
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.coordinates, 4);
        assert!(report.max_rel_error <= 1e-8);
    }
}
