//! Central finite-difference validation of analytic gradients.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every parameter.
///
/// `loss` records the objective into the supplied graph and returns its
/// scalar output node.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &ParamStore,
    h: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("step h must be positive, got {h}")));
    }
    let mut graph = Graph::new();
    let out = loss(&mut graph, params)?;
    let analytic = graph.backward(out)?;

    let mut eval = |p: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let out = loss(&mut g, p)?;
        g.scalar(out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let numel = params.get(&name)?.numel();
        for i in 0..numel {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(TensorError::Contract(format!(
                    "loss not finite around {name}[{i}]"
                )));
            }
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(v).unwrap());
        p
    }

    #[test]
    fn cubic() {
        let p = scalar_store(2.0);
        let r = finite_difference_check(
            |g, p| {
                let x = g.param(p, "x")?;
                let x2 = g.square(x)?;
                g.mul(x2, x)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function() {
        let p = scalar_store(2.0);
        let r = finite_difference_check(
            |g, p| {
                let _x = g.param(p, "x")?;
                g.constant_scalar(4.0)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = scalar_store(1.0);
        assert!(finite_difference_check(|g, p| g.param(p, "x"), &p, 0.0).is_err());
    }
}
