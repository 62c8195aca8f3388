//! Central-difference gradient checking.

use super::params::{Gradients, ParamStore};
use crate::error::Result;

/// Below this magnitude of the numeric derivative, errors are measured on an
/// absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the gradient returned by `f` against central differences of its
/// value over every coordinate of every trainable parameter.
///
/// The error for one coordinate is `|analytic - numeric| / max(|numeric|, 1e-4)`.
pub fn grad_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = f(store)?;
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        for j in 0..p.tensor.len() {
            let orig = p.tensor.data()[j];
            work.get_mut(id).tensor.data_mut()[j] = orig + eps;
            let (fp, _) = f(&work)?;
            work.get_mut(id).tensor.data_mut()[j] = orig - eps;
            let (fm, _) = f(&work)?;
            work.get_mut(id).tensor.data_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            let err = (a - numeric).abs() / numeric.abs().max(REL_ERR_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = Some((p.name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn quadratic(store: &ParamStore, wrong: f64) -> Result<(f64, Gradients)> {
        // f(x) = x0² + 3 x0 x1 + 2 x2²
        let id = store.id("x").unwrap();
        let x = store.get(id).tensor.data().to_vec();
        let v = x[0] * x[0] + 3.0 * x[0] * x[1] + 2.0 * x[2] * x[2];
        let mut g = Gradients::new(store.len());
        g.set(
            id,
            Tensor::new(
                vec![3],
                vec![(2.0 * x[0] + 3.0 * x[1]) * wrong, 3.0 * x[0] * wrong, 4.0 * x[2] * wrong],
            )?,
        );
        Ok((v, g))
    }

    #[test]
    fn quadratic_passes_and_doubled_gradient_fails() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![3], vec![0.7, -1.3, 2.1]).unwrap(), true).unwrap();
        let ok = grad_check(|s| quadratic(s, 1.0), &s, 1e-6).unwrap();
        assert!(ok.max_rel_err < 1e-8, "{ok:?}");
        let bad = grad_check(|s| quadratic(s, 2.0), &s, 1e-6).unwrap();
        assert!((bad.max_rel_err - 1.0).abs() < 1e-6, "{bad:?}");
    }

    #[test]
    fn graph_matmul_gradient_is_ones_times_bt() {
        use crate::rng::SeedTree;
        use rand::Rng;
        let mut rng = SeedTree::new(11).rng();
        let mut s = ParamStore::new();
        let a = s
            .add("a", Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(), true)
            .unwrap();
        let b = s
            .add("b", Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(), true)
            .unwrap();
        let f = |s: &ParamStore| -> Result<(f64, Gradients)> {
            let mut g = Graph::new();
            let av = g.param(s, a);
            let bv = g.param(s, b);
            let m = g.matmul(av, bv)?;
            let l = g.sum(m);
            Ok((g.value(l).item(), g.backward(l, s.len())?))
        };
        let (_, grads) = f(&s).unwrap();
        let expect = crate::numerics::tensor::matmul(&Tensor::full(&[3, 2], 1.0), &s.get(b).tensor.transpose()).unwrap();
        for (x, y) in grads.get(a).unwrap().data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(grad_check(f, &s, 1e-6).unwrap().max_rel_err < 1e-6);
    }
}
