//! Central finite-difference oracle for analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Coordinates checked per tensor; larger tensors are strided.
const MAX_COORDS: usize = 48;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn sampled(n: usize) -> Vec<usize> {
    if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        let stride = n.div_ceil(MAX_COORDS);
        (0..n).step_by(stride).chain([n - 1]).collect()
    }
}

/// Compares `analytic` against central differences of `eval` around `x`.
pub fn compare(
    analytic: &[f64],
    x: &Tensor<f64>,
    h: f64,
    tol: f64,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != x.numel() {
        return Err(Error::Contract(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.numel()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
    };
    let mut probe = x.clone();
    for i in sampled(x.numel()) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks `d f(x) / d x` where `f` builds a scalar on a fresh graph from input leaf `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(leaf).expect("leaf tracks gradients").to_vec();
    compare(&analytic, x, h, tol, |probe| {
        let mut g = Graph::new();
        let leaf = g.constant(probe.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).data()[0])
    })
}

/// Checks the gradient of a scalar model function with respect to one stored parameter.
pub fn finite_diff_check_param<F>(
    store: &ParamStore<f64>,
    path: &str,
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let x = store.require(path)?.clone();
    let mut sess = Session::new(store, None)?;
    let out = f(&mut sess)?;
    let grads = sess.param_grads(out)?;
    let analytic = grads.get(path).cloned().unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut scratch = store.clone();
    compare(&analytic, &x, h, tol, |probe| {
        scratch.set(path, probe.clone());
        let mut sess = Session::inference(&scratch);
        let out = f(&mut sess)?;
        Ok(sess.value(out).data()[0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let r =
            finite_diff_check(|g, x| Ok(g.sum(x)), &input(&[3, 4], 1), DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn cross_entropy_of_2x3() {
        let r = finite_diff_check(
            |g, x| g.cross_entropy(x, &[2, 0]),
            &input(&[2, 3], 2),
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Analytic gradient of sum(x) is ones; claim twos instead.
        let x = input(&[4], 3);
        let r = compare(&[2.0; 4], &x, DEFAULT_STEP, DEFAULT_TOL, |p| Ok(p.sum())).unwrap();
        assert!(!r.passed());
    }
}
