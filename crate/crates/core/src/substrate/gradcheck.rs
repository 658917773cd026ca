//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per tensor (sampled without replacement).
    pub max_entries_per_tensor: Option<usize>,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_entries_per_tensor: None, abs_floor: 1e-7, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares tape gradients of `loss_fn` with central differences.
///
/// Parameters are perturbed in place and restored bit-exactly afterwards.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let rng = Rng::new(opts.seed);
    let mut tensors = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let n = store.iter().nth(pi).map(|p| p.value.len()).unwrap_or(0);
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(m) if m < n => rng.split(pi as u64).sample_distinct(n, m),
            _ => (0..n).collect(),
        };
        let id = super::params::ParamId(pi);
        let mut check = TensorCheck {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_analytic: 0.0,
        };
        for &e in &entries {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.step;
            let up = eval_loss(store, &loss_fn);
            store.get_mut(id).value.data_mut()[e] = orig - opts.step;
            let down = eval_loss(store, &loss_fn);
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up? - down?) / (2.0 * opts.step);
            let a = analytic.get(id).data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_analytic = check.max_analytic.max(a.abs());
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::array::RealArray;
    use std::rc::Rc;

    #[test]
    fn linear_regression_three_points() {
        let mut store = ParamStore::new();
        let w = store.add("w.weight", RealArray::from_vec(vec![1, 1], vec![0.4]).unwrap()).unwrap();
        let b = store.add("w.bias", RealArray::scalar(-0.2)).unwrap();
        let frozen = store.add("frozen", RealArray::scalar(3.0)).unwrap();
        let xs = RealArray::from_vec(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let ys = RealArray::from_vec(vec![3, 1], vec![1.0, 3.1, 4.9]).unwrap();
        let f = |t: &mut Tape| {
            let x = t.constant(xs.clone());
            let y = t.constant(ys.clone());
            let (wv, bv) = (t.param(w), t.param(b));
            let p = t.linear(x, wv, Some(bv))?;
            let e = t.squared_error_rows(p, y)?;
            t.weighted_sum(e, Rc::new(vec![1.0 / 3.0; 3]))
        };
        let report = grad_check(&mut store, f, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
        let mut tape = Tape::new(&store);
        let loss = f(&mut tape).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(frozen).data(), &[0.0]);
    }
}
