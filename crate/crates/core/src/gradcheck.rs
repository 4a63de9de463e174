//! Central finite-difference gradient verification.
//!
//! The reported figure is max over coordinates of
//! |analytic - central difference| / max(1, |analytic|), with step h = 1e-5
//! unless overridden. Only meaningful in f64 precision; inputs should sit
//! away from non-smooth points (relu kinks, min/max ties).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

/// Check the gradient of a scalar-valued function of one tensor input.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Shape("gradcheck function must return a scalar".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new(Precision::F64);
        let v = t.leaf(Tensor::new(x.shape().to_vec(), data)?, false);
        let l = f(&mut t, v)?;
        let out = t.value(l).item()?;
        if !out.is_finite() {
            return Err(Error::Numeric("non-finite value in gradcheck probe".into()));
        }
        Ok(out)
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic[i], fd));
    }
    Ok(max_err)
}

/// Check the gradient of a scalar-valued function of every parameter in the
/// store. Intended for module-level checks on deliberately tiny instances:
/// the cost is two forward passes per parameter coordinate.
pub fn gradcheck_params<F>(f: F, store: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut tape = Tape::new(Precision::F64);
    let loss = f(&mut tape, &analytic_store)?;
    let grads = tape.backward(loss)?;
    analytic_store.accumulate(&tape, &grads)?;

    let eval = |probe: &ParamStore| -> Result<f64> {
        let mut t = Tape::new(Precision::F64);
        let l = f(&mut t, probe)?;
        let out = t.value(l).item()?;
        if !out.is_finite() {
            return Err(Error::Numeric("non-finite value in gradcheck probe".into()));
        }
        Ok(out)
    };

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut probe = store.clone();
    let mut max_err: f64 = 0.0;
    for name in &names {
        let base = store.value(name)?.clone();
        let analytic = analytic_store.grad(name)?.to_vec();
        for i in 0..base.numel() {
            let mut plus = base.data().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            probe.set_value(name, Tensor::new(base.shape().to_vec(), plus)?)?;
            let fp = eval(&probe)?;
            probe.set_value(name, Tensor::new(base.shape().to_vec(), minus)?)?;
            let fm = eval(&probe)?;
            probe.set_value(name, base.clone())?;
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[i], fd));
        }
    }
    Ok(max_err)
}
