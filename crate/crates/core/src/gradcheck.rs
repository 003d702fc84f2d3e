//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Mode};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Relative error used by every check: `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let x = tape.value(v);
    if x.len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    if !x[0].is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(x[0])
}

/// Checks d f(x)/dx for every coordinate of `x`; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(leaf).unwrap_or(&zeros).to_vec();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(&Tensor::new(x.shape(), data)?);
        let out = f(&mut tape, leaf)?;
        scalar_of(&tape, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Checks parameter gradients of a scalar objective built on a [`Graph`].
///
/// At most `per_tensor` coordinates (evenly strided) are probed in each trainable
/// tensor. Train-mode BatchNorm statistics are recomputed per evaluation, so the
/// objective stays a deterministic function of the parameters.
pub fn grad_check_params<F>(f: F, params: &ParamSet<f64>, mode: Mode, per_tensor: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new(params, mode);
    let out = f(&mut g)?;
    scalar_of(&g.tape, out)?;
    let grads = g.tape.backward(out)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p, mode);
        let out = f(&mut g)?;
        scalar_of(&g.tape, out)
    };
    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (name, t) in params.iter() {
        if !t.requires_grad {
            continue;
        }
        let analytic = grads.param(name);
        let n = t.len();
        let stride = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_tensor.max(1)) {
            let orig = t.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            if err > worst {
                log::debug!("{name}[{i}]: analytic {a:e} numeric {numeric:e}");
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
