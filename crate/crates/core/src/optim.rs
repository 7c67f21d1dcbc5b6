use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::{Error, Result};

/// Adam without momentum (β₁ = 0, β₂ = 0.99) and without weight decay.
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {lr} must be finite and >= 0")));
        }
        let params = ParamsAdamW {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        Ok(self.inner.step(grads)?)
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

/// Scalar value of a loss, or a numeric abort naming where it happened.
pub fn finite_scalar(loss: &Tensor, at: impl FnOnce() -> String) -> Result<f32> {
    let v = loss.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?;
    if !v.is_finite() {
        return Err(Error::NumericAbort {
            at: at(),
            detail: format!("loss is {v}"),
        });
    }
    Ok(v)
}

/// Analytic vs central-difference directional derivative of `loss` over
/// `vars`. The direction is `ĝ + r` normalized, with `ĝ` the unit gradient
/// and `r` a seeded random unit vector, so the derivative stays well above
/// f32 rounding of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-12);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn sq_norm(ts: &[Tensor]) -> Result<f64> {
    let mut s = 0.0;
    for t in ts {
        s += t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(s)
}

pub fn directional_grad_check(vars: &[Var], eps: f64, seed: u64, loss: impl Fn() -> Result<Tensor>) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let g = vars
        .iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => Ok(g.to_dtype(DType::F64)?),
            None => Ok(v.as_tensor().zeros_like()?.to_dtype(DType::F64)?),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut init = crate::params::Init::new(seed);
    let r = vars
        .iter()
        .map(|v| Ok(init.normal(v.shape(), 1.0)?.to_dtype(DType::F64)?))
        .collect::<Result<Vec<_>>>()?;
    let (gn, rn) = (sq_norm(&g)?.sqrt().max(1e-30), sq_norm(&r)?.sqrt());
    let mut dirs = g
        .iter()
        .zip(&r)
        .map(|(g, r)| Ok(((g / gn)? + (r / rn)?)?))
        .collect::<Result<Vec<_>>>()?;
    let dn = sq_norm(&dirs)?.sqrt();
    for d in dirs.iter_mut() {
        *d = (&*d / dn)?;
    }
    let mut analytic = 0.0;
    for (g, u) in g.iter().zip(&dirs) {
        analytic += (g * u)?.sum_all()?.to_scalar::<f64>()?;
    }

    let saved = vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>()?;
    let eval_at = |sign: f64| -> Result<f64> {
        for ((v, u), base) in vars.iter().zip(&dirs).zip(&saved) {
            v.set(&(base + (u * (sign * eps))?.to_dtype(base.dtype())?)?)?;
        }
        Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let plus = eval_at(1.0);
    let minus = eval_at(-1.0);
    for (v, base) in vars.iter().zip(&saved) {
        v.set(base)?;
    }
    let numeric = (plus? - minus?) / (2.0 * eps);
    Ok(GradCheck { analytic, numeric })
}

/// Analytic vs central-difference derivative of `loss` with respect to entry
/// `index` (row-major) of `var`.
pub fn entry_grad_check(var: &Var, index: usize, eps: f64, loss: impl Fn() -> Result<Tensor>) -> Result<GradCheck> {
    let n = var.elem_count();
    if index >= n {
        return Err(Error::InvalidParameter(format!("entry {index} outside a tensor of {n} elements")));
    }
    let grads = loss()?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.get(index)?.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        None => 0.0,
    };
    let saved = var.as_tensor().copy()?;
    let mut onehot = vec![0f32; n];
    onehot[index] = 1.0;
    let e = Tensor::from_vec(onehot, var.shape(), var.device())?.to_dtype(var.dtype())?;
    let eval_at = |sign: f64| -> Result<f64> {
        var.set(&(&saved + (&e * (sign * eps))?)?)?;
        Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let plus = eval_at(1.0);
    let minus = eval_at(-1.0);
    var.set(&saved)?;
    let numeric = (plus? - minus?) / (2.0 * eps);
    Ok(GradCheck { analytic, numeric })
}

/// Index of the entry of `var` with the largest gradient magnitude.
pub fn largest_grad_entry(var: &Var, loss: &Tensor) -> Result<usize> {
    let grads = loss.backward()?;
    let g = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.abs()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        None => return Ok(0),
    };
    Ok(g.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}
