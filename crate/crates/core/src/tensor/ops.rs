//! Elementwise arithmetic, activations and reductions.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::par;

const CHUNK: usize = 4096;

fn map1(x: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, CHUNK, x.len(), |ci, c| {
        let base = ci * CHUNK;
        for (j, o) in c.iter_mut().enumerate() {
            *o = f(x[base + j]);
        }
    });
    out
}

/// Output shape of a binary op. The shorter operand must be a scalar or a
/// trailing suffix of the longer one; it is then repeated over the leading
/// axes.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::dim(op, a, b))
}

fn reduce_to(g: &[f64], d: impl Fn(usize) -> f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if n == g.len() {
        for (i, o) in out.iter_mut().enumerate() {
            *o = g[i] * d(i);
        }
    } else {
        for (i, gi) in g.iter().enumerate() {
            out[i % n] += gi * d(i);
        }
    }
    out
}

type Partial = fn(f64, f64, f64) -> f64;

fn binary(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    da: Partial,
    db: Partial,
) -> Result<Tensor> {
    let shape = broadcast(name, a.shape(), b.shape())?;
    let n = numel(&shape);
    let (na, nb) = (a.numel(), b.numel());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n];
    par::for_each_chunk_mut(&mut out, CHUNK, n, |ci, c| {
        let base = ci * CHUNK;
        for (j, o) in c.iter_mut().enumerate() {
            let i = base + j;
            *o = f(ad[i % na], bd[i % nb]);
        }
    });
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(name, shape, out, &[a, b], move |ctx| {
        let (ad, bd) = (ac.data(), bc.data());
        let (na, nb) = (ad.len(), bd.len());
        let ga = ctx.needs[0].then(|| {
            reduce_to(ctx.grad, |i| da(ad[i % na], bd[i % nb], ctx.out[i]), na)
        });
        let gb = ctx.needs[1].then(|| {
            reduce_to(ctx.grad, |i| db(ad[i % na], bd[i % nb], ctx.out[i]), nb)
        });
        vec![ga, gb]
    }))
}

fn unary(
    name: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64 + Sync + Send,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let out = map1(x.data(), f);
    let xc = x.clone();
    Tensor::from_op(name, x.shape().to_vec(), out, &[x], move |ctx| {
        let xd = xc.data();
        let g = ctx
            .grad
            .iter()
            .zip(xd)
            .zip(ctx.out)
            .map(|((g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(g)]
    })
}

/// Gaussian error linear unit, exact erf form.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Default negative slope of the leaky ReLU.
pub const LRELU_SLOPE: f64 = 0.2;

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |a, b, _| -a / (b * b),
        )
    }

    /// Elementwise maximum of two same-shape tensors. The gradient goes to
    /// the larger operand; ties go to `self`.
    pub fn max_elementwise(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::dim("max_elementwise", self.shape(), other.shape()));
        }
        binary(
            "max_elementwise",
            self,
            other,
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { 1.0 } else { 0.0 },
            |a, b, _| if a >= b { 0.0 } else { 1.0 },
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary("scale", self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary("add_scalar", self, move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary("sqrt", self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        unary("exp", self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary("ln", self, f64::ln, |x, _| 1.0 / x)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        unary("abs", self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`; no gradient flows where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            "clamp",
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary("sigmoid", self, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary("relu", self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn lrelu(&self, slope: f64) -> Tensor {
        unary(
            "lrelu",
            self,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn gelu(&self) -> Tensor {
        unary("gelu", self, gelu_scalar, |x, _| gelu_grad(x))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![s], &[self], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn l1_norm(&self) -> Tensor {
        self.abs().sum()
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        Ok(Tensor::from_op("sum_axis", new_shape, out, &[self], move |ctx| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &ctx.grad[o * inner..(o + 1) * inner];
                for k in 0..len {
                    g[(o * len + k) * inner..(o * len + k + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        }))
    }
}
