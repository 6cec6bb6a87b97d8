//! Fused normalization primitives with hand-written backward rules.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        par::for_each_chunk_mut(&mut out, len * inner, x.len() * 4, |o, block| {
            let src = &x[o * len * inner..(o + 1) * len * inner];
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(src[k * inner + i]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[k * inner + i] - m).exp();
                    block[k * inner + i] = e;
                    z += e;
                }
                for k in 0..len {
                    block[k * inner + i] /= z;
                }
            }
        });
        Ok(Tensor::from_op("softmax", s.to_vec(), out, &[self], move |ctx| {
            let mut g = vec![0.0; ctx.grad.len()];
            par::for_each_chunk_mut(&mut g, len * inner, ctx.grad.len() * 3, |o, block| {
                let base = o * len * inner;
                for i in 0..inner {
                    let mut dot = 0.0;
                    for k in 0..len {
                        let idx = base + k * inner + i;
                        dot += ctx.grad[idx] * ctx.out[idx];
                    }
                    for k in 0..len {
                        let idx = base + k * inner + i;
                        block[k * inner + i] = ctx.out[idx] * (ctx.grad[idx] - dot);
                    }
                }
            });
            vec![Some(g)]
        }))
    }

    /// Normalizes over the last axis (zero mean, unit variance with `eps`
    /// inside the square root) then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        let c = *s.last().ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::dim("layer_norm", s, gain.shape()));
        }
        let x = self.data();
        let rows = x.len() / c.max(1);
        // per-row inverse standard deviation, kept for the backward pass
        let mut inv_std = vec![0.0; rows];
        let mut xhat = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
        }
        let (g, b) = (gain.data(), bias.data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % c] + b[i % c])
            .collect();
        let gc = gain.clone();
        Ok(Tensor::from_op("layer_norm", s.to_vec(), out, &[self, gain, bias], move |ctx| {
            let gain = gc.data();
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let gr = &ctx.grad[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for k in 0..c {
                        let d = gr[k] * gain[k];
                        mean_d += d;
                        mean_dx += d * xr[k];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for k in 0..c {
                        let d = gr[k] * gain[k];
                        gx[r * c + k] = inv_std[r] * (d - mean_d - xr[k] * mean_dx);
                    }
                }
                gx
            });
            let ggain = ctx.needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for (i, (gv, xv)) in ctx.grad.iter().zip(&xhat).enumerate() {
                    acc[i % c] += gv * xv;
                }
                acc
            });
            let gbias = ctx.needs[2].then(|| {
                let mut acc = vec![0.0; c];
                for (i, gv) in ctx.grad.iter().enumerate() {
                    acc[i % c] += gv;
                }
                acc
            });
            vec![gx, ggain, gbias]
        }))
    }

    /// `y[b, c, ...] = x[b, c, ...]·gain[c] + bias[c]` for `[B, C, ...]` input.
    pub fn channel_affine(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || gain.shape() != [s[1]] || bias.shape() != [s[1]] {
            return Err(Error::dim("channel_affine", s, gain.shape()));
        }
        let c = s[1];
        let plane: usize = s[2..].iter().product();
        let (x, g, b) = (self.data(), gain.data(), bias.data());
        let mut out = vec![0.0; x.len()];
        par::for_each_chunk_mut(&mut out, plane.max(1), x.len(), |i, o| {
            let ch = i % c;
            let src = &x[i * plane..(i + 1) * plane];
            for (d, v) in o.iter_mut().zip(src) {
                *d = v * g[ch] + b[ch];
            }
        });
        let (xc, gc) = (self.clone(), gain.clone());
        Ok(Tensor::from_op("channel_affine", s.to_vec(), out, &[self, gain, bias], move |ctx| {
            let (x, g) = (xc.data(), gc.data());
            let gx = ctx.needs[0].then(|| {
                ctx.grad
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * g[(i / plane.max(1)) % c])
                    .collect()
            });
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            if ctx.needs[1] || ctx.needs[2] {
                for (i, (gv, xv)) in ctx.grad.iter().zip(x).enumerate() {
                    let ch = (i / plane.max(1)) % c;
                    gg[ch] += gv * xv;
                    gb[ch] += gv;
                }
            }
            vec![gx, ctx.needs[1].then_some(gg), ctx.needs[2].then_some(gb)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};

    fn v(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::from_vec(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_known_values() {
        let u = v(&[4], &[0.0; 4]).softmax(0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let big = v(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let a = v(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
        assert!((a.data()[0] - 0.25).abs() < 1e-15 && (a.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_inner_axis() {
        let x = v(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_known_rows() {
        let ones = v(&[4], &[1.0; 4]);
        let zeros = v(&[4], &[0.0; 4]);
        let y = v(&[1, 4], &[3.0; 4]).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&x| x == 0.0));
        let y = v(&[2], &[1.0, -1.0])
            .layer_norm(&v(&[2], &[1.0, 1.0]), &v(&[2], &[0.0, 0.0]), 1e-5)
            .unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15 && (y.data()[1] + s).abs() < 1e-15);
    }

    #[test]
    fn channel_affine_values_and_grad() {
        let x = v(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.channel_affine(&v(&[2], &[2.0, -1.0]), &v(&[2], &[0.5, 0.0])).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, -3.0, -4.0]);
        let xs: Vec<f64> = (0..24).map(|i| (i as f64 * 0.3).sin()).collect();
        let r = gradcheck(
            |t| Ok(t[0].channel_affine(&t[1], &t[2])?.square().sum()),
            &[(vec![2, 3, 2, 2], xs), (vec![3], vec![0.5, 1.5, -1.0]), (vec![3], vec![0.1, 0.2, 0.3])],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn gradchecks() {
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.77).sin() * 2.0).collect();
        let g: Vec<f64> = (0..8).map(|i| 1.0 + 0.1 * i as f64).collect();
        let b: Vec<f64> = (0..8).map(|i| 0.05 * i as f64).collect();
        let w: Vec<f64> = (0..32).map(|i| (i as f64 * 0.13).cos()).collect();
        let wt = w.clone();
        let r = gradcheck(
            move |t| Ok(t[0].layer_norm(&t[1], &t[2], 1e-5)?.mul(&Tensor::from_vec(&[4, 8], wt.clone())?)?.sum()),
            &[(vec![4, 8], x.clone()), (vec![8], g), (vec![8], b)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        for axis in 0..2 {
            let wt = w.clone();
            let r = gradcheck(
                move |t| Ok(t[0].softmax(axis)?.mul(&Tensor::from_vec(&[4, 8], wt.clone())?)?.sum()),
                &[(vec![4, 8], x.clone())],
                &GradcheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{r:?}");
        }
    }
}
