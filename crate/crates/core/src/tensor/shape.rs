//! Data movement: reshape, permutation, gathers and concatenation.

use std::rc::Rc;

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::par;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reflected index (no edge repeat): -1 -> 1, n -> n-2.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    /// `out[i] = self[index[i]]` with the given output shape. Gradients
    /// scatter-add back, so indices may repeat.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != index.len() {
            return Err(Error::dim("gather", &[index.len()], shape));
        }
        let n = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather index {bad} out of range for {n} elements")));
        }
        let x = self.data();
        let idx: &[usize] = &index;
        let mut out = vec![0.0; idx.len()];
        par::for_each_chunk_mut(&mut out, 4096, idx.len(), |ci, c| {
            let base = ci * 4096;
            for (j, o) in c.iter_mut().enumerate() {
                *o = x[idx[base + j]];
            }
        });
        Ok(Tensor::from_op("gather", shape.to_vec(), out, &[self], move |ctx| {
            let mut g = vec![0.0; n];
            for (gi, &i) in ctx.grad.iter().zip(index.iter()) {
                g[i] += gi;
            }
            vec![Some(g)]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", s, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let in_strides = strides(s);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..n {
            index.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::contract("transpose_last needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range for {s0:?}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != s0[i]) {
                return Err(Error::dim("concat", s0, s));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = s0.to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op("concat", shape, out, parts, move |ctx| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().zip(ctx.needs).map(|(g, &n)| n.then_some(g)).collect()
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::contract(format!("narrow({axis}, {start}, {len}) out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.gather(Rc::new(index), &shape)
    }

    /// Reflect-pads the last two axes.
    pub fn pad_reflect2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::contract("pad_reflect2d needs at least 2 axes"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if top >= h.max(2) || bottom >= h.max(2) || left >= w.max(2) || right >= w.max(2) {
            return Err(Error::contract(format!(
                "reflect padding ({top},{bottom},{left},{right}) too large for {h}x{w}"
            )));
        }
        let planes = self.numel() / (h * w);
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut index = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for y in 0..ho {
                let sy = reflect(y as isize - top as isize, h);
                for x in 0..wo {
                    let sx = reflect(x as isize - left as isize, w);
                    index.push((p * h + sy) * w + sx);
                }
            }
        }
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        self.gather(Rc::new(index), &shape)
    }
}
