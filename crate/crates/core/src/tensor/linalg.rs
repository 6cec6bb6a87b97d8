//! Batched matrix products.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Row-major `c = a · b` (or `c += a · b` when `accumulate`), with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks, which the asserts bound within the slices.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits the rows of `a` (m×k, row-major) into blocks computed in parallel.
pub(crate) fn gemm_rows_parallel(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], b_trans: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let rows_per = (m / 8).max(16);
    par::for_each_chunk_mut(&mut c, rows_per * n.max(1), m * k * n, |bi, chunk| {
        let r0 = bi * rows_per;
        let rows = chunk.len() / n.max(1);
        gemm(rows, k, n, &a[r0 * k..(r0 + rows) * k], false, b, b_trans, chunk, false);
    });
    c
}

fn batch_index(i: usize, nb: usize) -> usize {
    if nb == 1 {
        0
    } else {
        i % nb
    }
}

impl Tensor {
    /// Batched product `[..., m, k] · [..., k, n] -> [..., m, n]`. Batch axes
    /// must be equal, or one side's batch shape must be a trailing suffix of
    /// the other's (including empty).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || (bb.len() < ba.len() && ba.ends_with(bb)) {
            ba.to_vec()
        } else if ba.len() < bb.len() && bb.ends_with(ba) {
            bb.to_vec()
        } else {
            return Err(Error::dim("matmul", sa, sb));
        };
        let nbatch = numel(&batch_shape);
        let (na, nb) = (numel(ba), numel(bb));
        let (ad, bd) = (self.data(), other.data());
        let out = if nbatch == 1 {
            gemm_rows_parallel(m, k, n, ad, bd, false)
        } else {
            let mut out = vec![0.0; nbatch * m * n];
            par::for_each_chunk_mut(&mut out, (m * n).max(1), nbatch * m * k * n, |bi, c| {
                let ia = batch_index(bi, na);
                let ib = batch_index(bi, nb);
                gemm(m, k, n, &ad[ia * m * k..], false, &bd[ib * k * n..], false, c, false);
            });
            out
        };
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op("matmul", shape, out, &[self, other], move |ctx| {
            let (ad, bd) = (ac.data(), bc.data());
            // dA = dC · Bᵀ, summed over broadcast batches
            let ga = ctx.needs[0].then(|| {
                let mut g = vec![0.0; na * m * k];
                if na == nbatch {
                    par::for_each_chunk_mut(&mut g, (m * k).max(1), nbatch * m * k * n, |bi, c| {
                        let ib = batch_index(bi, nb);
                        gemm(m, n, k, &ctx.grad[bi * m * n..], false, &bd[ib * k * n..], true, c, false);
                    });
                } else {
                    for bi in 0..nbatch {
                        let ia = batch_index(bi, na);
                        let ib = batch_index(bi, nb);
                        gemm(
                            m,
                            n,
                            k,
                            &ctx.grad[bi * m * n..],
                            false,
                            &bd[ib * k * n..],
                            true,
                            &mut g[ia * m * k..(ia + 1) * m * k],
                            true,
                        );
                    }
                }
                g
            });
            // dB = Aᵀ · dC
            let gb = ctx.needs[1].then(|| {
                let mut g = vec![0.0; nb * k * n];
                if nb == nbatch {
                    par::for_each_chunk_mut(&mut g, (k * n).max(1), nbatch * m * k * n, |bi, c| {
                        let ia = batch_index(bi, na);
                        gemm(k, m, n, &ad[ia * m * k..], true, &ctx.grad[bi * m * n..], false, c, false);
                    });
                } else {
                    for bi in 0..nbatch {
                        let ia = batch_index(bi, na);
                        let ib = batch_index(bi, nb);
                        gemm(
                            k,
                            m,
                            n,
                            &ad[ia * m * k..],
                            true,
                            &ctx.grad[bi * m * n..],
                            false,
                            &mut g[ib * k * n..(ib + 1) * k * n],
                            true,
                        );
                    }
                }
                g
            });
            vec![ga, gb]
        }))
    }

    /// `x · w + b` over the last axis: `[..., in] -> [..., out]` with
    /// `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() || w.ndim() != 2 || s[s.len() - 1] != w.shape()[0] {
            return Err(Error::dim("linear", s, w.shape()));
        }
        let rows = self.numel() / s[s.len() - 1];
        let flat = self.reshape(&[rows, s[s.len() - 1]])?;
        let mut y = flat.matmul(w)?;
        if let Some(b) = b {
            y = y.add(b)?;
        }
        let mut out_shape = s.to_vec();
        *out_shape.last_mut().unwrap() = w.shape()[1];
        y.reshape(&out_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_permutation() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&a).unwrap().data(), a.data());
        let p = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(i2.matmul(&p).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let e = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_against_loops() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..4 * 5).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = t(&[2, 3, 4], &a).matmul(&t(&[4, 5], &b)).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for q in 0..4 {
                        s += a[bi * 12 + i * 4 + q] * b[q * 5 + j];
                    }
                    assert!((c.data()[bi * 15 + i * 5 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradcheck_plain_and_broadcast() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let r = gradcheck(
            |v| Ok(v[0].matmul(&v[1])?.sum()),
            &[(vec![3, 4], a.clone()), (vec![4, 2], b.clone())],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        let a3: Vec<f64> = (0..24).map(|i| (i as f64 * 0.9).sin()).collect();
        let r = gradcheck(
            |v| Ok(v[0].matmul(&v[1])?.square().sum()),
            &[(vec![2, 3, 4], a3), (vec![4, 2], b)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
