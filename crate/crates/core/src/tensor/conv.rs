//! 2-D convolution and pooling over `[B, C, H, W]` tensors.

use super::linalg::{gemm, gemm_rows_parallel};
use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// "Same" padding for an odd kernel at stride 1.
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2 }
    }
}

pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: Geometry) -> Vec<f64> {
    let p = g.cols();
    let mut cols = vec![0.0; g.rows() * p];
    par::for_each_chunk_mut(&mut cols, p.max(1), g.rows() * p, |row, dst| {
        let c = row / (g.kh * g.kw);
        let i = (row / g.kw) % g.kh;
        let j = row % g.kw;
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.ho {
            let y = (oy * g.stride + i) as isize - g.pad as isize;
            if y < 0 || y >= g.h as isize {
                continue;
            }
            let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                let xx = (ox * g.stride + j) as isize - g.pad as isize;
                if xx >= 0 && xx < g.w as isize {
                    *d = src[xx as usize];
                }
            }
        }
    });
    cols
}

fn col2im(cols: &[f64], g: Geometry) -> Vec<f64> {
    let mut x = vec![0.0; g.c * g.h * g.w];
    let p = g.cols();
    par::for_each_chunk_mut(&mut x, g.h * g.w, g.rows() * p, |c, plane| {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    });
    x
}

impl Tensor {
    /// Cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]` and optional
    /// per-output-channel bias. Out-of-image taps read zero.
    pub fn conv2d(&self, w: &Tensor, bias: Option<&Tensor>, opts: Conv2dOptions) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (Some(ho), Some(wo)) = (
            out_extent(h, kh, opts.stride, opts.padding),
            out_extent(wd, kw, opts.stride, opts.padding),
        ) else {
            return Err(Error::dim("conv2d (kernel exceeds padded input)", xs, ws));
        };
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::dim("conv2d bias", bias.shape(), &[o]));
            }
        }
        let g = Geometry {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            stride: opts.stride,
            pad: opts.padding,
        };
        let (rows, p) = (g.rows(), g.cols());
        let mut out = Vec::with_capacity(b * o * p);
        for bi in 0..b {
            let cols = im2col(&self.data()[bi * c * h * wd..(bi + 1) * c * h * wd], g);
            let mut y = gemm_rows_parallel(o, rows, p, w.data(), &cols, false);
            if let Some(bias) = bias {
                for (oc, row) in y.chunks_mut(p.max(1)).enumerate() {
                    let bv = bias.data()[oc];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
            out.extend(y);
        }
        let (xc, wc) = (self.clone(), w.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self, w];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        Ok(Tensor::from_op("conv2d", vec![b, o, ho, wo], out, &parents, move |ctx| {
            let xd = xc.data();
            let wdata = wc.data();
            let mut gx = ctx.needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; wdata.len()]);
            for bi in 0..b {
                let gy = &ctx.grad[bi * o * p..(bi + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    let cols = im2col(&xd[bi * c * h * wd..(bi + 1) * c * h * wd], g);
                    // dW += dY · colsᵀ
                    gemm(o, p, rows, gy, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols = Wᵀ · dY
                    let mut dcols = vec![0.0; rows * p];
                    gemm(rows, o, p, wdata, true, gy, false, &mut dcols, false);
                    let dx = col2im(&dcols, g);
                    gx[bi * c * h * wd..(bi + 1) * c * h * wd].copy_from_slice(&dx);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = vec![0.0; o];
                    for bi in 0..b {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            let start = (bi * o + oc) * p;
                            *acc += ctx.grad[start..start + p].iter().sum::<f64>();
                        }
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Max pooling with implicit `-inf` padding. Gradient goes to the first
    /// maximal tap in scan order.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::dim("max_pool2d", xs, &[kernel, kernel]));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(ho), Some(wo)) = (
            out_extent(h, kernel, stride, padding),
            out_extent(w, kernel, stride, padding),
        ) else {
            return Err(Error::dim("max_pool2d (kernel exceeds padded input)", xs, &[kernel, kernel]));
        };
        let x = self.data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut arg = vec![0usize; b * c * ho * wo];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for i in 0..kernel {
                        let y = (oy * stride + i) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..kernel {
                            let xx = (ox * stride + j) as isize - padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = y as usize * w + xx as usize;
                            if src[idx] > best || best_idx == usize::MAX {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + best_idx;
                }
            }
        }
        let n = x.len();
        Ok(Tensor::from_op("max_pool2d", vec![b, c, ho, wo], out, &[self], move |ctx| {
            let mut g = vec![0.0; n];
            for (gi, &a) in ctx.grad.iter().zip(&arg) {
                g[a] += gi;
            }
            vec![Some(g)]
        }))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool2d(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::contract(format!("global_avg_pool2d expects 4-d input, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        self.reshape(&[xs[0], xs[1], hw])?.sum_axis(2).map(|s| s.scale(1.0 / hw as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};

    #[test]
    fn ones_kernel_center_is_total() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv2d(&w, None, Conv2dOptions::new(1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 45.0);
        // corner sees the 2x2 block only
        assert_eq!(y.data()[0], 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn stride_two_shape() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, Conv2dOptions::new(2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            x.conv2d(&w, None, Conv2dOptions::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_against_direct_loops() {
        let (b, c, h, w, o, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
        let xd: Vec<f64> = (0..b * c * h * w).map(|i| (i as f64 * 0.173).sin()).collect();
        let wd: Vec<f64> = (0..o * c * k * k).map(|i| (i as f64 * 0.311).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let y = Tensor::from_vec(&[b, c, h, w], xd.clone())
            .unwrap()
            .conv2d(
                &Tensor::from_vec(&[o, c, k, k], wd.clone()).unwrap(),
                Some(&Tensor::from_vec(&[o], bias.clone()).unwrap()),
                Conv2dOptions::new(s, p),
            )
            .unwrap();
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        assert_eq!(y.shape(), &[b, o, ho, wo]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[oc];
                        for ci in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let yy = (oy * s + i) as isize - p as isize;
                                    let xx = (ox * s + j) as isize - p as isize;
                                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                        acc += xd[((bi * c + ci) * h + yy as usize) * w + xx as usize]
                                            * wd[((oc * c + ci) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((bi * o + oc) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradcheck() {
        let xd: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| (i as f64 * 0.71).cos()).collect();
        let bd = vec![0.3, -0.1, 0.2];
        let r = gradcheck(
            |v| Ok(v[0].conv2d(&v[1], Some(&v[2]), Conv2dOptions::new(2, 1))?.square().sum()),
            &[(vec![1, 2, 5, 5], xd), (vec![3, 2, 3, 3], wd), (vec![3], bd)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn max_pool_values_and_gradcheck() {
        let xd: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let x = Tensor::from_vec(&[1, 1, 4, 4], xd.clone()).unwrap();
        let y = x.max_pool2d(3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data()[0], xd[0].max(xd[1]).max(xd[4]).max(xd[5]));
        let r = gradcheck(
            |v| Ok(v[0].max_pool2d(3, 2, 1)?.square().sum()),
            &[(vec![1, 1, 4, 4], xd.iter().map(|v| v * 0.1).collect())],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
