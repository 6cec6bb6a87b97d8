//! Fusion quality metrics on 8-bit-quantized grayscale images.
//!
//! VIF here is the pixel-domain multi-scale variant (VIFP), not the
//! wavelet-domain original.

use serde::{Deserialize, Serialize};

use crate::data::{quantize, Image};
use crate::error::{Error, Result};
use crate::par;

pub const BINS: usize = 256;
pub const VIF_SCALES: usize = 4;
/// Channel noise variance on the 0–255 scale.
pub const VIF_NOISE_VAR: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

fn histogram(img: &[f64]) -> [u64; BINS] {
    let mut h = [0u64; BINS];
    for &v in img {
        h[quantize(v) as usize] += 1;
    }
    h
}

fn entropy_of(counts: impl Iterator<Item = u64>, total: u64) -> f64 {
    let n = total as f64;
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn require_gray(img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::contract("metrics operate on single-channel images"));
    }
    Ok(())
}

fn require_same(a: &Image, b: &Image) -> Result<()> {
    require_gray(a)?;
    require_gray(b)?;
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim("metric", &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// Shannon entropy of the 256-bin histogram, in bits.
pub fn entropy(img: &Image) -> Result<f64> {
    require_gray(img)?;
    let h = histogram(&img.data);
    Ok(entropy_of(h.into_iter(), img.data.len() as u64))
}

/// Population standard deviation of the 8-bit levels.
pub fn std_dev(img: &Image) -> Result<f64> {
    require_gray(img)?;
    let n = img.data.len() as f64;
    let levels: Vec<f64> = img.data.iter().map(|&v| quantize(v) as f64).collect();
    let mean = levels.iter().sum::<f64>() / n;
    let var = levels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// `H(a) + H(b) − H(a, b)` over 256-bin marginal and joint histograms.
pub fn mutual_information_pair(a: &Image, b: &Image) -> Result<f64> {
    require_same(a, b)?;
    let mut joint = vec![0u64; BINS * BINS];
    for (x, y) in a.data.iter().zip(&b.data) {
        joint[quantize(*x) as usize * BINS + quantize(*y) as usize] += 1;
    }
    let n = a.data.len() as u64;
    let ha = entropy_of(histogram(&a.data).into_iter(), n);
    let hb = entropy_of(histogram(&b.data).into_iter(), n);
    let hab = entropy_of(joint.into_iter(), n);
    Ok((ha + hb - hab).max(0.0))
}

/// `MI(fused, ir) + MI(fused, vi)`.
pub fn mutual_information(fused: &Image, ir: &Image, vi: &Image) -> Result<f64> {
    Ok(mutual_information_pair(fused, ir)? + mutual_information_pair(fused, vi)?)
}

/// Square Gaussian kernel of side `n` with `σ = n/5`, normalized to sum 1.
fn gaussian_kernel(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Plane stored row-major.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Plane {
    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            d: self.d.iter().zip(&o.d).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Valid-mode 2-D correlation.
    fn filter_valid(&self, k: &[f64], n: usize) -> Plane {
        let (ho, wo) = (self.h + 1 - n, self.w + 1 - n);
        let rows = par::map_range(ho, ho * wo * n * n, |y| {
            let mut row = vec![0.0; wo];
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..n {
                    let src = &self.d[(y + i) * self.w + x..(y + i) * self.w + x + n];
                    for (kv, sv) in k[i * n..(i + 1) * n].iter().zip(src) {
                        acc += kv * sv;
                    }
                }
                *o = acc;
            }
            row
        });
        Plane {
            h: ho,
            w: wo,
            d: rows.concat(),
        }
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut d = Vec::with_capacity(h * w);
        for y in (0..self.h).step_by(2) {
            for x in (0..self.w).step_by(2) {
                d.push(self.d[y * self.w + x]);
            }
        }
        Plane { h, w, d }
    }
}

fn window_side(scale: usize) -> usize {
    (1 << (VIF_SCALES - scale + 1)) + 1
}

/// Number of scales the cascade supports for an `h × w` input.
pub fn vif_scales_for(h: usize, w: usize) -> usize {
    let (mut h, mut w) = (h, w);
    for scale in 1..=VIF_SCALES {
        let n = window_side(scale);
        if scale > 1 {
            if h < n || w < n {
                return scale - 1;
            }
            h = (h + 1 - n).div_ceil(2);
            w = (w + 1 - n).div_ceil(2);
        }
        if h < n || w < n {
            return scale - 1;
        }
    }
    VIF_SCALES
}

/// Pixel-domain VIF of `dist` against the reference `reference`.
pub fn vif_pair(reference: &Image, dist: &Image) -> Result<f64> {
    require_same(reference, dist)?;
    let scales = vif_scales_for(reference.height, reference.width);
    if scales == 0 {
        return Err(Error::contract(format!(
            "image {}x{} too small for VIF",
            reference.height, reference.width
        )));
    }
    if scales < VIF_SCALES {
        log::warn!(
            "VIF on {}x{} uses {scales} of {VIF_SCALES} scales",
            reference.height,
            reference.width
        );
    }
    let to255 = |img: &Image| Plane {
        h: img.height,
        w: img.width,
        d: img.data.iter().map(|&v| quantize(v) as f64).collect(),
    };
    let (mut r, mut d) = (to255(reference), to255(dist));
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=scales {
        let n = window_side(scale);
        let k = gaussian_kernel(n);
        if scale > 1 {
            r = r.filter_valid(&k, n).decimate();
            d = d.filter_valid(&k, n).decimate();
        }
        let mu1 = r.filter_valid(&k, n);
        let mu2 = d.filter_valid(&k, n);
        let s11 = r.map2(&r, |a, b| a * b).filter_valid(&k, n);
        let s22 = d.map2(&d, |a, b| a * b).filter_valid(&k, n);
        let s12 = r.map2(&d, |a, b| a * b).filter_valid(&k, n);
        for i in 0..mu1.d.len() {
            let (m1, m2) = (mu1.d[i], mu2.d[i]);
            let mut v1 = (s11.d[i] - m1 * m1).max(0.0);
            let v2 = (s22.d[i] - m2 * m2).max(0.0);
            let c12 = s12.d[i] - m1 * m2;
            let mut g = c12 / (v1 + VIF_EPS);
            let mut sv = v2 - g * c12;
            if v1 < VIF_EPS {
                g = 0.0;
                sv = v2;
                v1 = 0.0;
            }
            if v2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = v2;
                g = 0.0;
            }
            if sv <= VIF_EPS {
                sv = VIF_EPS;
            }
            num += (1.0 + g * g * v1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + v1 / VIF_NOISE_VAR).log10();
        }
    }
    // A flat reference carries no information to lose.
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Mean of fused-vs-ir and fused-vs-vi VIF.
pub fn vif(fused: &Image, ir: &Image, vi: &Image) -> Result<f64> {
    Ok(0.5 * (vif_pair(ir, fused)? + vif_pair(vi, fused)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub en: f64,
    pub sd: f64,
    pub mi: f64,
    pub vif: f64,
}

impl MetricValues {
    fn fields(&self) -> [f64; 4] {
        [self.en, self.sd, self.mi, self.vif]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            en: f[0],
            sd: f[1],
            mi: f[2],
            vif: f[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

pub fn evaluate(fused: &Image, ir: &Image, vi: &Image) -> Result<MetricValues> {
    Ok(MetricValues {
        en: entropy(fused)?,
        sd: std_dev(fused)?,
        mi: mutual_information(fused, ir, vi)?,
        vif: vif(fused, ir, vi)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean: MetricValues,
    pub std: MetricValues,
    pub median: MetricValues,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean, population standard deviation and median of every metric.
pub fn aggregate(per_image: Vec<ImageMetrics>) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::contract("aggregate over zero images"));
    }
    let n = per_image.len() as f64;
    let col = |k: usize| -> Vec<f64> { per_image.iter().map(|m| m.values.fields()[k]).collect() };
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    let mut med = [0.0; 4];
    for k in 0..4 {
        let c = col(k);
        mean[k] = c.iter().sum::<f64>() / n;
        std[k] = (c.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
        med[k] = median(c);
    }
    Ok(MetricReport {
        per_image,
        mean: MetricValues::from_fields(mean),
        std: MetricValues::from_fields(std),
        median: MetricValues::from_fields(med),
    })
}

/// Evaluates `(id, fused, ir, vi)` tuples concurrently.
pub fn evaluate_all(items: &[(String, Image, Image, Image)]) -> Result<MetricReport> {
    let per: Vec<ImageMetrics> = par::map_items(items, |(id, f, ir, vi)| {
        evaluate(f, ir, vi).map(|values| ImageMetrics { id: id.clone(), values })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    aggregate(per)
}
