//! Synthetic corpora: a bright/dark visible set for the gate and registered
//! infrared/visible pairs for the fusion network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Illumination, Image, ImagePair};
use crate::error::Result;

/// Mean-luminance threshold that labels the gate corpus.
pub const BRIGHTNESS_THRESHOLD: f64 = 0.5;

/// Smoothed Gaussian noise with roughly unit standard deviation.
fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..h * w).map(|_| n.sample(rng)).collect();
    // 3x3 box blur, clamped at the border
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt: f64 = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += raw[yy as usize * w + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / cnt.sqrt();
        }
    }
    out
}

/// Grayscale image with mean near `mu` and Gaussian texture.
pub fn textured(h: usize, w: usize, mu: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let t = texture(h, w, rng);
    Image::gray(h, w, t.iter().map(|v| (mu + sigma * v / 3.0).clamp(0.0, 1.0)).collect()).expect("sized")
}

/// Labelled visible image of the gate corpus.
#[derive(Debug, Clone)]
pub struct GateSample {
    pub id: String,
    pub image: Image,
    pub label: Illumination,
}

/// `n_bright` images with mean in `[0.6, 0.9]` and `n_dark` in `[0.1, 0.4]`,
/// labelled by the 0.5 mean-luminance threshold, interleaved.
pub fn gate_corpus(n_bright: usize, n_dark: usize, size: usize, seed: u64) -> Vec<GateSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bright + n_dark);
    let (mut b, mut d) = (0, 0);
    while b < n_bright || d < n_dark {
        let bright = d >= n_dark || (b < n_bright && (b + d) % 2 == 0);
        let mu = if bright { rng.gen_range(0.6..=0.9) } else { rng.gen_range(0.1..=0.4) };
        let sigma = rng.gen_range(0.05..0.15);
        let image = textured(size, size, mu, sigma, &mut rng);
        let label = if image.mean() > BRIGHTNESS_THRESHOLD {
            Illumination::High
        } else {
            Illumination::Low
        };
        let tag = if label == Illumination::High { 'D' } else { 'N' };
        out.push(GateSample {
            id: format!("g{:04}{tag}", b + d),
            image,
            label,
        });
        if bright {
            b += 1;
        } else {
            d += 1;
        }
    }
    out
}

/// Registered pairs: warm targets that stand out in infrared, textured
/// backgrounds in the visible band, day (`D`) and night (`N`) scenes
/// alternating. Visible images are RGB.
pub fn fusion_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let day = i % 2 == 0;
        let blobs: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                (
                    rng.gen_range(0.15..0.85) * size as f64,
                    rng.gen_range(0.15..0.85) * size as f64,
                    rng.gen_range(0.05..0.15) * size as f64,
                )
            })
            .collect();
        let heat = |y: usize, x: usize| -> f64 {
            blobs
                .iter()
                .map(|&(cy, cx, r)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    (-d2 / (2.0 * r * r)).exp()
                })
                .fold(0.0, f64::max)
        };
        let bg = textured(size, size, if day { 0.7 } else { 0.2 }, 0.15, &mut rng);
        let ir_noise = textured(size, size, 0.0, 0.05, &mut rng);
        let ir = Image::from_fn(size, size, |y, x| {
            (0.2 + 0.7 * heat(y, x) + ir_noise.data[y * size + x]).clamp(0.0, 1.0)
        });
        let tint = [rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15)];
        let mut vi = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let base = bg.data[y * size + x] * (1.0 - 0.3 * heat(y, x));
                vi.extend(tint.iter().map(|t| (base * t).clamp(0.0, 1.0)));
            }
        }
        let id = format!("{:05}{}", i, if day { 'D' } else { 'N' });
        let label = Some(if day { Illumination::High } else { Illumination::Low });
        out.push(ImagePair::new(id, ir, Image::new(size, size, 3, vi)?, label)?);
    }
    Ok(out)
}
