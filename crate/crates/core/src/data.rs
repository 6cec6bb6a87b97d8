//! Image decoding/encoding, luminance handling and dataset ingestion.
//!
//! Dataset layout: `<root>/ir/<id>.png` and `<root>/vi/<id>.png` with
//! matching stems (`.pgm`/`.ppm` are accepted too). An optional
//! `<root>/labels.csv` with `id,label` rows overrides the filename rule,
//! under which a stem ending in `D` is a daytime (high illumination) scene
//! and one ending in `N` a nighttime scene.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

/// Interleaved `H × W × C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || !(channels == 1 || channels == 3) {
            return Err(Error::contract(format!(
                "{height}x{width}x{channels} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_color(&self) -> bool {
        self.channels == 3
    }

    /// BT.601 luminance; a gray image is returned unchanged.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Three-channel copy (gray replicated).
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Single-channel image as an `[H, W]` tensor.
    pub fn to_tensor_hw(&self) -> Result<Tensor> {
        if self.channels != 1 {
            return Err(Error::contract("to_tensor_hw on a color image"));
        }
        Tensor::from_vec(&[self.height, self.width], self.data.clone())
    }

    /// `[1, C, H, W]` planar tensor.
    pub fn to_tensor_nchw(&self) -> Result<Tensor> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut planar = vec![0.0; h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (k, v) in px.iter().enumerate() {
                planar[k * h * w + i] = *v;
            }
        }
        Tensor::from_vec(&[1, c, h, w], planar)
    }

    pub fn from_tensor_hw(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::contract(format!("expected an [H, W] tensor, got {s:?}")));
        }
        Image::gray(s[0], s[1], t.to_vec())
    }

    /// Copy of the `h × w` block at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::contract(format!(
                "crop {h}x{w}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        let c = self.channels;
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for k in 0..c {
                    let top = self.at(y0, x0, k) * (1.0 - tx) + self.at(y0, x1, k) * tx;
                    let bot = self.at(y1, x0, k) * (1.0 - tx) + self.at(y1, x1, k) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        Image {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Maps `[0, 1]` to 8-bit by `floor(x·255 + 0.5)` after clamping.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Day/night flag. `High` is the positive class (label 1) of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Illumination {
    High,
    Low,
}

impl Illumination {
    pub fn target(self) -> f64 {
        match self {
            Illumination::High => 1.0,
            Illumination::Low => 0.0,
        }
    }

    /// Filename rule: trailing `D` (day) or `N` (night).
    pub fn from_stem(stem: &str) -> Option<Self> {
        match stem.chars().last()? {
            'D' | 'd' => Some(Illumination::High),
            'N' | 'n' => Some(Illumination::Low),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "day" | "d" | "high" | "hi" => Some(Illumination::High),
            "0" | "night" | "n" | "low" | "lo" => Some(Illumination::Low),
            _ => None,
        }
    }
}

/// Registered infrared/visible pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub ir: Image,
    /// Visible image as decoded (gray or RGB).
    pub vi: Image,
    pub vi_luma: Image,
    pub label: Option<Illumination>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, ir: Image, vi: Image, label: Option<Illumination>) -> Result<Self> {
        let id = id.into();
        let ir = ir.luma();
        if ir.height != vi.height || ir.width != vi.width {
            return Err(Error::Ingestion {
                id,
                reason: format!(
                    "infrared is {}x{} but visible is {}x{}",
                    ir.height, ir.width, vi.height, vi.width
                ),
            });
        }
        let vi_luma = vi.luma();
        Ok(Self {
            id,
            ir,
            vi,
            vi_luma,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.ir.height
    }

    pub fn width(&self) -> usize {
        self.ir.width
    }
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Decodes PNG / PGM / PPM into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let color = img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if color {
        let rgb = img.to_rgb8();
        let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h, w, 3, data)
    } else {
        let g = img.to_luma8();
        let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h, w, 1, data)
    }
}

/// Encodes an image; the format follows the file extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = if img.channels == 3 {
        let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("sized above");
        DynamicImage::ImageRgb8(buf)
    } else {
        let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("sized above");
        DynamicImage::ImageLuma8(buf)
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    dynimg.save(path).map_err(|e| image_error(path, e))
}

/// Full-range BT.601 YCbCr with chroma centred on 0.5.
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b;
    let cb = 0.5 + (b - y) / 1.772;
    let cr = 0.5 + (r - y) / 1.402;
    (y, cb, cr)
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 0.5);
    let b = y + 1.772 * (cb - 0.5);
    let g = (y - LUMA_WEIGHTS[0] * r - LUMA_WEIGHTS[2] * b) / LUMA_WEIGHTS[1];
    (r, g, b)
}

/// Writes a fused luminance image. With a color visible source the fused
/// luma replaces Y and the visible chroma is kept.
pub fn save_fused(fused: &Image, vi: &Image, path: &Path) -> Result<()> {
    if fused.channels != 1 {
        return Err(Error::contract("fused image must be single-channel"));
    }
    if !vi.is_color() {
        return save_image(fused, path);
    }
    if vi.height != fused.height || vi.width != fused.width {
        return Err(Error::contract("fused and visible sizes differ"));
    }
    let mut data = Vec::with_capacity(vi.data.len());
    for (px, &yf) in vi.data.chunks_exact(3).zip(&fused.data) {
        let (_, cb, cr) = rgb_to_ycbcr(px[0], px[1], px[2]);
        let (r, g, b) = ycbcr_to_rgb(yf.clamp(0.0, 1.0), cb, cr);
        data.extend([r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]);
    }
    save_image(&Image::new(vi.height, vi.width, 3, data)?, path)
}

/// How training samples are brought to the working resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropMode {
    /// Random `size × size` window, upsampling first if the source is smaller.
    #[default]
    RandomCrop,
    /// Bilinear resize of the whole pair to `size × size`.
    Resize,
}

/// Brings a pair to `size × size`, applying the same window to both
/// modalities.
pub fn train_crop<R: Rng + ?Sized>(pair: &ImagePair, size: usize, mode: CropMode, rng: &mut R) -> Result<ImagePair> {
    let resize_both = |h: usize, w: usize| -> Result<ImagePair> {
        ImagePair::new(
            pair.id.clone(),
            pair.ir.resize_bilinear(h, w),
            pair.vi.resize_bilinear(h, w),
            pair.label,
        )
    };
    match mode {
        CropMode::Resize => {
            if pair.height() == size && pair.width() == size {
                return Ok(pair.clone());
            }
            resize_both(size, size)
        }
        CropMode::RandomCrop => {
            let src = if pair.height() < size || pair.width() < size {
                let scale = (size as f64 / pair.height() as f64).max(size as f64 / pair.width() as f64);
                let h = ((pair.height() as f64 * scale).ceil() as usize).max(size);
                let w = ((pair.width() as f64 * scale).ceil() as usize).max(size);
                resize_both(h, w)?
            } else {
                pair.clone()
            };
            let top = rng.gen_range(0..=src.height() - size);
            let left = rng.gen_range(0..=src.width() - size);
            let out = ImagePair::new(
                src.id.clone(),
                src.ir.crop(top, left, size, size)?,
                src.vi.crop(top, left, size, size)?,
                src.label,
            )?;
            Ok(out)
        }
    }
}

/// File locations of one dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPaths {
    pub id: String,
    pub ir: Option<PathBuf>,
    pub vi: PathBuf,
    pub label: Option<Illumination>,
}

/// Image files directly under `dir`, keyed by file stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    label: String,
}

/// Reads `labels.csv` (`id,label`) if present.
pub fn read_labels(root: &Path) -> Result<HashMap<String, Illumination>> {
    let path = root.join("labels.csv");
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut out = HashMap::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        let label = Illumination::parse(&row.label).ok_or_else(|| Error::Ingestion {
            id: row.id.clone(),
            reason: format!("unrecognized label `{}` in {}", row.label, path.display()),
        })?;
        out.insert(row.id, label);
    }
    Ok(out)
}

fn resolve_label(id: &str, overrides: &HashMap<String, Illumination>) -> Option<Illumination> {
    overrides.get(id).copied().or_else(|| Illumination::from_stem(id))
}

/// Pairs under `root/ir` and `root/vi`, sorted by id. With `require_ir` unset
/// visible-only entries are returned as well (gate training).
pub fn discover(root: &Path, require_ir: bool) -> Result<Vec<PairPaths>> {
    let vi = list_images(&root.join("vi"))?;
    let ir = if root.join("ir").is_dir() {
        list_images(&root.join("ir"))?
    } else if require_ir {
        return Err(Error::io(
            root.join("ir"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing ir directory"),
        ));
    } else {
        BTreeMap::new()
    };
    let labels = read_labels(root)?;
    let mut out = Vec::new();
    for (id, vi_path) in vi {
        let ir_path = ir.get(&id).cloned();
        if require_ir && ir_path.is_none() {
            continue;
        }
        out.push(PairPaths {
            label: resolve_label(&id, &labels),
            id,
            ir: ir_path,
            vi: vi_path,
        });
    }
    Ok(out)
}

pub fn load_pair(paths: &PairPaths) -> Result<ImagePair> {
    let ir_path = paths.ir.as_ref().ok_or_else(|| Error::Ingestion {
        id: paths.id.clone(),
        reason: "no infrared image".into(),
    })?;
    let ir = load_image(ir_path)?;
    let vi = load_image(&paths.vi)?;
    ImagePair::new(paths.id.clone(), ir, vi, paths.label)
}

/// Loads every pair under `root`.
pub fn load_dataset(root: &Path) -> Result<Vec<ImagePair>> {
    discover(root, true)?.iter().map(load_pair).collect()
}

/// Writes pairs in the dataset layout (`ir/`, `vi/`).
pub fn write_dataset(root: &Path, pairs: &[ImagePair]) -> Result<()> {
    for p in pairs {
        save_image(&p.ir, &root.join("ir").join(format!("{}.png", p.id)))?;
        save_image(&p.vi, &root.join("vi").join(format!("{}.png", p.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn gray_luma_is_identity() {
        let g = Image::from_fn(3, 4, |y, x| (y * 4 + x) as f64 / 12.0);
        assert_eq!(g.luma(), g);
    }

    #[test]
    fn ppm_luma_matches_formula() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let rgb = [(255u8, 0u8, 0u8), (10, 200, 30), (0, 0, 255), (128, 128, 128)];
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for (r, g, b) in rgb {
            bytes.extend([r, g, b]);
        }
        fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert!(img.is_color());
        let l = img.luma();
        for (i, (r, g, b)) in rgb.iter().enumerate() {
            let want = (0.299 * *r as f64 + 0.587 * *g as f64 + 0.114 * *b as f64) / 255.0;
            assert!((l.data[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn white_pixel_decodes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pgm");
        fs::write(&path, b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(load_image(&path).unwrap().data, vec![1.0]);
    }

    #[test]
    fn mismatched_pair_names_the_id() {
        let e = ImagePair::new("00004N", Image::filled(4, 4, 1, 0.0), Image::filled(4, 5, 1, 0.0), None).unwrap_err();
        assert!(e.to_string().contains("00004N"));
    }

    #[test]
    fn crop_identity_and_offsets() {
        let ramp = Image::from_fn(10, 12, |y, x| (y * 12 + x) as f64 / 120.0);
        let pair = ImagePair::new("p", ramp.clone(), ramp.clone(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = Image::from_fn(10, 10, |y, x| (y * 10 + x) as f64 / 100.0);
        let sq = ImagePair::new("q", same.clone(), same, None).unwrap();
        assert_eq!(train_crop(&sq, 10, CropMode::RandomCrop, &mut rng).unwrap(), sq);
        for _ in 0..10 {
            let c = train_crop(&pair, 4, CropMode::RandomCrop, &mut rng).unwrap();
            assert_eq!(c.ir, c.vi);
            // recover the offset from the ramp and check every pixel
            let v0 = (c.ir.data[0] * 120.0).round() as usize;
            let (top, left) = (v0 / 12, v0 % 12);
            for y in 0..4 {
                for x in 0..4 {
                    let want = ((top + y) * 12 + left + x) as f64 / 120.0;
                    assert!((c.ir.at(y, x, 0) - want).abs() < 1e-15);
                }
            }
        }
        let a = train_crop(&pair, 4, CropMode::RandomCrop, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = train_crop(&pair, 4, CropMode::RandomCrop, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_sources_are_upsampled() {
        let pair = ImagePair::new("s", Image::filled(6, 8, 1, 0.3), Image::filled(6, 8, 3, 0.6), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = train_crop(&pair, 16, CropMode::RandomCrop, &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), (16, 16));
        assert!(c.ir.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let r = train_crop(&pair, 16, CropMode::Resize, &mut rng).unwrap();
        assert_eq!((r.height(), r.width()), (16, 16));
    }

    #[test]
    fn ycbcr_round_trip() {
        for &(r, g, b) in &[(0.1, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3)] {
            let (y, cb, cr) = rgb_to_ycbcr(r, g, b);
            let (r2, g2, b2) = ycbcr_to_rgb(y, cb, cr);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_save_load_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |y, x| ((y * 7 + x) as f64 * 0.0271).fract());
        let path = dir.path().join("g.png");
        save_fused(&img, &Image::filled(5, 7, 1, 0.0), &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn fused_equal_to_luma_restores_color() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6 * 6 * 3).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect();
        let vi = Image::new(6, 6, 3, data).unwrap();
        let path = dir.path().join("c.png");
        save_fused(&vi.luma(), &vi, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(vi.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0 + 1e-12));
    }

    #[test]
    fn discovery_is_sorted_and_labelled() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let px = Image::filled(4, 4, 1, 0.5);
        for id in ["00559D", "00004N", "x1"] {
            save_image(&px, &root.join("ir").join(format!("{id}.png"))).unwrap();
            save_image(&px, &root.join("vi").join(format!("{id}.png"))).unwrap();
        }
        fs::write(root.join("labels.csv"), "id,label\nx1,day\n").unwrap();
        let found = discover(root, true).unwrap();
        let ids: Vec<&str> = found.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["00004N", "00559D", "x1"]);
        assert_eq!(found[0].label, Some(Illumination::Low));
        assert_eq!(found[1].label, Some(Illumination::High));
        assert_eq!(found[2].label, Some(Illumination::High));
        assert_eq!(load_dataset(root).unwrap().len(), 3);
    }
}
