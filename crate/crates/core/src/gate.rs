//! Illumination gate: a ResNet18-style classifier over the visible image
//! whose single sigmoid output is `P_H`, with `P_L = 1 − P_H`.
//!
//! Batch normalization is replaced by a learned per-channel affine; there are
//! no running statistics, so training and inference share one code path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Conv2dOptions, Tensor};

/// Clamp applied to `P_H` inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Smallest input side the stride-32 trunk accepts.
pub const MIN_INPUT: usize = 32;
/// Initial gain of the affine closing each residual branch.
const BRANCH_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateProbs {
    pub p_h: f64,
    pub p_l: f64,
}

impl GateProbs {
    pub fn new(p_h: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_h) {
            return Err(Error::contract(format!("P_H = {p_h} outside [0, 1]")));
        }
        Ok(Self { p_h, p_l: 1.0 - p_h })
    }

    pub fn from_logit(z: f64) -> Self {
        let p_h = crate::tensor::sigmoid_scalar(z);
        Self { p_h, p_l: 1.0 - p_h }
    }

    /// The `P_H = 1` / `P_H = 0` routing used by the ablation switches.
    pub fn forced(high: bool) -> Self {
        if high {
            Self { p_h: 1.0, p_l: 0.0 }
        } else {
            Self { p_h: 0.0, p_l: 1.0 }
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.p_h, self.p_l]
    }

    pub fn check(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_h) && (0.0..=1.0).contains(&self.p_l);
        if !ok || (self.p_h + self.p_l - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "gate probabilities ({}, {}) do not form a distribution",
                self.p_h, self.p_l
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Output channels of the four residual stages; the stem uses `widths[0]`.
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    /// Square side the visible image is resized to before the gate, or 0 to
    /// use the native resolution.
    pub input_size: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl GateConfig {
    /// Stage widths 64/128/256/512, two basic blocks each.
    pub fn full() -> Self {
        Self {
            widths: [64, 128, 256, 512],
            blocks: [2, 2, 2, 2],
            input_size: 128,
        }
    }

    /// Same topology at one eighth of the width.
    pub fn compact() -> Self {
        Self {
            widths: [8, 16, 32, 64],
            blocks: [2, 2, 2, 2],
            input_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::contract(format!("invalid gate config {self:?}")));
        }
        if self.input_size != 0 && self.input_size < MIN_INPUT {
            return Err(Error::contract(format!(
                "gate input size {} below the minimum {MIN_INPUT}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// `(layer name, [C, H, W])` after the stem, pooling, each stage and the head.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

fn conv_w(s: &mut ParamStore, name: String, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    s.register(name, &[cout, cin, k, k], Init::He { fan_in: cin * k * k, slope: 0.0 }, rng);
}

fn affine(s: &mut ParamStore, prefix: &str, c: usize, gain: f64, rng: &mut ChaCha8Rng) {
    s.register(format!("{prefix}.g"), &[c], Init::Constant(gain), rng);
    s.register(format!("{prefix}.b"), &[c], Init::Zeros, rng);
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

/// Gate parameters initialized from `seed`.
pub fn init_gate_params(cfg: &GateConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    conv_w(&mut s, "stem.conv.w".into(), cfg.widths[0], 3, 7, &mut rng);
    affine(&mut s, "stem.aff", cfg.widths[0], 1.0, &mut rng);
    let mut cin = cfg.widths[0];
    for (si, (&w, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        for bi in 0..n {
            let p = format!("s{si}.b{bi}");
            conv_w(&mut s, format!("{p}.conv1.w"), w, cin, 3, &mut rng);
            affine(&mut s, &format!("{p}.aff1"), w, 1.0, &mut rng);
            conv_w(&mut s, format!("{p}.conv2.w"), w, w, 3, &mut rng);
            affine(&mut s, &format!("{p}.aff2"), w, BRANCH_GAIN, &mut rng);
            if cin != w || block_stride(si, bi) != 1 {
                conv_w(&mut s, format!("{p}.down.w"), w, cin, 1, &mut rng);
                affine(&mut s, &format!("{p}.down_aff"), w, 1.0, &mut rng);
            }
            cin = w;
        }
    }
    s.register("head.fc.w".into(), &[cin, 1], Init::Xavier { fan_in: cin, fan_out: 1 }, &mut rng);
    s.register("head.fc.b".into(), &[1], Init::Zeros, &mut rng);
    Ok(s)
}

fn chw(t: &Tensor) -> Vec<usize> {
    t.shape()[1..].to_vec()
}

fn aff(b: &Bound<'_>, x: &Tensor, prefix: &str) -> Result<Tensor> {
    x.channel_affine(&b.get(&format!("{prefix}.g"))?, &b.get(&format!("{prefix}.b"))?)
}

/// Gate logits `[B]` for visible images `[B, 3, H, W]`, with an optional
/// shape trace.
pub fn gate_logits(b: &Bound<'_>, cfg: &GateConfig, x: &Tensor, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::contract(format!("gate expects [B, 3, H, W], got {s:?}")));
    }
    if s[2] < MIN_INPUT || s[3] < MIN_INPUT {
        return Err(Error::contract(format!(
            "gate input {}x{} below the receptive minimum {MIN_INPUT}x{MIN_INPUT}",
            s[2], s[3]
        )));
    }
    let mut record = |name: &str, t: &Tensor| {
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((name.to_string(), chw(t)));
        }
    };
    let mut h = x.conv2d(&b.get("stem.conv.w")?, None, Conv2dOptions::new(2, 3))?;
    h = aff(b, &h, "stem.aff")?.relu();
    record("conv1", &h);
    h = h.max_pool2d(3, 2, 1)?;
    record("maxpool", &h);
    let mut cin = cfg.widths[0];
    for (si, (&w, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        for bi in 0..n {
            let p = format!("s{si}.b{bi}");
            let stride = block_stride(si, bi);
            let mut r = h.conv2d(&b.get(&format!("{p}.conv1.w"))?, None, Conv2dOptions::new(stride, 1))?;
            r = aff(b, &r, &format!("{p}.aff1"))?.relu();
            r = r.conv2d(&b.get(&format!("{p}.conv2.w"))?, None, Conv2dOptions::new(1, 1))?;
            r = aff(b, &r, &format!("{p}.aff2"))?;
            let short = if cin != w || stride != 1 {
                let d = h.conv2d(&b.get(&format!("{p}.down.w"))?, None, Conv2dOptions::new(stride, 0))?;
                aff(b, &d, &format!("{p}.down_aff"))?
            } else {
                h.clone()
            };
            h = r.add(&short)?.relu();
            cin = w;
        }
        record(&format!("conv{}_x", si + 2), &h);
    }
    let pooled = h.global_avg_pool2d()?;
    let logit = pooled.linear(&b.get("head.fc.w")?, Some(&b.get("head.fc.b")?))?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(("output".into(), vec![1, 1, 1]));
    }
    logit.reshape(&[s[0]])
}

/// Image to the `[1, 3, H, W]` gate input (gray replicated, resized if the
/// config asks for it).
pub fn gate_input(vi: &Image, cfg: &GateConfig) -> Result<Tensor> {
    let img = if cfg.input_size != 0 && (vi.height != cfg.input_size || vi.width != cfg.input_size) {
        vi.resize_bilinear(cfg.input_size, cfg.input_size)
    } else {
        vi.clone()
    };
    img.to_rgb().to_tensor_nchw()
}

/// Inference on one visible image.
pub fn gate_forward(params: &ParamStore, cfg: &GateConfig, vi: &Image) -> Result<GateProbs> {
    let b = params.bind(false);
    let z = gate_logits(&b, cfg, &gate_input(vi, cfg)?, None)?;
    Ok(GateProbs::from_logit(z.item()))
}

/// `−y·ln P_H − (1−y)·ln P_L` with `P_H` clamped to `[ε, 1−ε]`.
pub fn bce_loss(logit: &Tensor, y: f64) -> Result<Tensor> {
    let p = logit.sigmoid().clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = p.ln().scale(-y);
    let neg = p.neg().add_scalar(1.0).ln().scale(-(1.0 - y));
    Ok(pos.add(&neg)?.mean())
}

pub fn bce_value(p_h: f64, y: f64) -> f64 {
    let p = p_h.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}
