//! The fusion generator: per-modality encoders, the high- and
//! low-illumination expert stacks, reconstruction heads and the
//! gate-weighted mixture.
//!
//! Parameter names are `enc.{vi,ir}.*` for the encoders and `{hi,lo}.*` for
//! the experts (`ctfb{k}`, `merge`, `rec`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    aca, bind_bias, bind_ctfb, bind_projections, ctfb_forward, register_bias, register_ctfb, register_layer_norm,
    register_linear, register_projections, window_partition, window_unpartition, AcaParams, Chirality,
};
use crate::error::{Error, Result};
use crate::gate::GateProbs;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::nn::LAYER_NORM_EPS;
use crate::tensor::{Conv2dOptions, Tensor, LRELU_SLOPE};

/// Inputs may overshoot `[0, 1]` by this much before they count as
/// unnormalized.
pub const INPUT_SLACK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub channels: usize,
    /// CTFBs per expert.
    pub depth: usize,
    pub window: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub encoder_rtb: usize,
    pub encoder_rdb: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            depth: 2,
            window: 8,
            heads: 2,
            ffn_ratio: 2,
            encoder_rtb: 1,
            encoder_rdb: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::contract(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.window < 2 || self.depth == 0 || self.ffn_ratio == 0 || self.channels < 2 {
            return Err(Error::contract(format!("invalid fusion config {self:?}")));
        }
        Ok(())
    }

    fn growth(&self) -> usize {
        (self.channels / 2).max(1)
    }

    /// Cyclic shift of CTFB `k` in an expert stack.
    pub fn shift_for(&self, k: usize) -> usize {
        if k % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }
}

fn expert_prefix(e: Chirality) -> &'static str {
    e.tag()
}

fn conv_param(s: &mut ParamStore, prefix: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    s.register(
        format!("{prefix}.w"),
        &[cout, cin, k, k],
        Init::He {
            fan_in: cin * k * k,
            slope: LRELU_SLOPE,
        },
        rng,
    );
    s.register(format!("{prefix}.b"), &[cout], Init::Zeros, rng);
}

fn register_encoder(s: &mut ParamStore, m: &str, cfg: &FusionConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.channels;
    conv_param(s, &format!("enc.{m}.conv0"), c, 1, 3, rng);
    for i in 0..cfg.encoder_rtb {
        let p = format!("enc.{m}.rtb{i}");
        register_layer_norm(s, &format!("{p}.ln"), c, rng);
        register_projections(s, &format!("{p}.attn"), c, rng);
        register_bias(s, &format!("{p}.attn"), cfg.window, cfg.heads, rng);
    }
    let g = cfg.growth();
    for i in 0..cfg.encoder_rdb {
        let p = format!("enc.{m}.rdb{i}");
        for (j, cin) in [c, c + g, c + 2 * g].into_iter().enumerate() {
            conv_param(s, &format!("{p}.c{}", j + 1), g, cin, 3, rng);
        }
        conv_param(s, &format!("{p}.fuse"), c, c + 3 * g, 1, rng);
    }
}

fn register_expert(s: &mut ParamStore, e: Chirality, cfg: &FusionConfig, rng: &mut ChaCha8Rng) {
    let x = expert_prefix(e);
    let c = cfg.channels;
    for k in 0..cfg.depth {
        register_ctfb(s, &format!("{x}.ctfb{k}"), c, cfg.window, cfg.heads, cfg.ffn_ratio, rng);
    }
    register_linear(s, &format!("{x}.merge"), 2 * c, c, rng);
    conv_param(s, &format!("{x}.rec.c1"), c, c, 3, rng);
    conv_param(s, &format!("{x}.rec.c2"), cfg.growth(), c, 3, rng);
    s.register(
        format!("{x}.rec.out.w"),
        &[1, cfg.growth(), 1, 1],
        Init::Xavier {
            fan_in: cfg.growth(),
            fan_out: 1,
        },
        rng,
    );
    s.register(format!("{x}.rec.out.b"), &[1], Init::Zeros, rng);
}

/// All generator parameters, initialized from `seed`.
pub fn init_fusion_params(cfg: &FusionConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for m in ["vi", "ir"] {
        register_encoder(&mut s, m, cfg, &mut rng);
    }
    for e in [Chirality::HighIllumination, Chirality::LowIllumination] {
        register_expert(&mut s, e, cfg, &mut rng);
    }
    Ok(s)
}

/// Parameters bound for one forward pass.
pub struct FusionNet<'a> {
    pub cfg: &'a FusionConfig,
    pub params: Bound<'a>,
}

impl<'a> FusionNet<'a> {
    pub fn new(cfg: &'a FusionConfig, params: Bound<'a>) -> Self {
        Self { cfg, params }
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    fn conv(&self, x: &Tensor, prefix: &str, padding: usize) -> Result<Tensor> {
        x.conv2d(
            &self.p(&format!("{prefix}.w"))?,
            Some(&self.p(&format!("{prefix}.b"))?),
            Conv2dOptions::new(1, padding),
        )
    }
}

/// `[H, W, C] -> [1, C, H, W]`.
fn hwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    x.permute(&[2, 0, 1])?.reshape(&[1, s[2], s[0], s[1]])
}

/// `[1, C, H, W] -> [H, W, C]`.
fn nchw_to_hwc(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    x.reshape(&[s[1], s[2], s[3]])?.permute(&[1, 2, 0])
}

fn check_image(x: &Tensor, window: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("expected an [H, W] image, got {s:?}")));
    }
    if s[0] % window != 0 || s[1] % window != 0 {
        return Err(Error::contract(format!(
            "image {}x{} is not a multiple of the window {window}",
            s[0], s[1]
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !(-INPUT_SLACK..=1.0 + INPUT_SLACK).contains(*v)) {
        return Err(Error::contract(format!("input value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Windowed self-attention with a residual, on `[H, W, C]`.
fn rtb(net: &FusionNet<'_>, x: &Tensor, prefix: &str) -> Result<Tensor> {
    let n = x.layer_norm(
        &net.p(&format!("{prefix}.ln.g"))?,
        &net.p(&format!("{prefix}.ln.b"))?,
        LAYER_NORM_EPS,
    )?;
    let proj = bind_projections(&net.params, &format!("{prefix}.attn"))?;
    let bias = bind_bias(&net.params, &format!("{prefix}.attn"))?;
    let tok = window_partition(&n, net.cfg.window)?;
    let p = AcaParams {
        primary: &proj,
        auxiliary: &proj,
        bias: &bias,
        heads: net.cfg.heads,
        window: net.cfg.window,
    };
    let a = aca(&tok.windows, &tok.windows, &p)?;
    window_unpartition(&a, &tok)?.add(x)
}

/// Residual dense block on `[1, C, H, W]`.
fn rdb(net: &FusionNet<'_>, x: &Tensor, prefix: &str) -> Result<Tensor> {
    let mut feats = vec![x.clone()];
    for j in 1..=3 {
        let input = Tensor::concat(&feats.iter().collect::<Vec<_>>(), 1)?;
        let y = net.conv(&input, &format!("{prefix}.c{j}"), 1)?.lrelu(LRELU_SLOPE);
        feats.push(y);
    }
    let all = Tensor::concat(&feats.iter().collect::<Vec<_>>(), 1)?;
    net.conv(&all, &format!("{prefix}.fuse"), 0)?.add(x)
}

/// One modality encoder: `[H, W] -> [H, W, C]`. `modality` is `"vi"` or
/// `"ir"`.
pub fn encode_one(net: &FusionNet<'_>, modality: &str, x: &Tensor) -> Result<Tensor> {
    check_image(x, net.cfg.window)?;
    let s = x.shape();
    let mut h = net
        .conv(&x.reshape(&[1, 1, s[0], s[1]])?, &format!("enc.{modality}.conv0"), 1)?
        .lrelu(LRELU_SLOPE);
    if net.cfg.encoder_rtb > 0 {
        let mut t = nchw_to_hwc(&h)?;
        for i in 0..net.cfg.encoder_rtb {
            t = rtb(net, &t, &format!("enc.{modality}.rtb{i}"))?;
        }
        h = hwc_to_nchw(&t)?;
    }
    for i in 0..net.cfg.encoder_rdb {
        h = rdb(net, &h, &format!("enc.{modality}.rdb{i}"))?;
    }
    nchw_to_hwc(&h)
}

/// `(z_ir, z_vi)`.
pub fn encode(net: &FusionNet<'_>, ir: &Tensor, vi: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((encode_one(net, "ir", ir)?, encode_one(net, "vi", vi)?))
}

/// Chained CTFBs of one expert followed by the concat + 1×1 merge.
pub fn expert_forward(net: &FusionNet<'_>, expert: Chirality, z_vi: &Tensor, z_ir: &Tensor) -> Result<Tensor> {
    let x = expert_prefix(expert);
    let (mut vi, mut ir) = (z_vi.clone(), z_ir.clone());
    let mut last = None;
    for k in 0..net.cfg.depth {
        let p = bind_ctfb(
            &net.params,
            &format!("{x}.ctfb{k}"),
            expert,
            net.cfg.heads,
            net.cfg.window,
            net.cfg.shift_for(k),
        )?;
        let out = ctfb_forward(&vi, &ir, &p)?;
        last = Some(out.clone());
        (vi, ir) = out.into_modalities(expert);
    }
    let out = last.ok_or_else(|| Error::contract("expert depth is zero"))?;
    Tensor::concat(&[&out.primary, &out.auxiliary], 2)?.linear(
        &net.p(&format!("{x}.merge.w"))?,
        Some(&net.p(&format!("{x}.merge.b"))?),
    )
}

/// `[H, W, C] -> [H, W]` in `(0, 1)`.
pub fn reconstruct(net: &FusionNet<'_>, expert: Chirality, feat: &Tensor) -> Result<Tensor> {
    let x = expert_prefix(expert);
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("reconstruct expects [H, W, C], got {s:?}")));
    }
    let h = hwc_to_nchw(feat)?;
    let h = net.conv(&h, &format!("{x}.rec.c1"), 1)?.lrelu(LRELU_SLOPE);
    let h = net.conv(&h, &format!("{x}.rec.c2"), 1)?.lrelu(LRELU_SLOPE);
    net.conv(&h, &format!("{x}.rec.out"), 0)?.sigmoid().reshape(&[s[0], s[1]])
}

/// Expert images and their gate-weighted mixture, all `[H, W]`.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub i_f: Tensor,
    pub i_f_hi: Tensor,
    pub i_f_lo: Tensor,
    pub gate: GateProbs,
}

/// Padding that brings `n` up to a multiple of `m`.
fn pad_to(n: usize, m: usize) -> usize {
    (m - n % m) % m
}

fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s[0] == h && s[1] == w {
        return Ok(x.clone());
    }
    x.narrow(0, 0, h)?.narrow(1, 0, w)
}

/// Runs both experts on a registered pair of `[H, W]` images and mixes them
/// with the gate. Sides that are not window multiples are reflect-padded and
/// cropped back.
pub fn moctefuse_forward(net: &FusionNet<'_>, ir: &Tensor, vi: &Tensor, gate: GateProbs) -> Result<FusionOutput> {
    gate.check()?;
    if ir.shape() != vi.shape() || ir.ndim() != 2 {
        return Err(Error::dim("moctefuse_forward", ir.shape(), vi.shape()));
    }
    let (h, w) = (ir.shape()[0], ir.shape()[1]);
    let m = net.cfg.window;
    let (ph, pw) = (pad_to(h, m), pad_to(w, m));
    let (ir_p, vi_p) = if ph + pw > 0 {
        (ir.pad_reflect2d(0, ph, 0, pw)?, vi.pad_reflect2d(0, ph, 0, pw)?)
    } else {
        (ir.clone(), vi.clone())
    };
    let (z_ir, z_vi) = encode(net, &ir_p, &vi_p)?;
    let mut outs = Vec::with_capacity(2);
    for e in [Chirality::HighIllumination, Chirality::LowIllumination] {
        let f = expert_forward(net, e, &z_vi, &z_ir)?;
        outs.push(crop(&reconstruct(net, e, &f)?, h, w)?);
    }
    let (hi, lo) = (outs[0].clone(), outs[1].clone());
    let i_f = mix(&hi, &lo, gate)?;
    Ok(FusionOutput {
        i_f,
        i_f_hi: hi,
        i_f_lo: lo,
        gate,
    })
}

/// `P_H·hi + P_L·lo`; a zero weight drops its term entirely.
pub fn mix(hi: &Tensor, lo: &Tensor, gate: GateProbs) -> Result<Tensor> {
    match (gate.p_h, gate.p_l) {
        (ph, pl) if pl == 0.0 && ph == 1.0 => Ok(hi.clone()),
        (ph, pl) if ph == 0.0 && pl == 1.0 => Ok(lo.clone()),
        (ph, pl) => hi.scale(ph).add(&lo.scale(pl)),
    }
}
