//! Window partitioning, asymmetric cross-attention (ACA) and the chiral
//! transformer fusion block (CTFB).
//!
//! Feature maps here are single-sample `[H, W, C]` tensors. ACA takes the
//! queries from the primary modality only; keys and values are the primary
//! and auxiliary projections stacked along the token axis, so every query
//! attends over `2·M²` keys. The relative position bias for that `M² × 2M²`
//! score block is two Swin-style tables: one for primary keys and one for
//! auxiliary keys, both indexed by the in-window offset.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::nn::LAYER_NORM_EPS;
use crate::tensor::Tensor;

/// Windows processed per slice when no gradient is being recorded.
const INFERENCE_WINDOW_CHUNK: usize = 64;

/// `[num_windows, M², C]` embeddings cut from an `[H, W, C]` map.
#[derive(Debug, Clone)]
pub struct WindowedTokens {
    pub windows: Tensor,
    pub origin: (usize, usize, usize),
    pub window: usize,
    /// Cyclic shift applied before cutting (rows and columns).
    pub shift: usize,
}

fn partition_index(h: usize, w: usize, c: usize, m: usize, shift: usize) -> Vec<usize> {
    let (nwy, nwx) = (h / m, w / m);
    let mut idx = Vec::with_capacity(h * w * c);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for ty in 0..m {
                let y = (wy * m + ty + shift) % h;
                for tx in 0..m {
                    let x = (wx * m + tx + shift) % w;
                    let base = (y * w + x) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

/// Splits `[H, W, C]` into non-overlapping `M × M` windows after rolling the
/// map by `-shift` in both spatial axes.
pub fn window_partition_shifted(x: &Tensor, m: usize, shift: usize) -> Result<WindowedTokens> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("window_partition expects [H, W, C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::contract(format!(
            "{h}x{w} map is not divisible into {m}x{m} windows (pad first)"
        )));
    }
    let idx = partition_index(h, w, c, m, shift);
    let windows = x.gather(Rc::new(idx), &[(h / m) * (w / m), m * m, c])?;
    Ok(WindowedTokens {
        windows,
        origin: (h, w, c),
        window: m,
        shift,
    })
}

pub fn window_partition(x: &Tensor, m: usize) -> Result<WindowedTokens> {
    window_partition_shifted(x, m, 0)
}

/// Inverse of [`window_partition_shifted`] applied to `windows` (which may be
/// a transformed copy of `layout.windows` with the same shape).
pub fn window_unpartition(windows: &Tensor, layout: &WindowedTokens) -> Result<Tensor> {
    let (h, w, c) = layout.origin;
    if windows.shape() != layout.windows.shape() {
        return Err(Error::dim("window_unpartition", windows.shape(), layout.windows.shape()));
    }
    let fwd = partition_index(h, w, c, layout.window, layout.shift);
    let mut inv = vec![0usize; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    windows.gather(Rc::new(inv), &[h, w, c])
}

/// Relative offset index for every (query, key) token pair in an `M × M`
/// window: `(dy + M - 1)·(2M - 1) + (dx + M - 1)`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            idx.push((yi + m - 1 - yj) * span + (xi + m - 1 - xj));
        }
    }
    idx
}

/// Query/key/value projections of one modality, each `[C, C]`.
#[derive(Debug, Clone)]
pub struct Projections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Bias tables `[(2M-1)², heads]` for primary keys and auxiliary keys.
#[derive(Debug, Clone)]
pub struct RelativeBias {
    pub primary: Tensor,
    pub auxiliary: Tensor,
}

impl RelativeBias {
    /// Expands the tables to the `[heads, M², 2M²]` score bias.
    pub fn expand(&self, m: usize, heads: usize) -> Result<Tensor> {
        let span = (2 * m - 1) * (2 * m - 1);
        for t in [&self.primary, &self.auxiliary] {
            if t.shape() != [span, heads] {
                return Err(Error::dim("relative bias table", t.shape(), &[span, heads]));
            }
        }
        let rel = relative_position_index(m);
        let t = m * m;
        let mut idx = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            idx.extend(rel.iter().map(|r| r * heads + h));
        }
        let idx = Rc::new(idx);
        let bp = self.primary.gather(idx.clone(), &[heads, t, t])?;
        let ba = self.auxiliary.gather(idx, &[heads, t, t])?;
        Tensor::concat(&[&bp, &ba], 2)
    }
}

/// Everything one directed ACA application needs.
pub struct AcaParams<'a> {
    pub primary: &'a Projections,
    pub auxiliary: &'a Projections,
    pub bias: &'a RelativeBias,
    pub heads: usize,
    pub window: usize,
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    let (nw, t, c) = (s[0], s[1], s[2]);
    x.reshape(&[nw, t, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

fn aca_core(primary: &Tensor, auxiliary: &Tensor, p: &AcaParams<'_>, bias: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = primary.shape();
    let (nw, t, c) = (s[0], s[1], s[2]);
    let dk = c / p.heads;
    let q = split_heads(&primary.linear(&p.primary.wq, None)?, p.heads)?;
    let k = Tensor::concat(
        &[
            &primary.linear(&p.primary.wk, None)?,
            &auxiliary.linear(&p.auxiliary.wk, None)?,
        ],
        1,
    )?;
    let v = Tensor::concat(
        &[
            &primary.linear(&p.primary.wv, None)?,
            &auxiliary.linear(&p.auxiliary.wv, None)?,
        ],
        1,
    )?;
    let (k, v) = (split_heads(&k, p.heads)?, split_heads(&v, p.heads)?);
    let scores = q
        .matmul(&k.transpose_last()?)?
        .scale(1.0 / (dk as f64).sqrt())
        .add(bias)?;
    let attn = scores.softmax(3)?;
    let out = attn
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw, t, c])?;
    Ok((out, attn))
}

fn check_aca_inputs(primary: &Tensor, auxiliary: &Tensor, p: &AcaParams<'_>) -> Result<()> {
    let s = primary.shape();
    if s.len() != 3 || auxiliary.shape() != s {
        return Err(Error::dim("aca", s, auxiliary.shape()));
    }
    if s[1] != p.window * p.window {
        return Err(Error::dim("aca tokens per window", s, &[p.window * p.window]));
    }
    if p.heads == 0 || s[2] % p.heads != 0 {
        return Err(Error::contract(format!("{} channels not divisible by {} heads", s[2], p.heads)));
    }
    Ok(())
}

/// ACA over a batch of windows: `[nW, M², C] × [nW, M², C] -> [nW, M², C]`.
pub fn aca(primary: &Tensor, auxiliary: &Tensor, p: &AcaParams<'_>) -> Result<Tensor> {
    check_aca_inputs(primary, auxiliary, p)?;
    let bias = p.bias.expand(p.window, p.heads)?;
    let nw = primary.shape()[0];
    let recording = primary.requires_grad()
        || auxiliary.requires_grad()
        || bias.requires_grad()
        || [p.primary, p.auxiliary]
            .iter()
            .any(|w| w.wq.requires_grad() || w.wk.requires_grad() || w.wv.requires_grad());
    if recording || nw <= INFERENCE_WINDOW_CHUNK {
        return Ok(aca_core(primary, auxiliary, p, &bias)?.0);
    }
    // Windows are independent; slicing bounds the score buffer at inference.
    let mut parts = Vec::new();
    let mut start = 0;
    while start < nw {
        let len = INFERENCE_WINDOW_CHUNK.min(nw - start);
        let (o, _) = aca_core(&primary.narrow(0, start, len)?, &auxiliary.narrow(0, start, len)?, p, &bias)?;
        parts.push(o);
        start += len;
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// ACA that also returns the `[nW, heads, M², 2M²]` attention weights.
pub fn aca_with_weights(primary: &Tensor, auxiliary: &Tensor, p: &AcaParams<'_>) -> Result<(Tensor, Tensor)> {
    check_aca_inputs(primary, auxiliary, p)?;
    let bias = p.bias.expand(p.window, p.heads)?;
    aca_core(primary, auxiliary, p, &bias)
}

/// Two-layer perceptron `C -> rC -> C` with GELU.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn ffn(x: &Tensor, f: &FfnWeights) -> Result<Tensor> {
    x.linear(&f.w1, Some(&f.b1))?.gelu().linear(&f.w2, Some(&f.b2))
}

/// Which modality leads a CTFB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Chirality {
    /// Visible primary, infrared auxiliary.
    HighIllumination,
    /// Infrared primary, visible auxiliary.
    LowIllumination,
}

impl Chirality {
    pub fn mirrored(self) -> Self {
        match self {
            Chirality::HighIllumination => Chirality::LowIllumination,
            Chirality::LowIllumination => Chirality::HighIllumination,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Chirality::HighIllumination => "hi",
            Chirality::LowIllumination => "lo",
        }
    }
}

/// All weights attached to one modality inside a CTFB.
#[derive(Debug, Clone)]
pub struct ModalityBranch {
    pub lp_w: Tensor,
    pub lp_b: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub proj: Projections,
    /// Bias used when this modality supplies the queries.
    pub bias: RelativeBias,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ffn: FfnWeights,
}

#[derive(Debug, Clone)]
pub struct CtfbParams {
    pub vi: ModalityBranch,
    pub ir: ModalityBranch,
    pub chirality: Chirality,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl CtfbParams {
    /// The same block with modality-tagged weights exchanged and chirality
    /// flipped.
    pub fn mirrored(&self) -> Self {
        CtfbParams {
            vi: self.ir.clone(),
            ir: self.vi.clone(),
            chirality: self.chirality.mirrored(),
            ..self.clone()
        }
    }
}

/// Both directed outputs of a CTFB, labelled by which modality queried.
#[derive(Debug, Clone)]
pub struct CtfbOutput {
    /// Stream queried by the primary modality (auxiliary → primary).
    pub primary: Tensor,
    /// Stream queried by the auxiliary modality (primary → auxiliary).
    pub auxiliary: Tensor,
}

impl CtfbOutput {
    /// `(visible-queried stream, infrared-queried stream)`.
    pub fn into_modalities(self, chirality: Chirality) -> (Tensor, Tensor) {
        match chirality {
            Chirality::HighIllumination => (self.primary, self.auxiliary),
            Chirality::LowIllumination => (self.auxiliary, self.primary),
        }
    }
}

/// One directed half of a CTFB: `query` modality attends over both.
fn directed(
    query: &ModalityBranch,
    other: &ModalityBranch,
    lp_q: &Tensor,
    tok_q: &WindowedTokens,
    tok_o: &WindowedTokens,
    heads: usize,
) -> Result<Tensor> {
    let p = AcaParams {
        primary: &query.proj,
        auxiliary: &other.proj,
        bias: &query.bias,
        heads,
        window: tok_q.window,
    };
    let attended = aca(&tok_q.windows, &tok_o.windows, &p)?;
    let z_aca = window_unpartition(&attended, tok_q)?.add(lp_q)?;
    let z_out = ffn(&z_aca.layer_norm(&query.ln2_g, &query.ln2_b, LAYER_NORM_EPS)?, &query.ffn)?;
    z_out.add(&z_aca)
}

/// `Z^ACA = ACA(LN(LP(primary)), LN(LP(auxiliary))) + LP(primary)`,
/// `Z^out = FFN(LN(Z^ACA)) + Z^ACA`, for both directed pairs.
pub fn ctfb_forward(z_vi: &Tensor, z_ir: &Tensor, p: &CtfbParams) -> Result<CtfbOutput> {
    if z_vi.shape() != z_ir.shape() || z_vi.ndim() != 3 {
        return Err(Error::dim("ctfb", z_vi.shape(), z_ir.shape()));
    }
    let (prim_in, aux_in, prim, aux) = match p.chirality {
        Chirality::HighIllumination => (z_vi, z_ir, &p.vi, &p.ir),
        Chirality::LowIllumination => (z_ir, z_vi, &p.ir, &p.vi),
    };
    let lp_p = prim_in.linear(&prim.lp_w, Some(&prim.lp_b))?;
    let lp_a = aux_in.linear(&aux.lp_w, Some(&aux.lp_b))?;
    let tok_p = window_partition_shifted(
        &lp_p.layer_norm(&prim.ln1_g, &prim.ln1_b, LAYER_NORM_EPS)?,
        p.window,
        p.shift,
    )?;
    let tok_a = window_partition_shifted(
        &lp_a.layer_norm(&aux.ln1_g, &aux.ln1_b, LAYER_NORM_EPS)?,
        p.window,
        p.shift,
    )?;
    Ok(CtfbOutput {
        primary: directed(prim, aux, &lp_p, &tok_p, &tok_a, p.heads)?,
        auxiliary: directed(aux, prim, &lp_a, &tok_a, &tok_p, p.heads)?,
    })
}

// ---------------------------------------------------------------------------
// parameter layout

pub(crate) fn register_projections<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
    for n in ["wq", "wk", "wv"] {
        s.register(format!("{prefix}.{n}"), &[c, c], Init::Xavier { fan_in: c, fan_out: c }, rng);
    }
}

pub(crate) fn bind_projections(b: &Bound<'_>, prefix: &str) -> Result<Projections> {
    Ok(Projections {
        wq: b.get(&format!("{prefix}.wq"))?,
        wk: b.get(&format!("{prefix}.wk"))?,
        wv: b.get(&format!("{prefix}.wv"))?,
    })
}

pub(crate) fn register_bias<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, m: usize, heads: usize, rng: &mut R) {
    let span = (2 * m - 1) * (2 * m - 1);
    s.register(format!("{prefix}.rel_primary"), &[span, heads], Init::Normal(0.02), rng);
    s.register(format!("{prefix}.rel_auxiliary"), &[span, heads], Init::Normal(0.02), rng);
}

pub(crate) fn bind_bias(b: &Bound<'_>, prefix: &str) -> Result<RelativeBias> {
    Ok(RelativeBias {
        primary: b.get(&format!("{prefix}.rel_primary"))?,
        auxiliary: b.get(&format!("{prefix}.rel_auxiliary"))?,
    })
}

pub(crate) fn register_layer_norm<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
    s.register(format!("{prefix}.g"), &[c], Init::Ones, rng);
    s.register(format!("{prefix}.b"), &[c], Init::Zeros, rng);
}

pub(crate) fn register_linear<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut R) {
    s.register(format!("{prefix}.w"), &[cin, cout], Init::Xavier { fan_in: cin, fan_out: cout }, rng);
    s.register(format!("{prefix}.b"), &[cout], Init::Zeros, rng);
}

fn register_branch<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, c: usize, m: usize, heads: usize, ratio: usize, rng: &mut R) {
    register_linear(s, &format!("{prefix}.lp"), c, c, rng);
    register_layer_norm(s, &format!("{prefix}.ln1"), c, rng);
    register_projections(s, &format!("{prefix}.attn"), c, rng);
    register_bias(s, &format!("{prefix}.attn"), m, heads, rng);
    register_layer_norm(s, &format!("{prefix}.ln2"), c, rng);
    register_linear(s, &format!("{prefix}.ffn1"), c, ratio * c, rng);
    register_linear(s, &format!("{prefix}.ffn2"), ratio * c, c, rng);
}

fn bind_branch(b: &Bound<'_>, prefix: &str) -> Result<ModalityBranch> {
    let g = |n: &str| b.get(&format!("{prefix}.{n}"));
    Ok(ModalityBranch {
        lp_w: g("lp.w")?,
        lp_b: g("lp.b")?,
        ln1_g: g("ln1.g")?,
        ln1_b: g("ln1.b")?,
        proj: bind_projections(b, &format!("{prefix}.attn"))?,
        bias: bind_bias(b, &format!("{prefix}.attn"))?,
        ln2_g: g("ln2.g")?,
        ln2_b: g("ln2.b")?,
        ffn: FfnWeights {
            w1: g("ffn1.w")?,
            b1: g("ffn1.b")?,
            w2: g("ffn2.w")?,
            b2: g("ffn2.b")?,
        },
    })
}

/// Registers a CTFB under `prefix` (`{prefix}.vi.*`, `{prefix}.ir.*`).
pub fn register_ctfb<R: Rng + ?Sized>(
    s: &mut ParamStore,
    prefix: &str,
    channels: usize,
    window: usize,
    heads: usize,
    ffn_ratio: usize,
    rng: &mut R,
) {
    for m in ["vi", "ir"] {
        register_branch(s, &format!("{prefix}.{m}"), channels, window, heads, ffn_ratio, rng);
    }
}

pub fn bind_ctfb(
    b: &Bound<'_>,
    prefix: &str,
    chirality: Chirality,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<CtfbParams> {
    Ok(CtfbParams {
        vi: bind_branch(b, &format!("{prefix}.vi"))?,
        ir: bind_branch(b, &format!("{prefix}.ir"))?,
        chirality,
        heads,
        window,
        shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
        let d = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| d.sample(rng)).collect()
    }

    #[test]
    fn partition_counts() {
        let x = Tensor::zeros(&[8, 8, 3]);
        assert_eq!(window_partition(&x, 8).unwrap().windows.shape(), &[1, 64, 3]);
        let x = Tensor::zeros(&[128, 128, 1]);
        assert_eq!(window_partition(&x, 8).unwrap().windows.shape(), &[256, 64, 1]);
        assert!(window_partition(&Tensor::zeros(&[10, 8, 1]), 8).is_err());
    }

    #[test]
    fn partition_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[16, 16, 4], randn(&mut rng, 1024, 1.0)).unwrap();
        for shift in [0, 2] {
            let t = window_partition_shifted(&x, 4, shift).unwrap();
            let back = window_unpartition(&t.windows, &t).unwrap();
            assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn first_window_holds_top_left_block() {
        let x = Tensor::from_vec(&[4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let t = window_partition(&x, 2).unwrap();
        assert_eq!(&t.windows.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        let s = window_partition_shifted(&x, 2, 1).unwrap();
        assert_eq!(&s.windows.data()[..4], &[5.0, 6.0, 9.0, 10.0]);
        // last window wraps around
        assert_eq!(&s.windows.data()[12..], &[15.0, 12.0, 3.0, 0.0]);
    }

    #[test]
    fn relative_index_is_symmetric_offset() {
        let r = relative_position_index(2);
        // token 0 vs itself is offset (0,0) -> centre of a 3x3 table
        assert_eq!(r[0], 4);
        // token 0 (0,0) vs token 3 (1,1): offset (-1,-1)
        assert_eq!(r[3], 0);
        assert_eq!(r[3 * 4], 8);
    }

    fn random_projections(rng: &mut ChaCha8Rng, c: usize) -> Projections {
        let mut m = || Tensor::from_vec(&[c, c], randn(rng, c * c, 0.5)).unwrap();
        Projections { wq: m(), wk: m(), wv: m() }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, c, heads) = (2, 6, 2);
        let proj_p = random_projections(&mut rng, c);
        let proj_a = random_projections(&mut rng, c);
        let span = 9;
        let bias = RelativeBias {
            primary: Tensor::from_vec(&[span, heads], randn(&mut rng, span * heads, 1.0)).unwrap(),
            auxiliary: Tensor::from_vec(&[span, heads], randn(&mut rng, span * heads, 1.0)).unwrap(),
        };
        let p = AcaParams { primary: &proj_p, auxiliary: &proj_a, bias: &bias, heads, window: m };
        let xp = Tensor::from_vec(&[3, 4, c], randn(&mut rng, 72, 1.0)).unwrap();
        let xa = Tensor::from_vec(&[3, 4, c], randn(&mut rng, 72, 1.0)).unwrap();
        let (out, attn) = aca_with_weights(&xp, &xa, &p).unwrap();
        assert_eq!(out.shape(), &[3, 4, c]);
        assert_eq!(attn.shape(), &[3, heads, 4, 8]);
        for row in attn.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = Tensor::zeros(&[3, 4, 4]);
        assert!(aca(&xp, &bad, &p).is_err());
    }

    #[test]
    fn chunked_inference_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, c, heads) = (2, 4, 2);
        let proj = random_projections(&mut rng, c);
        let bias = RelativeBias {
            primary: Tensor::from_vec(&[9, heads], randn(&mut rng, 18, 1.0)).unwrap(),
            auxiliary: Tensor::from_vec(&[9, heads], randn(&mut rng, 18, 1.0)).unwrap(),
        };
        let p = AcaParams { primary: &proj, auxiliary: &proj, bias: &bias, heads, window: m };
        let nw = INFERENCE_WINDOW_CHUNK * 2 + 3;
        let xp = Tensor::from_vec(&[nw, 4, c], randn(&mut rng, nw * 16, 1.0)).unwrap();
        let xa = Tensor::from_vec(&[nw, 4, c], randn(&mut rng, nw * 16, 1.0)).unwrap();
        let chunked = aca(&xp, &xa, &p).unwrap();
        let (whole, _) = aca_with_weights(&xp, &xa, &p).unwrap();
        assert_eq!(chunked.data(), whole.data());
    }

    #[test]
    fn ffn_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[8, 4], randn(&mut rng, 32, 1.0)).unwrap();
        let zero = FfnWeights {
            w1: Tensor::zeros(&[4, 8]),
            b1: Tensor::zeros(&[8]),
            w2: Tensor::zeros(&[8, 4]),
            b2: Tensor::zeros(&[4]),
        };
        assert!(ffn(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        let ident = FfnWeights {
            w1: Tensor::from_vec(&[4, 4], eye.clone()).unwrap(),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::from_vec(&[4, 4], eye).unwrap(),
            b2: Tensor::zeros(&[4]),
        };
        let y = ffn(&x, &ident).unwrap();
        for (a, b) in y.data().iter().zip(x.gelu().data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ffn_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            (vec![8, 4], randn(&mut rng, 32, 1.0)),
            (vec![4, 8], randn(&mut rng, 32, 0.5)),
            (vec![8], randn(&mut rng, 8, 0.1)),
            (vec![8, 4], randn(&mut rng, 32, 0.5)),
            (vec![4], randn(&mut rng, 4, 0.1)),
        ];
        let r = gradcheck(
            |v| {
                let f = FfnWeights { w1: v[1].clone(), b1: v[2].clone(), w2: v[3].clone(), b2: v[4].clone() };
                Ok(ffn(&v[0], &f)?.square().sum())
            },
            &inputs,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    fn random_ctfb(seed: u64, c: usize, m: usize, heads: usize, shift: usize) -> (ParamStore, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        register_ctfb(&mut s, "blk", c, m, heads, 2, &mut rng);
        // perturb every parameter so gains and biases are not trivial
        for e in s.entries_mut() {
            for v in e.values.iter_mut() {
                *v += 0.1 * randn(&mut rng, 1, 1.0)[0];
            }
        }
        (s, shift)
    }

    #[test]
    fn ctfb_preserves_shapes() {
        let (s, _) = random_ctfb(1, 8, 4, 2, 0);
        let b = s.bind(false);
        let p = bind_ctfb(&b, "blk", Chirality::HighIllumination, 2, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zv = Tensor::from_vec(&[16, 16, 8], randn(&mut rng, 2048, 1.0)).unwrap();
        let zi = Tensor::from_vec(&[16, 16, 8], randn(&mut rng, 2048, 1.0)).unwrap();
        let out = ctfb_forward(&zv, &zi, &p).unwrap();
        assert_eq!(out.primary.shape(), &[16, 16, 8]);
        assert_eq!(out.auxiliary.shape(), &[16, 16, 8]);
        assert!(out.primary.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_ffn_reduces_to_attention_residual() {
        let (mut s, _) = random_ctfb(2, 4, 2, 2, 0);
        for e in s.entries_mut() {
            if e.name.contains("ffn") {
                e.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let b = s.bind(false);
        let p = bind_ctfb(&b, "blk", Chirality::LowIllumination, 2, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zv = Tensor::from_vec(&[4, 4, 4], randn(&mut rng, 64, 1.0)).unwrap();
        let zi = Tensor::from_vec(&[4, 4, 4], randn(&mut rng, 64, 1.0)).unwrap();
        let out = ctfb_forward(&zv, &zi, &p).unwrap();
        // recompute Z^ACA for the primary (infrared) path by hand
        let lp_p = zi.linear(&p.ir.lp_w, Some(&p.ir.lp_b)).unwrap();
        let lp_a = zv.linear(&p.vi.lp_w, Some(&p.vi.lp_b)).unwrap();
        let tp = window_partition(&lp_p.layer_norm(&p.ir.ln1_g, &p.ir.ln1_b, LAYER_NORM_EPS).unwrap(), 2).unwrap();
        let ta = window_partition(&lp_a.layer_norm(&p.vi.ln1_g, &p.vi.ln1_b, LAYER_NORM_EPS).unwrap(), 2).unwrap();
        let ap = AcaParams { primary: &p.ir.proj, auxiliary: &p.vi.proj, bias: &p.ir.bias, heads: 2, window: 2 };
        let z_aca = window_unpartition(&aca(&tp.windows, &ta.windows, &ap).unwrap(), &tp)
            .unwrap()
            .add(&lp_p)
            .unwrap();
        assert_eq!(out.primary.data(), z_aca.data());
    }

    #[test]
    fn mirrored_block_swaps_outputs_bitwise() {
        let (s, _) = random_ctfb(3, 8, 4, 2, 0);
        let b = s.bind(false);
        let hi = bind_ctfb(&b, "blk", Chirality::HighIllumination, 2, 4, 2).unwrap();
        let lo = hi.mirrored();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zv = Tensor::from_vec(&[8, 8, 8], randn(&mut rng, 512, 1.0)).unwrap();
        let zi = Tensor::from_vec(&[8, 8, 8], randn(&mut rng, 512, 1.0)).unwrap();
        let (hv, hr) = ctfb_forward(&zv, &zi, &hi).unwrap().into_modalities(hi.chirality);
        let (lv, lr) = ctfb_forward(&zi, &zv, &lo).unwrap().into_modalities(lo.chirality);
        assert_eq!(hv.data(), lr.data());
        assert_eq!(hr.data(), lv.data());
    }

    #[test]
    fn ctfb_gradcheck_small() {
        let (s, _) = random_ctfb(4, 4, 4, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut inputs: Vec<(Vec<usize>, Vec<f64>)> = vec![
            (vec![8, 8, 4], randn(&mut rng, 256, 1.0)),
            (vec![8, 8, 4], randn(&mut rng, 256, 1.0)),
        ];
        inputs.extend(s.as_inputs());
        let proj = randn(&mut rng, 512, 1.0);
        let opts = GradcheckOptions { max_coords: Some(300), seed: 1, ..Default::default() };
        let r = gradcheck(
            |v| {
                let b = s.bind_with(v[2..].to_vec())?;
                let p = bind_ctfb(&b, "blk", Chirality::HighIllumination, 2, 4, 2)?;
                let out = ctfb_forward(&v[0], &v[1], &p)?;
                let both = Tensor::concat(&[&out.primary, &out.auxiliary], 2)?;
                Ok(both.mul(&Tensor::from_vec(&[8, 8, 8], proj.clone())?)?.sum())
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
