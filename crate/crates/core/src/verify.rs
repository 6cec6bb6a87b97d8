//! Numerical verification suites behind `gradcheck --scope`.
//!
//! Each check reduces an operation to a scalar by contracting its output with
//! a fixed random tensor, then compares autodiff against central
//! differences. Inputs are drawn away from kinks (abs, relu, max, clamp) so
//! the finite differences stay on one side of them.

use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    aca, bind_ctfb, ctfb_forward, ffn, register_ctfb, window_partition_shifted, AcaParams, Chirality, FfnWeights,
    Projections, RelativeBias,
};
use crate::error::{Error, Result};
use crate::fusion::{init_fusion_params, moctefuse_forward, FusionConfig, FusionNet};
use crate::gate::GateProbs;
use crate::losses::{competitive_loss, competitive_scalars, total_loss, verify_competitive_gradient, LossWeights};
use crate::params::ParamStore;
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};
use crate::tensor::{Conv2dOptions, Tensor};

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const COMPETITIVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitive,
    Ctfb,
    End2end,
    Competitive,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "primitive" => Ok(Scope::Primitive),
            "ctfb" => Ok(Scope::Ctfb),
            "end2end" => Ok(Scope::End2end),
            "competitive" => Ok(Scope::Competitive),
            other => Err(format!("unknown scope `{other}` (primitive|ctfb|end2end|competitive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, max_rel_err: f64, tolerance: f64, checked: usize) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err,
            tolerance,
            checked,
            passed: max_rel_err < tolerance,
        }
    }

    fn failed(name: &str, tolerance: f64, e: &Error) -> Self {
        log::error!("{name}: {e}");
        Self {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            tolerance,
            checked: 0,
            passed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scope: Scope,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// The first failure as a [`Error::Verification`].
    pub fn into_result(self) -> Result<Self> {
        let err = self.failures().next().map(|c| Error::Verification {
            what: c.name.clone(),
            index: 0,
            deviation: c.max_rel_err,
            tolerance: c.tolerance,
        });
        err.map_or(Ok(self), Err)
    }
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<VerifyReport> {
    let checks = match scope {
        Scope::Primitive => primitive_suite(seed),
        Scope::Ctfb => vec![ctfb_check(seed, 16, 4, 4, 0), ctfb_check(seed, 16, 4, 4, 2)],
        Scope::End2end => vec![end_to_end_check(seed)],
        Scope::Competitive => competitive_suite(seed, 100),
    };
    Ok(VerifyReport { scope, seed, checks })
}

// ---------------------------------------------------------------------------
// sampling helpers

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with magnitude in `[0.1, 1]` and random sign.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// A permutation of `n` values spaced 0.05 apart (no near-ties).
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    v
}

/// `sum(out * r)` with `r` drawn from `seed`; the same on every call.
fn contract(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_vec(out.shape(), normal(&mut rng, out.numel()))?;
    Ok(out.mul(&r)?.sum())
}

fn run<F>(name: &str, tol: f64, inputs: Vec<(Vec<usize>, Vec<f64>)>, seed: u64, max_coords: Option<usize>, f: F) -> CheckResult
where
    F: Fn(&[Tensor]) -> Result<Tensor> + Sync,
{
    let opts = GradcheckOptions {
        max_coords,
        seed,
        ..Default::default()
    };
    let proj = seed ^ 0x9e37_79b9_7f4a_7c15;
    match gradcheck(|v| contract(&f(v)?, proj), &inputs, &opts) {
        Ok(r) => CheckResult::new(name, r.max_rel_err, tol, r.checked),
        Err(e) => CheckResult::failed(name, tol, &e),
    }
}

fn sh(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

// ---------------------------------------------------------------------------
// primitives

/// Finite-difference checks of every differentiable tensor operation.
pub fn primitive_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = PRIMITIVE_TOL;
    let mut out = Vec::new();
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| (sh(s), normal(rng, s.iter().product()));
    let mut push = |c: CheckResult| out.push(c);

    let a = r(&mut rng, &[3, 4]);
    let b = r(&mut rng, &[4]);
    push(run("add", t, vec![a.clone(), b.clone()], seed, None, |v| v[0].add(&v[1])));
    push(run("sub", t, vec![a.clone(), b.clone()], seed, None, |v| v[0].sub(&v[1])));
    push(run("mul", t, vec![a.clone(), b.clone()], seed, None, |v| v[0].mul(&v[1])));
    let pos = (sh(&[4]), uniform(&mut rng, 4, 0.5, 2.0));
    push(run("div", t, vec![a.clone(), pos.clone()], seed, None, |v| v[0].div(&v[1])));
    let x = r(&mut rng, &[2, 5]);
    let gap: Vec<f64> = off_zero(&mut rng, 10);
    let y = (sh(&[2, 5]), x.1.iter().zip(&gap).map(|(p, g)| p + g).collect());
    push(run("max_elementwise", t, vec![x.clone(), y], seed, None, |v| v[0].max_elementwise(&v[1])));

    let m = r(&mut rng, &[2, 3, 4]);
    let p = (sh(&[2, 3, 4]), uniform(&mut rng, 24, 0.5, 2.0));
    let nz = (sh(&[2, 3, 4]), off_zero(&mut rng, 24));
    push(run("neg", t, vec![m.clone()], seed, None, |v| Ok(v[0].neg())));
    push(run("scale", t, vec![m.clone()], seed, None, |v| Ok(v[0].scale(-1.7))));
    push(run("add_scalar", t, vec![m.clone()], seed, None, |v| Ok(v[0].add_scalar(0.3).square())));
    push(run("square", t, vec![m.clone()], seed, None, |v| Ok(v[0].square())));
    push(run("sqrt", t, vec![p.clone()], seed, None, |v| Ok(v[0].sqrt())));
    push(run("exp", t, vec![m.clone()], seed, None, |v| Ok(v[0].exp())));
    push(run("ln", t, vec![p.clone()], seed, None, |v| Ok(v[0].ln())));
    push(run("abs", t, vec![nz.clone()], seed, None, |v| Ok(v[0].abs())));
    push(run("clamp", t, vec![nz.clone()], seed, None, |v| Ok(v[0].clamp(-0.05, 0.05))));
    push(run("sigmoid", t, vec![m.clone()], seed, None, |v| Ok(v[0].sigmoid())));
    push(run("relu", t, vec![nz.clone()], seed, None, |v| Ok(v[0].relu())));
    push(run("lrelu", t, vec![nz.clone()], seed, None, |v| Ok(v[0].lrelu(0.2))));
    push(run("gelu", t, vec![m.clone()], seed, None, |v| Ok(v[0].gelu())));
    push(run("sum", t, vec![m.clone()], seed, None, |v| Ok(v[0].sum())));
    push(run("mean", t, vec![m.clone()], seed, None, |v| Ok(v[0].mean())));
    push(run("l1_norm", t, vec![nz.clone()], seed, None, |v| Ok(v[0].l1_norm())));
    push(run("sum_axis", t, vec![m.clone()], seed, None, |v| v[0].sum_axis(1)));

    push(run("reshape", t, vec![m.clone()], seed, None, |v| v[0].reshape(&[4, 6])));
    let idx = [0usize, 5, 5, 23, 7, 1];
    push(run("gather", t, vec![m.clone()], seed, None, |v| v[0].gather(Rc::new(idx.to_vec()), &[2, 3])));
    push(run("permute", t, vec![m.clone()], seed, None, |v| v[0].permute(&[2, 0, 1])));
    push(run("transpose_last", t, vec![m.clone()], seed, None, |v| v[0].transpose_last()));
    let m2 = r(&mut rng, &[2, 1, 4]);
    push(run("concat", t, vec![m.clone(), m2], seed, None, |v| Tensor::concat(&[&v[0], &v[1]], 1)));
    push(run("narrow", t, vec![m.clone()], seed, None, |v| v[0].narrow(2, 1, 2)));
    let img = r(&mut rng, &[1, 2, 5, 6]);
    push(run("pad_reflect2d", t, vec![img.clone()], seed, None, |v| v[0].pad_reflect2d(2, 1, 1, 2)));

    let ma = r(&mut rng, &[2, 3, 4]);
    let mb = r(&mut rng, &[2, 4, 5]);
    push(run("matmul", t, vec![ma, mb], seed, None, |v| v[0].matmul(&v[1])));
    let mc = r(&mut rng, &[4, 5]);
    push(run("matmul_broadcast", t, vec![m.clone(), mc], seed, None, |v| v[0].matmul(&v[1])));
    let w = r(&mut rng, &[4, 3]);
    let bias = r(&mut rng, &[3]);
    push(run("linear", t, vec![m.clone(), w, bias], seed, None, |v| v[0].linear(&v[1], Some(&v[2]))));
    push(run("softmax", t, vec![m.clone()], seed, None, |v| v[0].softmax(2)));
    let g = r(&mut rng, &[4]);
    let bb = r(&mut rng, &[4]);
    push(run("layer_norm", t, vec![m.clone(), g, bb], seed, None, |v| v[0].layer_norm(&v[1], &v[2], 1e-5)));
    let cg = r(&mut rng, &[2]);
    let cb = r(&mut rng, &[2]);
    push(run("channel_affine", t, vec![img.clone(), cg, cb], seed, None, |v| v[0].channel_affine(&v[1], &v[2])));

    let k = r(&mut rng, &[3, 2, 3, 3]);
    let kb = r(&mut rng, &[3]);
    push(run("conv2d", t, vec![img.clone(), k.clone(), kb.clone()], seed, None, |v| {
        v[0].conv2d(&v[1], Some(&v[2]), Conv2dOptions::new(1, 1))
    }));
    push(run("conv2d_strided", t, vec![img.clone(), k], seed, None, |v| {
        v[0].conv2d(&v[1], None, Conv2dOptions::new(2, 1))
    }));
    let pool = (sh(&[1, 2, 6, 6]), distinct(&mut rng, 72));
    push(run("max_pool2d", t, vec![pool], seed, None, |v| v[0].max_pool2d(3, 2, 1)));
    push(run("global_avg_pool2d", t, vec![img], seed, None, |v| v[0].global_avg_pool2d()));

    let field = r(&mut rng, &[8, 8, 3]);
    push(run("window_partition_shifted", t, vec![field], seed, None, |v| {
        Ok(window_partition_shifted(&v[0], 4, 2)?.windows)
    }));
    out.push(aca_check(seed, &mut rng));
    out.push(ffn_check(seed, &mut rng));
    out
}

fn aca_check(seed: u64, rng: &mut ChaCha8Rng) -> CheckResult {
    let (nw, m, c, heads) = (2, 2, 4, 2);
    let span = (2 * m - 1) * (2 * m - 1);
    let mut inputs = vec![(sh(&[nw, m * m, c]), normal(rng, nw * m * m * c)), (sh(&[nw, m * m, c]), normal(rng, nw * m * m * c))];
    for _ in 0..6 {
        inputs.push((sh(&[c, c]), normal(rng, c * c)));
    }
    inputs.push((sh(&[span, heads]), normal(rng, span * heads)));
    inputs.push((sh(&[span, heads]), normal(rng, span * heads)));
    run("aca", PRIMITIVE_TOL, inputs, seed, None, |v| {
        let pp = Projections { wq: v[2].clone(), wk: v[3].clone(), wv: v[4].clone() };
        let pa = Projections { wq: v[5].clone(), wk: v[6].clone(), wv: v[7].clone() };
        let bias = RelativeBias { primary: v[8].clone(), auxiliary: v[9].clone() };
        let p = AcaParams { primary: &pp, auxiliary: &pa, bias: &bias, heads, window: m };
        aca(&v[0], &v[1], &p)
    })
}

fn ffn_check(seed: u64, rng: &mut ChaCha8Rng) -> CheckResult {
    let inputs = vec![
        (sh(&[3, 4]), normal(rng, 12)),
        (sh(&[4, 8]), normal(rng, 32)),
        (sh(&[8]), normal(rng, 8)),
        (sh(&[8, 4]), normal(rng, 32)),
        (sh(&[4]), normal(rng, 4)),
    ];
    run("ffn", PRIMITIVE_TOL, inputs, seed, None, |v| {
        let f = FfnWeights { w1: v[1].clone(), b1: v[2].clone(), w2: v[3].clone(), b2: v[4].clone() };
        ffn(&v[0], &f)
    })
}

// ---------------------------------------------------------------------------
// composites

/// One CTFB on `size × size × channels` features, all inputs and weights
/// checked.
pub fn ctfb_check(seed: u64, size: usize, channels: usize, window: usize, shift: usize) -> CheckResult {
    let name = format!("ctfb {size}x{size} C={channels} M={window} shift={shift}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    register_ctfb(&mut s, "blk", channels, window, 2, 2, &mut rng);
    for e in s.entries_mut() {
        for v in e.values.iter_mut() {
            *v += 0.1 * (rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0));
        }
    }
    let n = size * size * channels;
    let mut inputs = vec![
        (sh(&[size, size, channels]), normal(&mut rng, n)),
        (sh(&[size, size, channels]), normal(&mut rng, n)),
    ];
    inputs.extend(s.as_inputs());
    run(&name, COMPOSITE_TOL, inputs, seed, None, |v| {
        let b = s.bind_with(v[2..].to_vec())?;
        let p = bind_ctfb(&b, "blk", Chirality::HighIllumination, 2, window, shift)?;
        let o = ctfb_forward(&v[0], &v[1], &p)?;
        Tensor::concat(&[&o.primary, &o.auxiliary], 2)
    })
}

/// Whole network plus competitive loss at 16×16, C=4, depth 1; a random
/// subset of weight and pixel coordinates is checked.
pub fn end_to_end_check(seed: u64) -> CheckResult {
    let name = "end2end 16x16 C=4 depth=1";
    let cfg = FusionConfig {
        channels: 4,
        depth: 1,
        window: 4,
        heads: 2,
        ffn_ratio: 2,
        encoder_rtb: 1,
        encoder_rdb: 1,
    };
    let params = match init_fusion_params(&cfg, seed) {
        Ok(p) => p,
        Err(e) => return CheckResult::failed(name, COMPOSITE_TOL, &e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut inputs = vec![
        (sh(&[16, 16]), uniform(&mut rng, 256, 0.05, 0.95)),
        (sh(&[16, 16]), uniform(&mut rng, 256, 0.05, 0.95)),
    ];
    inputs.extend(params.as_inputs().into_iter().map(|(s, mut d)| {
        for v in d.iter_mut() {
            *v += 0.05 * (rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0));
        }
        (s, d)
    }));
    let gate = GateProbs::new(0.7).expect("valid gate");
    let w = LossWeights::default();
    let opts = GradcheckOptions {
        max_coords: Some(400),
        seed,
        ..Default::default()
    };
    let f = |v: &[Tensor]| -> Result<Tensor> {
        let net = FusionNet::new(&cfg, params.bind_with(v[2..].to_vec())?);
        let out = moctefuse_forward(&net, &v[0], &v[1], gate)?;
        let hi = total_loss(&out.i_f_hi, &v[0], &v[1], &w)?.total;
        let lo = total_loss(&out.i_f_lo, &v[0], &v[1], &w)?.total;
        Ok(competitive_loss(&[hi, lo], &gate.as_array())?.0)
    };
    match gradcheck(f, &inputs, &opts) {
        Ok(r) => CheckResult::new(name, r.max_rel_err, COMPOSITE_TOL, r.checked),
        Err(e) => CheckResult::failed(name, COMPOSITE_TOL, &e),
    }
}

/// Scalar-expert trials of the responsibility identity, the exact-zero
/// gradient of a losing expert, and one image-valued trial through the full
/// fusion loss.
pub fn competitive_suite(seed: u64, trials: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A smooth, non-quadratic per-expert loss so L' varies with o.
    let scalar_loss = |o: &Tensor| -> Result<Tensor> {
        let t = Tensor::full(o.shape(), 0.3);
        Ok(o.sub(&t)?.square().add_scalar(1.0).ln().add(&o.sigmoid())?.sum())
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut failure = None;
    for _ in 0..trials {
        let p = rng.gen_range(0.0..1.0);
        let outputs = vec![vec![rng.gen_range(-2.0..2.0)], vec![rng.gen_range(-2.0..2.0)]];
        match verify_competitive_gradient(&outputs, &[1], scalar_loss, &[p, 1.0 - p], COMPETITIVE_TOL) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                checked += r.checked;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let mut out = vec![match failure {
        None => CheckResult::new("competitive identity (scalar experts)", worst, COMPETITIVE_TOL, checked),
        Some(e) => CheckResult::failed("competitive identity (scalar experts)", COMPETITIVE_TOL, &e),
    }];

    // P = (1, 0): the losing expert receives an exactly zero gradient.
    let zero = (|| -> Result<bool> {
        let a = Tensor::param(&[1], vec![0.4])?;
        let b = Tensor::param(&[1], vec![-1.1])?;
        let (l, _) = competitive_loss(&[scalar_loss(&a)?, scalar_loss(&b)?], &[1.0, 0.0])?;
        l.backward()?;
        Ok(b.grad_vec().is_none_or(|g| g.iter().all(|v| *v == 0.0)))
    })();
    out.push(match zero {
        Ok(true) => CheckResult::new("competitive losing expert (P = 1, 0)", 0.0, f64::MIN_POSITIVE, 1),
        Ok(false) => CheckResult::new("competitive losing expert (P = 1, 0)", f64::INFINITY, f64::MIN_POSITIVE, 1),
        Err(e) => CheckResult::failed("competitive losing expert (P = 1, 0)", f64::MIN_POSITIVE, &e),
    });

    // Image-valued experts through the weighted fusion loss.
    let ir = Tensor::from_vec(&[12, 12], uniform(&mut rng, 144, 0.0, 1.0)).expect("sized");
    let vi = Tensor::from_vec(&[12, 12], uniform(&mut rng, 144, 0.0, 1.0)).expect("sized");
    let w = LossWeights::default();
    let outputs = vec![uniform(&mut rng, 144, 0.05, 0.95), uniform(&mut rng, 144, 0.05, 0.95)];
    let p = rng.gen_range(0.1..0.9);
    let image_loss = |o: &Tensor| Ok(total_loss(o, &ir, &vi, &w)?.total);
    out.push(
        match verify_competitive_gradient(&outputs, &[12, 12], image_loss, &[p, 1.0 - p], COMPETITIVE_TOL) {
            Ok(r) => CheckResult::new("competitive identity (fusion loss)", r.max_rel_err, COMPETITIVE_TOL, r.checked),
            Err(e) => CheckResult::failed("competitive identity (fusion loss)", COMPETITIVE_TOL, &e),
        },
    );

    // Closed-form value against an independent evaluation.
    let v = competitive_scalars(&[1.0, 2.0], &[0.6, 0.4]).map(|(l, _)| l);
    let oracle = -(0.6 * (-1.0f64).exp() + 0.4 * (-2.0f64).exp()).ln();
    out.push(match v {
        Ok(l) => CheckResult::new("competitive value", (l - oracle).abs(), 1e-12, 1),
        Err(e) => CheckResult::failed("competitive value", 1e-12, &e),
    });
    out
}
