//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the report is never
//! captured.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moctefuse::attention::{aca, bind_ctfb, ctfb_forward, register_ctfb, relative_position_index, AcaParams, Chirality, Projections, RelativeBias};
use moctefuse::checkpoint::{Checkpoint, ModelKind};
use moctefuse::data::{load_image, quantize, save_image, Image, ImagePair};
use moctefuse::fusion::{init_fusion_params, moctefuse_forward, FusionConfig, FusionNet};
use moctefuse::gate::{gate_forward, gate_logits, init_gate_params, GateConfig, GateProbs, ShapeTrace};
use moctefuse::losses::{competitive_scalars, gradient_loss, intensity_loss, ssim_loss, total_loss, LossWeights};
use moctefuse::metrics::{entropy, mutual_information, std_dev, vif, vif_pair};
use moctefuse::params::ParamStore;
use moctefuse::synth::{fusion_pairs, gate_corpus};
use moctefuse::trainer::{fusion_loss, gate_accuracy, train_fuse, train_gate, FuseOptions, GateRef, LabelledImage, TrainConfig, TrainState};
use moctefuse::verify::{competitive_suite, ctfb_check, primitive_suite};
use moctefuse::{par, Tensor};

const SEED: u64 = 20240;
/// Learning rate of the 300-step overfit run.
const OVERFIT_LR: f64 = 5e-3;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rvec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(shape, rvec(rng, shape.iter().product(), lo, hi)).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut checks = primitive_suite(SEED);
    let prim = checks.len();
    let worst_prim = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let ctfb = ctfb_check(SEED, 16, 4, 4, 0);
    let ctfb_err = ctfb.max_rel_err;
    checks.push(ctfb);
    let elapsed = start.elapsed();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({:.2e} >= {:.0e})", c.name, c.max_rel_err, c.tolerance))
        .collect();
    ensure(failed.is_empty(), || format!("failing: {}", failed.join(", ")))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{prim} primitives max rel err {worst_prim:.2e} (< 1e-5); CTFB 16x16 C=4 M=4 {ctfb_err:.2e} (< 1e-4); {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2

fn competitive_identity() -> Outcome {
    let checks = competitive_suite(SEED, 100);
    let identity = &checks[0];
    let zero = &checks[1];
    ensure(identity.passed, || format!("{identity:?}"))?;
    ensure(identity.checked == 200, || format!("checked {} coordinates", identity.checked))?;
    ensure(zero.passed, || "losing expert received a non-zero gradient".into())?;
    Ok(format!(
        "100 trials, max rel err {:.2e} (< 1e-8); P=(1,0) loser gradient exactly 0",
        identity.max_rel_err
    ))
}

// ---------------------------------------------------------------------------
// 3

/// Multi-head self-attention over one window, written with loops.
fn dense_attention(x: &[f64], t: usize, c: usize, heads: usize, m: usize, p: &Projections, table: &[f64]) -> Vec<f64> {
    let mat = |w: &Tensor| -> Vec<f64> {
        let w = w.data();
        (0..t * c)
            .map(|ij| {
                let (i, j) = (ij / c, ij % c);
                (0..c).map(|k| x[i * c + k] * w[k * c + j]).sum()
            })
            .collect()
    };
    let (q, k, v) = (mat(&p.wq), mat(&p.wk), mat(&p.wv));
    let d = c / heads;
    let rel = relative_position_index(m);
    let mut out = vec![0.0; t * c];
    for h in 0..heads {
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum();
                    dot / (d as f64).sqrt() + table[rel[i * t + j] * heads + h]
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for dd in 0..d {
                out[i * c + h * d + dd] = (0..t).map(|j| e[j] / z * v[j * c + h * d + dd]).sum();
            }
        }
    }
    out
}

fn aca_oracle() -> Outcome {
    let (m, c, heads) = (2, 6, 2);
    let t = m * m;
    let span = (2 * m - 1) * (2 * m - 1);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + trial);
        let x = rvec(&mut rng, t * c, -2.0, 2.0);
        let p = Projections {
            wq: rt(&mut rng, &[c, c], -1.0, 1.0),
            wk: rt(&mut rng, &[c, c], -1.0, 1.0),
            wv: rt(&mut rng, &[c, c], -1.0, 1.0),
        };
        let table = rvec(&mut rng, span * heads, -1.0, 1.0);
        let tab = Tensor::from_vec(&[span, heads], table.clone()).unwrap();
        let bias = RelativeBias {
            primary: tab.clone(),
            auxiliary: tab,
        };
        let ap = AcaParams {
            primary: &p,
            auxiliary: &p,
            bias: &bias,
            heads,
            window: m,
        };
        let xt = Tensor::from_vec(&[1, t, c], x.clone()).unwrap();
        let got = aca(&xt, &xt, &ap).map_err(|e| e.to_string())?;
        let want = dense_attention(&x, t, c, heads, m, &p, &table);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("50 trials, 4 tokens, C=6: max |ACA - dense| {worst:.2e} (< 1e-10)"))
}

// ---------------------------------------------------------------------------
// 4

fn chirality() -> Outcome {
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 100 + trial);
        let (c, m, heads) = ([4, 6, 8][trial as usize % 3], [2, 4][trial as usize % 2], 2);
        let size = m * rng.gen_range(1..=3);
        let shift = if trial % 2 == 0 { 0 } else { m / 2 };
        let mut s = ParamStore::new();
        register_ctfb(&mut s, "blk", c, m, heads, 2, &mut rng);
        let names: Vec<String> = s.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            for v in s.get_mut(&name).unwrap().values.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let b = s.bind(false);
        let hi = bind_ctfb(&b, "blk", Chirality::HighIllumination, heads, m, shift).map_err(|e| e.to_string())?;
        let lo = hi.mirrored();
        let zv = rt(&mut rng, &[size, size, c], -2.0, 2.0);
        let zi = rt(&mut rng, &[size, size, c], -2.0, 2.0);
        let (hv, hr) = ctfb_forward(&zv, &zi, &hi).map_err(|e| e.to_string())?.into_modalities(hi.chirality);
        let (lv, lr) = ctfb_forward(&zi, &zv, &lo).map_err(|e| e.to_string())?.into_modalities(lo.chirality);
        ensure(hv.data() == lr.data() && hr.data() == lv.data(), || {
            format!("trial {trial}: outputs not exactly swapped")
        })?;
    }
    Ok("20 trials: mirrored HI/LI blocks on swapped inputs give bitwise swapped outputs".into())
}

// ---------------------------------------------------------------------------
// 5

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let img = rt(&mut rng, &[24, 24], 0.0, 1.0);
    let w = LossWeights::default();
    let err = |e: moctefuse::Error| e.to_string();
    let li = intensity_loss(&img, &img, &img).map_err(err)?.item();
    let lg = gradient_loss(&img, &img, &img).map_err(err)?.item();
    let ls = ssim_loss(&img, &img, &img, &w).map_err(err)?.item();
    let lt = total_loss(&img, &img, &img, &w).map_err(err)?.total.item();
    let (lf, _) = competitive_scalars(&[lt, lt], &[0.3, 0.7]).map_err(err)?;
    let worst = [li, lg, ls, lt, lf].iter().map(|v| v.abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("identity losses reach {worst:.3e}"))?;

    let (v, _) = competitive_scalars(&[1.0, 2.0], &[0.6, 0.4]).map_err(err)?;
    // Independent evaluation: factor out e^{-1} and sum the series for ln(1+u).
    let u = 0.4 / 0.6 * (-1.0f64).exp();
    let mut ln1p = 0.0;
    let mut term = u;
    for k in 1..200 {
        ln1p += if k % 2 == 1 { term / k as f64 } else { -term / k as f64 };
        term *= u;
    }
    let oracle = 1.0 - 0.6f64.ln() - ln1p;
    ensure((v - oracle).abs() < 1e-6, || format!("L_fusion {v} vs oracle {oracle}"))?;
    ensure((v * 1e4).round() / 1e4 == 1.2915, || format!("L_fusion {v} does not round to 1.2915"))?;
    Ok(format!(
        "all losses <= {worst:.1e} on identical images; L_fusion(P=(0.6,0.4), L=(1,2)) = {v:.10} (oracle {oracle:.10})"
    ))
}

// ---------------------------------------------------------------------------
// 6

fn gate_criterion() -> Result<(String, ParamStore, GateConfig), String> {
    let err = |e: moctefuse::Error| e.to_string();
    // Stage shapes at the native 480x640 resolution.
    let cfg = GateConfig {
        input_size: 0,
        ..GateConfig::full()
    };
    let params = init_gate_params(&cfg, SEED).map_err(err)?;
    let mut trace = ShapeTrace::new();
    gate_logits(&params.bind(false), &cfg, &Tensor::zeros(&[1, 3, 480, 640]), Some(&mut trace)).map_err(err)?;
    let want: Vec<(&str, Vec<usize>)> = vec![
        ("conv1", vec![64, 240, 320]),
        ("maxpool", vec![64, 120, 160]),
        ("conv2_x", vec![64, 120, 160]),
        ("conv3_x", vec![128, 60, 80]),
        ("conv4_x", vec![256, 30, 40]),
        ("conv5_x", vec![512, 15, 20]),
        ("output", vec![1, 1, 1]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    ensure(got == want, || format!("stage shapes {got:?}"))?;

    // Synthetic corpus: 200 bright + 200 dark for training, 50 + 50 held out.
    let start = Instant::now();
    let to_labelled = |v: Vec<moctefuse::synth::GateSample>| -> Vec<LabelledImage> {
        v.into_iter()
            .map(|s| LabelledImage {
                id: s.id,
                image: s.image,
                label: s.label,
            })
            .collect()
    };
    let train = to_labelled(gate_corpus(200, 200, 64, SEED));
    let held = to_labelled(gate_corpus(50, 50, 64, SEED + 1));
    let cfg = GateConfig::compact();
    let mut st = TrainState::fresh(init_gate_params(&cfg, SEED).map_err(err)?);
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 8,
        lr: 3e-3,
        min_lr: 1e-6,
        warmup_epochs: 1,
        seed: SEED,
        ..TrainConfig::default()
    };
    train_gate(&mut st, &cfg, &train, &tc, &mut |_| {}).map_err(err)?;
    let acc = gate_accuracy(&st.params, &cfg, &held).map_err(err)?;
    let elapsed = start.elapsed();
    let mean_ph = |label: moctefuse::data::Illumination| -> Result<f64, String> {
        let v: Vec<f64> = held
            .iter()
            .filter(|s| s.label == label)
            .map(|s| gate_forward(&st.params, &cfg, &s.image).map(|g| g.p_h))
            .collect::<moctefuse::Result<_>>()
            .map_err(err)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let gap = mean_ph(moctefuse::data::Illumination::High)? - mean_ph(moctefuse::data::Illumination::Low)?;
    ensure(acc >= 0.95, || format!("held-out accuracy {acc}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("gate training took {elapsed:?}"))?;
    Ok((
        format!(
            "480x640 stage shapes 240x320 -> 120x160 -> 60x80 -> 30x40 -> 15x20 -> 1x1; held-out accuracy {acc:.3} after 10 epochs in {:.1}s; mean P_H gap {gap:.3}",
            elapsed.as_secs_f64()
        ),
        st.params,
        cfg,
    ))
}

// ---------------------------------------------------------------------------
// 7

fn training(gate_params: &ParamStore, gate_cfg: &GateConfig) -> Outcome {
    let err = |e: moctefuse::Error| e.to_string();
    let cfg = FusionConfig::default();
    let pairs = fusion_pairs(4, 32, SEED).map_err(err)?;
    let gate = GateRef {
        params: gate_params,
        cfg: gate_cfg,
    };
    let gate_before = gate_params.clone();
    let probs: Vec<GateProbs> = pairs
        .iter()
        .map(|p| gate_forward(gate_params, gate_cfg, &p.vi))
        .collect::<moctefuse::Result<_>>()
        .map_err(err)?;
    let items: Vec<(ImagePair, GateProbs)> = pairs.iter().cloned().zip(probs).collect();
    let w = LossWeights::default();
    let init = init_fusion_params(&cfg, SEED).map_err(err)?;
    let l0 = fusion_loss(&init, &cfg, &items, &w).map_err(err)?;

    let start = Instant::now();
    let tc = TrainConfig {
        epochs: 300,
        batch_size: 4,
        lr: OVERFIT_LR,
        min_lr: 1e-6,
        warmup_epochs: 10,
        seed: SEED,
        crop_size: 32,
        ..TrainConfig::default()
    };
    let mut st = TrainState::fresh(init);
    train_fuse(&mut st, &cfg, &gate, &pairs, &tc, FuseOptions::default(), &mut |_| {}).map_err(err)?;
    let l1 = fusion_loss(&st.params, &cfg, &items, &w).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(st.step == 300, || format!("ran {} steps", st.step))?;
    ensure(*gate_params == gate_before, || "gate parameters changed".into())?;
    ensure(l1 < 0.5 * l0, || format!("L_fusion {l0:.4} -> {l1:.4} (ratio {:.3})", l1 / l0))?;

    // Byte-for-byte reproducibility, including across the sequential path.
    let short = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        ..tc.clone()
    };
    let run = |sequential: bool| -> Result<Vec<u8>, String> {
        par::set_sequential(sequential);
        let mut s = TrainState::fresh(init_fusion_params(&cfg, SEED).map_err(err)?);
        let r = train_fuse(&mut s, &cfg, &gate, &pairs, &short, FuseOptions::default(), &mut |_| {});
        par::set_sequential(false);
        r.map_err(err)?;
        let mut ck = Checkpoint::new(ModelKind::Fusion, &cfg, s.params).map_err(err)?;
        ck.step = s.step;
        ck.epoch = s.epoch;
        ck.optimizer = Some(s.adam);
        ck.to_bytes().map_err(err)
    };
    let (a, b, c) = (run(false)?, run(false)?, run(true)?);
    ensure(a == b && a == c, || "checkpoints differ between identical runs".into())?;
    Ok(format!(
        "L_fusion {l0:.4} -> {l1:.4} (ratio {:.3} < 0.5) in 300 steps, {:.0}s; gate bit-identical; {}-byte checkpoints identical across 3 runs",
        l1 / l0,
        elapsed.as_secs_f64(),
        a.len()
    ))
}

// ---------------------------------------------------------------------------
// 8

fn entropy_oracle(img: &Image) -> f64 {
    let mut counts: HashMap<u8, usize> = HashMap::new();
    for &v in &img.data {
        *counts.entry(quantize(v)).or_default() += 1;
    }
    let n = img.data.len() as f64;
    let mut levels: Vec<_> = counts.into_iter().collect();
    levels.sort();
    levels.iter().map(|&(_, c)| -(c as f64 / n) * (c as f64 / n).log2()).sum()
}

fn sd_oracle(img: &Image) -> f64 {
    let n = img.data.len() as f64;
    let mut mean = 0.0;
    for &v in &img.data {
        mean += quantize(v) as f64;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in &img.data {
        var += (quantize(v) as f64 - mean).powi(2);
    }
    (var / n).sqrt()
}

fn mi_pair_oracle(a: &Image, b: &Image) -> f64 {
    let n = a.data.len() as f64;
    let mut joint: HashMap<(u8, u8), usize> = HashMap::new();
    let mut pa = [0usize; 256];
    let mut pb = [0usize; 256];
    for (x, y) in a.data.iter().zip(&b.data) {
        let (qx, qy) = (quantize(*x), quantize(*y));
        *joint.entry((qx, qy)).or_default() += 1;
        pa[qx as usize] += 1;
        pb[qy as usize] += 1;
    }
    // Σ p(x,y) log2(p(x,y) / (p(x) p(y)))
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy / (pa[x as usize] as f64 / n * pb[y as usize] as f64 / n)).log2()
        })
        .sum()
}

fn vif_oracle(reference: &Image, dist: &Image) -> f64 {
    let (h0, w0) = (reference.height, reference.width);
    let mut r: Vec<Vec<f64>> = (0..h0).map(|y| (0..w0).map(|x| quantize(reference.data[y * w0 + x]) as f64).collect()).collect();
    let mut d: Vec<Vec<f64>> = (0..h0).map(|y| (0..w0).map(|x| quantize(dist.data[y * w0 + x]) as f64).collect()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = 2usize.pow(4 - scale + 1) + 1;
        let sigma = n as f64 / 5.0;
        let half = (n as f64 - 1.0) / 2.0;
        let mut k = vec![vec![0.0; n]; n];
        let mut z = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - half, j as f64 - half);
                *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                z += *v;
            }
        }
        for row in k.iter_mut() {
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let filt = |img: &Vec<Vec<f64>>, f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
            let (h, w) = (img.len(), img[0].len());
            (0..h + 1 - n)
                .map(|y| {
                    (0..w + 1 - n)
                        .map(|x| {
                            let mut acc = 0.0;
                            for i in 0..n {
                                for j in 0..n {
                                    acc += k[i][j] * f(y + i, x + j);
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        if scale > 1 {
            let rf = filt(&r, &|y, x| r[y][x]);
            let df = filt(&d, &|y, x| d[y][x]);
            r = rf.iter().step_by(2).map(|row| row.iter().step_by(2).cloned().collect()).collect();
            d = df.iter().step_by(2).map(|row| row.iter().step_by(2).cloned().collect()).collect();
        }
        let mu1 = filt(&r, &|y, x| r[y][x]);
        let mu2 = filt(&d, &|y, x| d[y][x]);
        let s11 = filt(&r, &|y, x| r[y][x] * r[y][x]);
        let s22 = filt(&d, &|y, x| d[y][x] * d[y][x]);
        let s12 = filt(&r, &|y, x| r[y][x] * d[y][x]);
        for y in 0..mu1.len() {
            for x in 0..mu1[0].len() {
                let (m1, m2) = (mu1[y][x], mu2[y][x]);
                let mut v1 = (s11[y][x] - m1 * m1).max(0.0);
                let v2 = (s22[y][x] - m2 * m2).max(0.0);
                let c12 = s12[y][x] - m1 * m2;
                let mut g = c12 / (v1 + 1e-10);
                let mut sv = v2 - g * c12;
                if v1 < 1e-10 {
                    g = 0.0;
                    sv = v2;
                    v1 = 0.0;
                }
                if v2 < 1e-10 {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = v2;
                    g = 0.0;
                }
                sv = sv.max(1e-10);
                num += (1.0 + g * g * v1 / (sv + 2.0)).log10();
                den += (1.0 + v1 / 2.0).log10();
            }
        }
    }
    num / den
}

fn metrics_criterion() -> Outcome {
    let err = |e: moctefuse::Error| e.to_string();
    let uniform = Image::from_fn(64, 64, |y, x| ((y * 64 + x) % 256) as f64 / 255.0);
    let en = entropy(&uniform).map_err(err)?;
    ensure(en == 8.0, || format!("EN of a uniform histogram = {en}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    let mut worst_mi_self = 0.0f64;
    let mut worst_vif_self = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..3 {
        let x = Image::gray(64, 64, rvec(&mut rng, 4096, 0.0, 1.0)).unwrap();
        let a = Image::gray(64, 64, rvec(&mut rng, 4096, 0.0, 1.0)).unwrap();
        // Smooth structure so VIF is far from degenerate.
        let b = Image::from_fn(64, 64, |y, xx| {
            (0.5 + 0.3 * ((y as f64) / 5.0).sin() * ((xx as f64) / 7.0).cos() + 0.1 * a.data[y * 64 + xx]).clamp(0.0, 1.0)
        });
        let mi_self = mutual_information(&x, &x, &x).map_err(err)?;
        worst_mi_self = worst_mi_self.max((mi_self - 2.0 * entropy(&x).map_err(err)?).abs());
        worst_vif_self = worst_vif_self.max((vif(&x, &x, &x).map_err(err)? - 1.0).abs());
        let pairs = [
            (entropy(&x).map_err(err)?, entropy_oracle(&x)),
            (std_dev(&x).map_err(err)?, sd_oracle(&x)),
            (
                mutual_information(&x, &a, &b).map_err(err)?,
                mi_pair_oracle(&x, &a) + mi_pair_oracle(&x, &b),
            ),
            (vif_pair(&b, &x).map_err(err)?, vif_oracle(&b, &x)),
            (vif_pair(&a, &b).map_err(err)?, vif_oracle(&a, &b)),
        ];
        for (got, want) in pairs {
            worst_oracle = worst_oracle.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    ensure(worst_mi_self < 1e-9, || format!("|MI(x,x,x) - 2 EN(x)| = {worst_mi_self:.3e}"))?;
    ensure(worst_vif_self < 1e-6, || format!("|VIF(x,x,x) - 1| = {worst_vif_self:.3e}"))?;
    ensure(worst_oracle < 1e-12, || format!("metric vs loop oracle deviates by {worst_oracle:.3e}"))?;
    Ok(format!(
        "EN(uniform) = 8.0 exactly; |MI(x,x,x)-2EN| {worst_mi_self:.1e}; |VIF(x,x,x)-1| {worst_vif_self:.1e}; oracles within {worst_oracle:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 9

fn tiny_fusion() -> FusionConfig {
    FusionConfig {
        channels: 4,
        depth: 2,
        window: 4,
        heads: 2,
        ffn_ratio: 2,
        encoder_rtb: 1,
        encoder_rdb: 1,
    }
}

fn mixture(bin: &Path, work: &Path) -> Outcome {
    let err = |e: moctefuse::Error| e.to_string();
    let cfg = tiny_fusion();
    let params = init_fusion_params(&cfg, SEED).map_err(err)?;
    let net = FusionNet::new(&cfg, params.bind(false));
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 9);
    let ir = rt(&mut rng, &[20, 24], 0.0, 1.0);
    let vi = rt(&mut rng, &[20, 24], 0.0, 1.0);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let g = GateProbs::new(rng.gen_range(0.0..1.0)).map_err(err)?;
        let o = moctefuse_forward(&net, &ir, &vi, g).map_err(err)?;
        for ((f, h), l) in o.i_f.data().iter().zip(o.i_f_hi.data()).zip(o.i_f_lo.data()) {
            worst = worst.max((f - (g.p_h * h + g.p_l * l)).abs());
        }
    }
    ensure(worst < 1e-12, || format!("mixture deviates by {worst:.3e}"))?;

    // CLI routing with --force-gate on a gray pair.
    let gcfg = GateConfig {
        widths: [4, 4, 8, 8],
        blocks: [1, 1, 1, 1],
        input_size: 32,
    };
    let gate_path = work.join("gate.ckpt");
    let model_path = work.join("model.ckpt");
    Checkpoint::new(ModelKind::Gate, &gcfg, init_gate_params(&gcfg, SEED).map_err(err)?)
        .and_then(|c| c.save(&gate_path))
        .map_err(err)?;
    Checkpoint::new(ModelKind::Fusion, &cfg, params.clone())
        .and_then(|c| c.save(&model_path))
        .map_err(err)?;
    let ir_img = Image::from_tensor_hw(&ir).map_err(err)?;
    let vi_img = Image::from_tensor_hw(&vi).map_err(err)?;
    let (ir_p, vi_p) = (work.join("pair_ir.png"), work.join("pair_vi.png"));
    save_image(&ir_img, &ir_p).map_err(err)?;
    save_image(&vi_img, &vi_p).map_err(err)?;
    // The CLI sees the 8-bit files, so the reference does too.
    let ir_q = load_image(&ir_p).map_err(err)?.to_tensor_hw().map_err(err)?;
    let vi_q = load_image(&vi_p).map_err(err)?.to_tensor_hw().map_err(err)?;
    let reference = moctefuse_forward(&net, &ir_q, &vi_q, GateProbs::new(0.5).map_err(err)?).map_err(err)?;
    for (flag, expert) in [("hi", &reference.i_f_hi), ("lo", &reference.i_f_lo)] {
        let out = work.join(format!("forced_{flag}"));
        let status = Command::new(bin)
            .args(["fuse", "--ir"])
            .arg(&ir_p)
            .arg("--vi")
            .arg(&vi_p)
            .arg("--gate")
            .arg(&gate_path)
            .arg("--model")
            .arg(&model_path)
            .arg("--out")
            .arg(&out)
            .args(["--force-gate", flag])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || format!("fuse --force-gate {flag} exited {:?}", status.status.code()))?;
        let stdout = String::from_utf8_lossy(&status.stdout);
        let want_ph = if flag == "hi" { "P_H=1.000000" } else { "P_H=0.000000" };
        ensure(stdout.contains(want_ph), || format!("fuse output `{stdout}` lacks {want_ph}"))?;
        let fused = load_image(&out.join("pair_vi_fused.png")).map_err(err)?;
        let expected: Vec<u8> = expert.data().iter().map(|v| quantize(v.clamp(0.0, 1.0))).collect();
        let got: Vec<u8> = fused.data.iter().map(|&v| quantize(v)).collect();
        ensure(got == expected, || format!("--force-gate {flag} output differs from the expert alone"))?;
    }
    Ok(format!(
        "10 random gates: |I_f - (P_H I_f^H + P_L I_f^L)| <= {worst:.1e}; --force-gate hi/lo reproduce each expert alone"
    ))
}

// ---------------------------------------------------------------------------
// 10

fn cli_smoke(bin: &Path, work: &Path) -> Outcome {
    let start = Instant::now();
    let data = work.join("synth");
    let step = |name: &str, args: &[&str]| -> Result<(), String> {
        let t = Instant::now();
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{name} exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        println!("      {name}: exit 0 in {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    };
    let p = |rel: &str| data.join(rel).to_string_lossy().into_owned();
    step("synth", &["synth", "--out", &p(""), "--pairs", "4", "--size", "32", "--gate-size", "64", "--seed", "7"])?;
    step(
        "train-gate",
        &[
            "train-gate", "--data", &p("gate/train"), "--heldout", &p("gate/heldout"), "--out", &p("gate.ckpt"),
            "--epochs", "10", "--lr", "3e-3", "--warmup-epochs", "1", "--set", "gate.widths=8,16,32,64",
            "--set", "gate.input_size=64",
        ],
    )?;
    step(
        "train-fuse",
        &[
            "train-fuse", "--data", &p("fusion"), "--gate", &p("gate.ckpt"), "--out", &p("fuse.ckpt"), "--epochs", "5",
            "--batch-size", "4", "--lr", "1e-3", "--warmup-epochs", "1", "--crop-size", "32",
        ],
    )?;
    step(
        "fuse",
        &[
            "fuse", "--ir", &p("fusion/ir"), "--vi", &p("fusion/vi"), "--gate", &p("gate.ckpt"), "--model",
            &p("fuse.ckpt"), "--out", &p("fused"),
        ],
    )?;
    step(
        "evaluate",
        &["evaluate", "--ir", &p("fusion/ir"), "--vi", &p("fusion/vi"), "--fused", &p("fused"), "--out", &p("report")],
    )?;
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(data.join("report.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let n = report["per_image"].as_array().map_or(0, |a| a.len());
    ensure(n == 4, || format!("report covers {n} images"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(900), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "synth -> train-gate -> train-fuse -> fuse -> evaluate all exit 0 in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(id: usize, title: &str, o: &Outcome) {
    match o {
        Ok(detail) => println!("PASS  criterion {id:>2} ({title}): {detail}"),
        Err(why) => println!("FAIL  criterion {id:>2} ({title}): {why}"),
    }
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored; a
    // `--list` request (used by some runners) reports the single target.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let bin = Path::new(env!("CARGO_BIN_EXE_moctefuse"));
    let work = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let mut results = Vec::new();
    let mut run = |id: usize, title: &str, o: Outcome| {
        report(id, title, &o);
        results.push(o.is_ok());
    };

    run(1, "gradient suite", guarded(gradient_suite));
    run(2, "competitive gradient identity", guarded(competitive_identity));
    run(3, "ACA oracle", guarded(aca_oracle));
    run(4, "chirality", guarded(chirality));
    run(5, "loss identities", guarded(loss_identities));
    let gate = guarded(|| gate_criterion().map(|(msg, p, c)| {
        GATE.with(|g| *g.borrow_mut() = Some((p, c)));
        msg
    }));
    run(6, "gate", gate);
    let trained = GATE.with(|g| g.borrow_mut().take());
    let seven = match trained {
        Some((p, c)) => guarded(|| training(&p, &c)),
        None => Err("needs the trained gate from criterion 6".into()),
    };
    run(7, "training", seven);
    run(8, "metrics", guarded(metrics_criterion));
    run(9, "mixture contract", guarded(|| mixture(bin, work.path())));
    run(10, "CLI smoke", guarded(|| cli_smoke(bin, work.path())));

    let passed = results.iter().filter(|&&r| r).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}

thread_local! {
    static GATE: std::cell::RefCell<Option<(ParamStore, GateConfig)>> = const { std::cell::RefCell::new(None) };
}
