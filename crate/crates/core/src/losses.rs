//! Training objectives: intensity, Sobel gradient and SSIM terms, their
//! weighted total, and the gate-weighted competitive mixture loss.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::rel_err;
use crate::tensor::{Conv2dOptions, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// SSIM weight against the infrared source; the visible one gets `1 - w1`.
    pub w1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            gamma: 10.0,
            w1: 0.5,
        }
    }
}

impl LossWeights {
    pub fn w2(&self) -> f64 {
        1.0 - self.w1
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.w1);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid loss weights {self:?}")))
        }
    }
}

fn check_triplet(op: &'static str, f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<()> {
    if f.ndim() != 2 {
        return Err(Error::contract(format!("{op} expects [H, W] images, got {:?}", f.shape())));
    }
    if f.shape() != ir.shape() {
        return Err(Error::dim(op, f.shape(), ir.shape()));
    }
    if f.shape() != vi.shape() {
        return Err(Error::dim(op, f.shape(), vi.shape()));
    }
    Ok(())
}

/// `‖f − ir‖₁/HW + ‖f − vi‖₁/HW`.
pub fn intensity_loss(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<Tensor> {
    check_triplet("intensity_loss", f, ir, vi)?;
    let a = f.sub(ir)?.abs().mean();
    let b = f.sub(vi)?.abs().mean();
    a.add(&b)
}

/// `|Sobel_x(x)| + |Sobel_y(x)|` with reflect padding, `[H, W] -> [H, W]`.
pub fn gradient_magnitude(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[0] < 3 || s[1] < 3 {
        return Err(Error::contract(format!("Sobel needs an [H, W] image of at least 3x3, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let k: Vec<f64> = SOBEL_X.iter().chain(SOBEL_Y.iter()).copied().collect();
    let kernel = Tensor::from_vec(&[2, 1, 3, 3], k)?;
    let padded = x.reshape(&[1, 1, h, w])?.pad_reflect2d(1, 1, 1, 1)?;
    let g = padded.conv2d(&kernel, None, Conv2dOptions::new(1, 0))?;
    g.abs().sum_axis(1)?.reshape(&[h, w])
}

/// `‖ |∇f| − max(|∇ir|, |∇vi|) ‖₁ / HW`.
pub fn gradient_loss(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<Tensor> {
    check_triplet("gradient_loss", f, ir, vi)?;
    let target = gradient_magnitude(ir)?.max_elementwise(&gradient_magnitude(vi)?)?;
    Ok(gradient_magnitude(f)?.sub(&target)?.abs().mean())
}

/// Normalized 11×11 Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b / (z * z));
        }
    }
    w
}

/// Mean SSIM over all valid window positions.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s != y.shape() {
        return Err(Error::dim("ssim", s, y.shape()));
    }
    if s.len() != 2 || s[0] < SSIM_WINDOW || s[1] < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs an [H, W] image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let win = Tensor::from_vec(
        &[1, 1, SSIM_WINDOW, SSIM_WINDOW],
        gaussian_window(SSIM_WINDOW, SSIM_SIGMA),
    )?;
    let stack = Tensor::concat(&[x, y, &x.square(), &y.square(), &x.mul(y)?], 0)?.reshape(&[5, 1, h, w])?;
    let m = stack.conv2d(&win, None, Conv2dOptions::new(1, 0))?;
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let m = m.reshape(&[5, ho, wo])?;
    let part = |i: usize| -> Result<Tensor> { m.narrow(0, i, 1)?.reshape(&[ho, wo]) };
    let (mx, my, exx, eyy, exy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mxy = mx.mul(&my)?;
    let (mx2, my2) = (mx.square(), my.square());
    let vx = exx.sub(&mx2)?;
    let vy = eyy.sub(&my2)?;
    let cxy = exy.sub(&mxy)?;
    let num = mxy.scale(2.0).add_scalar(SSIM_C1).mul(&cxy.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mx2.add(&my2)?.add_scalar(SSIM_C1).mul(&vx.add(&vy)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?.mean())
}

/// `w1·(1 − ssim(f, ir)) + w2·(1 − ssim(f, vi))`.
pub fn ssim_loss(f: &Tensor, ir: &Tensor, vi: &Tensor, w: &LossWeights) -> Result<Tensor> {
    check_triplet("ssim_loss", f, ir, vi)?;
    let a = ssim(f, ir)?.neg().add_scalar(1.0).scale(w.w1);
    let b = ssim(f, vi)?.neg().add_scalar(1.0).scale(w.w2());
    a.add(&b)
}

/// A weighted total together with the values of its components.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub l_int: f64,
    pub l_grad: f64,
    pub l_ssim: f64,
}

/// `α·L_int + β·L_grad + γ·L_ssim`.
pub fn total_loss(f: &Tensor, ir: &Tensor, vi: &Tensor, w: &LossWeights) -> Result<TotalLoss> {
    let li = intensity_loss(f, ir, vi)?;
    let lg = gradient_loss(f, ir, vi)?;
    let ls = ssim_loss(f, ir, vi, w)?;
    let total = li.scale(w.alpha).add(&lg.scale(w.beta))?.add(&ls.scale(w.gamma))?;
    Ok(TotalLoss {
        l_int: li.item(),
        l_grad: lg.item(),
        l_ssim: ls.item(),
        total,
    })
}

/// Mixture weights `ω_i = P_i e^{−L_i} / Σ_j P_j e^{−L_j}` and the loss
/// `−ln Σ_i P_i e^{−L_i}`, both in log space.
pub fn competitive_scalars(losses: &[f64], gate: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_gate(losses.len(), gate)?;
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::contract(format!("expert {i} loss is not finite")));
    }
    let a: Vec<Option<f64>> = gate
        .iter()
        .zip(losses)
        .map(|(&p, &l)| (p > 0.0).then(|| p.ln() - l))
        .collect();
    let m = a.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = a.iter().flatten().map(|v| (v - m).exp()).sum();
    let omega = a.iter().map(|v| v.map_or(0.0, |v| (v - m).exp() / z)).collect();
    Ok((-(m + z.ln()), omega))
}

fn check_gate(n: usize, gate: &[f64]) -> Result<()> {
    if gate.len() != n || n == 0 {
        return Err(Error::contract(format!("{} gate probabilities for {n} experts", gate.len())));
    }
    if gate.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::contract(format!("gate probabilities {gate:?} outside [0, 1]")));
    }
    let s: f64 = gate.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("gate probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// Differentiable competitive loss over scalar expert losses. The gate is a
/// constant here; experts with `P_i = 0` are left out of the graph, so they
/// receive an exactly-zero gradient.
pub fn competitive_loss(losses: &[Tensor], gate: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    if let Some(l) = losses.iter().find(|l| l.numel() != 1) {
        return Err(Error::contract(format!("expert loss must be scalar, got {:?}", l.shape())));
    }
    let values: Vec<f64> = losses.iter().map(Tensor::item).collect();
    let (_, omega) = competitive_scalars(&values, gate)?;
    let m = gate
        .iter()
        .zip(&values)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p.ln() - l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc: Option<Tensor> = None;
    for (l, &p) in losses.iter().zip(gate) {
        if p <= 0.0 {
            continue;
        }
        let e = l.reshape(&[])?.neg().add_scalar(p.ln() - m).exp();
        acc = Some(match acc {
            None => e,
            Some(a) => a.add(&e)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::contract("no expert has positive gate probability"))?;
    Ok((sum.ln().add_scalar(m).neg(), omega))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompetitiveReport {
    pub omega: Vec<f64>,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Checks that the autodiff gradient of the competitive loss with respect to
/// every expert output equals `ω_i · ∂L(o_i)/∂o_i`.
pub fn verify_competitive_gradient<F>(outputs: &[Vec<f64>], shape: &[usize], loss: F, gate: &[f64], tol: f64) -> Result<CompetitiveReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    // Joint graph through the mixture.
    let leaves: Vec<Tensor> = outputs
        .iter()
        .map(|o| Tensor::param(shape, o.clone()))
        .collect::<Result<_>>()?;
    let per: Vec<Tensor> = leaves.iter().map(&loss).collect::<Result<_>>()?;
    let (l, omega) = competitive_loss(&per, gate)?;
    l.backward()?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, o) in outputs.iter().enumerate() {
        let joint = leaves[i].grad_vec().unwrap_or_else(|| vec![0.0; o.len()]);
        // Expert-local derivative L'(o_i) on a fresh graph.
        let solo = Tensor::param(shape, o.clone())?;
        loss(&solo)?.backward()?;
        let local = solo.grad_vec().unwrap_or_else(|| vec![0.0; o.len()]);
        for (k, (g, d)) in joint.iter().zip(&local).enumerate() {
            let want = omega[i] * d;
            let e = rel_err(*g, want, f64::MIN_POSITIVE);
            if omega[i] == 0.0 && *g != 0.0 || e > tol {
                return Err(Error::Verification {
                    what: format!("competitive gradient of expert {i}"),
                    index: k,
                    deviation: e,
                    tolerance: tol,
                });
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(CompetitiveReport {
        omega,
        max_rel_err: worst,
        checked,
    })
}

/// Per-expert loss breakdown and the mixture quantities of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossTerms {
    pub l_int: Vec<f64>,
    pub l_grad: Vec<f64>,
    pub l_ssim: Vec<f64>,
    pub l_total: Vec<f64>,
    pub omega: Vec<f64>,
    pub l_fusion: f64,
    pub p_h: f64,
}

impl LossTerms {
    pub const CSV_HEADER: [&'static str; 13] = [
        "step", "l_int_hi", "l_grad_hi", "l_ssim_hi", "l_int_lo", "l_grad_lo", "l_ssim_lo", "l_total_hi",
        "l_total_lo", "omega_1", "omega_2", "l_fusion", "p_h",
    ];

    /// Averages a batch of two-expert terms.
    pub fn mean(items: &[LossTerms]) -> Result<LossTerms> {
        let n = items.len();
        if n == 0 {
            return Err(Error::contract("mean of an empty batch"));
        }
        let avg = |f: &dyn Fn(&LossTerms) -> &Vec<f64>| -> Vec<f64> {
            let k = f(&items[0]).len();
            (0..k).map(|i| items.iter().map(|t| f(t)[i]).sum::<f64>() / n as f64).collect()
        };
        Ok(LossTerms {
            l_int: avg(&|t| &t.l_int),
            l_grad: avg(&|t| &t.l_grad),
            l_ssim: avg(&|t| &t.l_ssim),
            l_total: avg(&|t| &t.l_total),
            omega: avg(&|t| &t.omega),
            l_fusion: items.iter().map(|t| t.l_fusion).sum::<f64>() / n as f64,
            p_h: items.iter().map(|t| t.p_h).sum::<f64>() / n as f64,
        })
    }

    /// One CSV row in `CSV_HEADER` order.
    pub fn csv_record(&self, step: usize) -> Vec<String> {
        let mut r = vec![step.to_string()];
        for e in 0..2 {
            r.push(self.l_int[e].to_string());
            r.push(self.l_grad[e].to_string());
            r.push(self.l_ssim[e].to_string());
        }
        r.extend(self.l_total.iter().map(f64::to_string));
        r.extend(self.omega.iter().map(f64::to_string));
        r.push(self.l_fusion.to_string());
        r.push(self.p_h.to_string());
        r
    }
}
