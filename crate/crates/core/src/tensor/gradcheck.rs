//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Half-width of the central difference.
    pub step: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
    /// so entries far below the floor are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Compares the autodiff gradient of the scalar `f(inputs)` against central
/// differences. `f` is re-evaluated on constant tensors for every perturbed
/// coordinate, possibly on several threads.
pub fn gradcheck<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor> + Sync,
{
    let leaves = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::contract("gradcheck needs a scalar function"));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad_vec().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, d))| (0..d.len()).map(move |j| (i, j)))
        .collect();
    if let Some(k) = opts.max_coords {
        if k < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), k).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|p| coords[p]).collect();
        }
    }

    let eval = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(k, (s, d))| {
                let mut d = d.clone();
                if k == i {
                    d[j] += delta;
                }
                Tensor::from_vec(s, d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&ts)?.item())
    };
    let h = opts.step;
    let numeric = par::map_range(coords.len(), usize::MAX, |c| {
        let (i, j) = coords[c];
        Ok::<f64, Error>((eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h))
    });

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: coords.len(),
    };
    for (&(i, j), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[i][j];
        if !a.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: format!("input {i}[{j}]"),
            });
        }
        let r = rel_err(a, n, opts.floor);
        report.max_abs_err = report.max_abs_err.max((a - n).abs());
        if r > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(r);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
