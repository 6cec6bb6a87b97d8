//! Two-stage training: the illumination gate on labelled visible images,
//! then the fusion network against the frozen gate.
//!
//! Every sample of a batch builds its own graph (possibly on its own thread)
//! and returns plain gradient buffers, which are summed in sample order.
//! Results therefore do not depend on the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{train_crop, CropMode, Illumination, Image, ImagePair};
use crate::error::{Error, Result};
use crate::fusion::{moctefuse_forward, FusionConfig, FusionNet};
use crate::gate::{bce_loss, gate_forward, gate_input, gate_logits, GateConfig, GateProbs};
use crate::losses::{competitive_loss, total_loss, LossTerms, LossWeights};
use crate::optim::{Adam, AdamState, Schedule};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub crop_mode: CropModeName,
}

/// Serializable name of a [`CropMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CropModeName {
    #[default]
    Random,
    Resize,
}

impl From<CropModeName> for CropMode {
    fn from(c: CropModeName) -> Self {
        match c {
            CropModeName::Random => CropMode::RandomCrop,
            CropModeName::Resize => CropMode::Resize,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 3,
            seed: 0,
            crop_size: 128,
            crop_mode: CropModeName::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::contract(format!("invalid training config {self:?}")));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::contract(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n: usize) -> Schedule {
        let spe = self.steps_per_epoch(n);
        Schedule {
            base_lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_epochs * spe,
            total_steps: self.epochs * spe,
        }
    }
}

/// Parameters with their optimizer state and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: u64,
}

impl TrainState {
    pub fn fresh(params: ParamStore) -> Self {
        Self {
            adam: AdamState::for_params(&params),
            params,
            step: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
    pub lr: f64,
    pub elapsed_secs: f64,
    /// Training accuracy (gate only).
    pub accuracy: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch);
    r
}

/// Adds `src` into `dst` elementwise.
fn accumulate(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

fn average(samples: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let n = samples.len() as f64;
    let mut it = samples.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for s in it {
        accumulate(&mut acc, &s);
    }
    for v in acc.iter_mut().flatten() {
        *v /= n;
    }
    acc
}

fn apply(state: &mut TrainState, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    Adam::default()
        .step(&mut state.params, &mut state.adam, grads, lr)
        .map_err(|e| match e {
            Error::NonFiniteGradient { param } => Error::NumericalAbort {
                step: state.step as usize + 1,
                reason: format!("non-finite gradient for `{param}`"),
            },
            other => other,
        })?;
    state.step += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// gate

/// A visible image with its day/night label.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub id: String,
    pub image: Image,
    pub label: Illumination,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GateReport {
    pub epochs: Vec<EpochSummary>,
}

fn gate_sample(params: &ParamStore, cfg: &GateConfig, x: &Tensor, y: f64) -> Result<(Vec<Vec<f64>>, f64, bool)> {
    let b = params.bind(true);
    let z = gate_logits(&b, cfg, x, None)?;
    let loss = bce_loss(&z, y)?;
    loss.backward()?;
    let correct = (z.item() > 0.0) == (y > 0.5);
    Ok((b.grads(), loss.item(), correct))
}

/// Binary cross-entropy training of the gate, resuming from `state.epoch`.
pub fn train_gate(
    state: &mut TrainState,
    cfg: &GateConfig,
    data: &[LabelledImage],
    tc: &TrainConfig,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<GateReport> {
    tc.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("gate training set is empty"));
    }
    let highs = data.iter().filter(|d| d.label == Illumination::High).count();
    if highs == 0 || highs == data.len() {
        log::warn!("gate training data holds a single class; the gate will be degenerate");
    }
    let inputs: Vec<(Tensor, f64)> = data
        .iter()
        .map(|d| Ok((gate_input(&d.image, cfg)?, d.label.target())))
        .collect::<Result<_>>()?;
    // Tensors are not shareable across threads; keep the raw buffers.
    let raw: Vec<(Vec<usize>, Vec<f64>, f64)> =
        inputs.iter().map(|(t, y)| (t.shape().to_vec(), t.to_vec(), *y)).collect();
    let sched = tc.schedule(data.len());
    sched.validate()?;
    let mut report = GateReport::default();
    let start = Instant::now();
    while (state.epoch as usize) < tc.epochs {
        let mut rng = epoch_rng(tc.seed, state.epoch);
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(tc.batch_size) {
            let items: Vec<&(Vec<usize>, Vec<f64>, f64)> = batch.iter().map(|&i| &raw[i]).collect();
            let params = &state.params;
            let results = par::map_items(&items, |(shape, x, y)| {
                let x = Tensor::from_vec(shape, x.clone())?;
                gate_sample(params, cfg, &x, *y)
            });
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (g, l, ok) = r?;
                if !l.is_finite() {
                    return Err(Error::NumericalAbort {
                        step: state.step as usize + 1,
                        reason: "gate loss is not finite".into(),
                    });
                }
                loss_sum += l;
                correct += ok as usize;
                grads.push(g);
            }
            lr = sched.lr_at(state.step as usize + 1);
            apply(state, &average(grads), lr)?;
        }
        state.epoch += 1;
        let summary = EpochSummary {
            epoch: state.epoch,
            mean_loss: loss_sum / raw.len() as f64,
            lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
            accuracy: Some(correct as f64 / raw.len() as f64),
        };
        progress(&summary);
        report.epochs.push(summary);
    }
    Ok(report)
}

/// Fraction of images the gate assigns to their labelled class.
pub fn gate_accuracy(params: &ParamStore, cfg: &GateConfig, data: &[LabelledImage]) -> Result<f64> {
    let hits = par::map_items(data, |d| {
        gate_forward(params, cfg, &d.image).map(|g| (g.p_h > 0.5) == (d.label == Illumination::High))
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// fusion

/// Frozen gate used during fusion training and inference.
pub struct GateRef<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a GateConfig,
}

pub struct FuseOptions<'a> {
    /// Overrides the gate with `P_H = 1` (`true`) or `P_H = 0` (`false`).
    pub force_gate: Option<bool>,
    pub weights: LossWeights,
    pub on_step: Option<&'a mut dyn FnMut(u64, &LossTerms)>,
    /// Return once this many epochs are complete; the schedule still spans
    /// the full configured run.
    pub stop_after: Option<u64>,
}

impl Default for FuseOptions<'_> {
    fn default() -> Self {
        Self {
            force_gate: None,
            weights: LossWeights::default(),
            on_step: None,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FuseReport {
    pub epochs: Vec<EpochSummary>,
    /// Batch-mean `L_fusion` per step.
    pub losses: Vec<f64>,
}

/// Gate probabilities for a visible image, or the forced routing.
pub fn gate_probs(gate: &GateRef<'_>, vi: &Image, force: Option<bool>) -> Result<GateProbs> {
    match force {
        Some(h) => Ok(GateProbs::forced(h)),
        None => gate_forward(gate.params, gate.cfg, vi),
    }
}

/// Forward, losses and backward for one pair; returns gradients in manifest
/// order and the loss breakdown.
pub fn fuse_sample(
    params: &ParamStore,
    cfg: &FusionConfig,
    pair: &ImagePair,
    gate: GateProbs,
    w: &LossWeights,
) -> Result<(Vec<Vec<f64>>, LossTerms)> {
    let net = FusionNet::new(cfg, params.bind(true));
    let ir = pair.ir.to_tensor_hw()?;
    let vi = pair.vi_luma.to_tensor_hw()?;
    let out = moctefuse_forward(&net, &ir, &vi, gate)?;
    let hi = total_loss(&out.i_f_hi, &ir, &vi, w)?;
    let lo = total_loss(&out.i_f_lo, &ir, &vi, w)?;
    let (lf, omega) = competitive_loss(&[hi.total.clone(), lo.total.clone()], &gate.as_array())?;
    lf.backward()?;
    let terms = LossTerms {
        l_int: vec![hi.l_int, lo.l_int],
        l_grad: vec![hi.l_grad, lo.l_grad],
        l_ssim: vec![hi.l_ssim, lo.l_ssim],
        l_total: vec![hi.total.item(), lo.total.item()],
        omega,
        l_fusion: lf.item(),
        p_h: gate.p_h,
    };
    Ok((net.params.grads(), terms))
}

/// Trains the fusion network against a frozen gate, resuming from
/// `state.epoch`. On a numerical abort `state` holds the last good
/// parameters.
pub fn train_fuse(
    state: &mut TrainState,
    cfg: &FusionConfig,
    gate: &GateRef<'_>,
    data: &[ImagePair],
    tc: &TrainConfig,
    mut opts: FuseOptions<'_>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<FuseReport> {
    tc.validate()?;
    cfg.validate()?;
    opts.weights.validate()?;
    if data.is_empty() {
        return Err(Error::contract("fusion training set is empty"));
    }
    let sched = tc.schedule(data.len());
    sched.validate()?;
    let mode: CropMode = tc.crop_mode.into();
    let mut report = FuseReport::default();
    let start = Instant::now();
    let last = opts.stop_after.map_or(tc.epochs as u64, |e| e.min(tc.epochs as u64));
    while state.epoch < last {
        let mut rng = epoch_rng(tc.seed, state.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in order.chunks(tc.batch_size) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let crop = train_crop(&data[i], tc.crop_size, mode, &mut rng)?;
                let g = gate_probs(gate, &crop.vi, opts.force_gate)?;
                items.push((crop, g));
            }
            let params = &state.params;
            let w = opts.weights;
            let results = par::map_items(&items, |(pair, g)| fuse_sample(params, cfg, pair, *g, &w));
            let mut grads = Vec::with_capacity(results.len());
            let mut terms = Vec::with_capacity(results.len());
            for r in results {
                let (g, t) = r?;
                grads.push(g);
                terms.push(t);
            }
            let mean = LossTerms::mean(&terms)?;
            if !mean.l_fusion.is_finite() {
                return Err(Error::NumericalAbort {
                    step: state.step as usize + 1,
                    reason: "fusion loss is not finite".into(),
                });
            }
            lr = sched.lr_at(state.step as usize + 1);
            apply(state, &average(grads), lr)?;
            if let Some(cb) = opts.on_step.as_mut() {
                cb(state.step, &mean);
            }
            loss_sum += mean.l_fusion * batch.len() as f64;
            report.losses.push(mean.l_fusion);
        }
        state.epoch += 1;
        let summary = EpochSummary {
            epoch: state.epoch,
            mean_loss: loss_sum / data.len() as f64,
            lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
            accuracy: None,
        };
        progress(&summary);
        report.epochs.push(summary);
    }
    Ok(report)
}

/// Batch-mean `L_fusion` of the current parameters on fixed inputs, without
/// an update.
pub fn fusion_loss(
    params: &ParamStore,
    cfg: &FusionConfig,
    items: &[(ImagePair, GateProbs)],
    w: &LossWeights,
) -> Result<f64> {
    let vals = par::map_items(items, |(pair, g)| -> Result<f64> {
        let net = FusionNet::new(cfg, params.bind(false));
        let ir = pair.ir.to_tensor_hw()?;
        let vi = pair.vi_luma.to_tensor_hw()?;
        let out = moctefuse_forward(&net, &ir, &vi, *g)?;
        let hi = total_loss(&out.i_f_hi, &ir, &vi, w)?.total;
        let lo = total_loss(&out.i_f_lo, &ir, &vi, w)?.total;
        Ok(competitive_loss(&[hi, lo], &g.as_array())?.0.item())
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}
