use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{matching_loss_on, similarity_loss_on, total_loss, LossReport, DEFAULT_ALPHA};
use super::{grad_check_report, Adam, GradCheckReport, Tape, TrainError, Var};
use crate::encoder::{EncoderConfig, EncoderWeights, PreparedFragment};
use crate::matcher::{forward_on, MatcherWeights};
use crate::model::Model;
use crate::scenegraph::ScenePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Factor applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub alpha: f64,
    /// Unrolled Sinkhorn passes on the differentiable path.
    pub sinkhorn_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_every: 4,
            batch_size: 1,
            alpha: DEFAULT_ALPHA,
            sinkhorn_iters: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be positive");
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.sinkhorn_iters == 0 {
            return bad("decay_every, batch_size and sinkhorn_iters must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One row of the loss curve: sample means over an epoch, before each
/// batch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_s: f64,
    pub l_k: f64,
    pub l: f64,
}

/// Optimizer progress, enough to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: Adam,
    pub curve: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            epochs_done: 0,
            adam: Adam::new(&model.shapes()),
            curve: Vec::new(),
        }
    }
}

/// A scene pair with its descriptors and fusion graphs precomputed.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub src: PreparedFragment,
    pub reference: PreparedFragment,
    pub gt: Vec<(usize, usize)>,
}

impl TrainingSample {
    pub fn new(pair: &ScenePair, cfg: &EncoderConfig) -> Result<Self, TrainError> {
        pair.validate().map_err(crate::matcher::MatcherError::from)?;
        Ok(Self {
            src: PreparedFragment::new(&pair.src, cfg).map_err(crate::matcher::MatcherError::from)?,
            reference: PreparedFragment::new(&pair.reference, cfg).map_err(crate::matcher::MatcherError::from)?,
            gt: pair.gt_alignment.clone(),
        })
    }
}

pub fn prepare_dataset(pairs: &[ScenePair], cfg: &EncoderConfig) -> Result<Vec<TrainingSample>, TrainError> {
    pairs.par_iter().map(|p| TrainingSample::new(p, cfg)).collect()
}

/// Recorded `L_s + α·L_k` of one sample, with the values of `L_s` and
/// `L_k`. Pairs without ground-truth matches contribute only the similarity
/// term.
fn sample_loss_on<'t>(
    tape: &'t Tape,
    model: &Model,
    enc: &EncoderWeights<Var<'t>>,
    mw: &MatcherWeights<Var<'t>>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
) -> Result<(Var<'t>, f64, f64), TrainError> {
    let (soft, k_tilde) = forward_on(
        tape,
        &sample.src,
        &sample.reference,
        enc,
        mw,
        &model.encoder_config,
        &model.matcher_config,
        cfg.sinkhorn_iters,
    )?;
    let l_k = similarity_loss_on(&k_tilde, sample.gt.len(), sample.src.len(), sample.reference.len());
    if sample.gt.is_empty() {
        return Ok((l_k.scale(cfg.alpha), 0.0, l_k.scalar()));
    }
    let l_s = matching_loss_on(&soft, &sample.gt)?;
    Ok((l_s.add(&l_k.scale(cfg.alpha)), l_s.scalar(), l_k.scalar()))
}

/// `(L_s, L_k)` of one sample and the gradient of `L_s + α·L_k`.
pub fn sample_gradient(
    model: &Model,
    sample: &TrainingSample,
    cfg: &TrainConfig,
) -> Result<(f64, f64, Vec<DMatrix<f64>>), TrainError> {
    let tape = Tape::new();
    let enc = model.encoder.map("", &mut |_, m| tape.param(m.clone()));
    let mw = model.matcher.map("", &mut |_, m| tape.param(m.clone()));
    let (loss, l_s, l_k) = sample_loss_on(&tape, model, &enc, &mw, sample, cfg)?;
    let grads = tape.backward(&loss);
    let g = enc.flatten().iter().chain(mw.flatten().iter()).map(|v| grads.wrt(v)).collect();
    Ok((l_s, l_k, g))
}

/// Tape gradient of one sample's loss against central finite differences,
/// probing up to `max_coords` entries of every parameter tensor.
pub fn loss_grad_check(
    model: &Model,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    sample_gradient(model, sample, cfg)?;
    let report = grad_check_report(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let enc = model.encoder.map("", &mut |_, _| it.next().expect("one var per tensor"));
            let mw = model.matcher.map("", &mut |_, _| it.next().expect("one var per tensor"));
            sample_loss_on(tape, model, &enc, &mw, sample, cfg).expect("checked above").0
        },
        &model.tensors(),
        step,
        max_coords,
        seed,
    );
    Ok(report)
}

/// Batch losses and the batch-mean gradient.
pub fn batch_gradient(
    model: &Model,
    batch: &[&TrainingSample],
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<DMatrix<f64>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let results: Vec<_> = batch
        .par_iter()
        .map(|s| sample_gradient(model, s, cfg))
        .collect::<Result<_, _>>()?;
    let losses: Vec<(f64, f64)> = results.iter().map(|r| (r.0, r.1)).collect();
    let mut grad: Vec<DMatrix<f64>> = model.shapes().iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect();
    for (_, _, g) in &results {
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total_loss(&losses, cfg.alpha)?, grad))
}

/// Mean losses of `model` over a dataset, without updating anything.
pub fn dataset_loss(model: &Model, data: &[TrainingSample], cfg: &TrainConfig) -> Result<LossReport, TrainError> {
    let losses: Vec<(f64, f64)> = data
        .par_iter()
        .map(|s| sample_gradient(model, s, cfg).map(|r| (r.0, r.1)))
        .collect::<Result<_, _>>()?;
    total_loss(&losses, cfg.alpha)
}

/// Runs the next epoch and appends it to the loss curve.
pub fn train_epoch(
    model: &mut Model,
    state: &mut TrainState,
    data: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<EpochLoss, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let epoch = state.epochs_done;
    let lr = cfg.learning_rate(epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64)));
    let mut params = model.tensors();
    let (mut sum_s, mut sum_k, mut sum_l) = (0.0, 0.0, 0.0);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &data[i]).collect();
        let (report, grad) = batch_gradient(model, &batch, cfg)?;
        let finite = report.l.is_finite() && grad.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(TrainError::DivergenceDetected { epoch });
        }
        let n = chunk.len() as f64;
        sum_s += report.l_s * n;
        sum_k += report.l_k * n;
        sum_l += report.l * n;
        state.adam.update(&mut params, &grad, lr);
        if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::DivergenceDetected { epoch });
        }
        *model = model.with_tensors(params.clone());
    }
    let n = data.len() as f64;
    let row = EpochLoss {
        epoch,
        l_s: sum_s / n,
        l_k: sum_k / n,
        l: sum_l / n,
    };
    state.epochs_done += 1;
    state.curve.push(row);
    Ok(row)
}

/// Trains `model` on `pairs` for the configured number of epochs.
pub fn train(pairs: &[ScenePair], model: Model, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLoss>), TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let data = prepare_dataset(pairs, &model.encoder_config)?;
    let mut state = TrainState::new(&model);
    let mut model = model;
    while state.epochs_done < cfg.epochs {
        train_epoch(&mut model, &mut state, &data, cfg)?;
    }
    Ok((model, state.curve))
}

/// Writes the loss curve as `epoch,L_s,L_k,L`.
pub fn write_loss_curve(curve: &[EpochLoss], path: &std::path::Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| TrainError::Io(e.to_string());
    w.write_record(["epoch", "L_s", "L_k", "L"]).map_err(io)?;
    for r in curve {
        w.serialize((r.epoch, r.l_s, r.l_k, r.l)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Io(e.to_string()))?;
    crate::scenegraph::io::write_atomic(path, &bytes).map_err(|e| TrainError::Io(e.to_string()))
}
