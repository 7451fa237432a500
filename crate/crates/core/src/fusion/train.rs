use super::loss::LossBreakdown;
use super::model::{batch_loss, predict_samples, DynamicLossModel, FusionConfig, FusionModel};
use super::samples::SampleSet;
use crate::error::{Error, Result};
use crate::graphspec::GraphSpec;
use crate::numcore::{AdamState, SeededRng, Tape};
use crate::stgnn::{StgnnModel, TrainConfig};

/// Per-step losses and per-epoch validation of a two-term-loss run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage2Log {
    pub steps: Vec<LossBreakdown>,
    /// Validation camera-node MAE per epoch.
    pub val_loss_with: Vec<f64>,
    pub best_epoch: usize,
}

/// Camera-node MAE of `model` on `samples`.
pub fn camera_mae<M: DynamicLossModel + ?Sized>(model: &M, samples: &SampleSet) -> Result<f64> {
    let pred = predict_samples(model, samples)?;
    let (n, t) = (samples.n_nodes, samples.t_out);
    let cams = model.camera_nodes();
    let mut err = 0.0;
    for s in 0..samples.len() {
        let p = &pred.data()[s * n * t..(s + 1) * n * t];
        let y = samples.veh_targets.sample(s);
        for (m, &c) in cams.iter().enumerate() {
            for k in 0..t {
                err += (p[c * t + k] - y[m * t + k]).abs();
            }
        }
    }
    Ok(err / (samples.len() * cams.len() * t) as f64)
}

/// Adam on the two-term loss; keeps the parameters with the lowest
/// validation camera-node MAE.
pub fn train_dynamic<M: DynamicLossModel + ?Sized>(
    model: &mut M,
    train: &SampleSet,
    val: &SampleSet,
    tc: &TrainConfig,
    seed: u64,
) -> Result<Stage2Log> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidData(format!(
            "stage-2 training needs train and validation windows (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    let mut order_rng = SeededRng::new(seed).fork(2);
    let mut adam = AdamState::new(tc.adam(), model.params());
    let mut log = Stage2Log::default();
    let mut best = (f64::INFINITY, model.params().clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..tc.max_epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(tc.batch_size) {
            let tape = Tape::new();
            let p = model.params().bind(&tape, true);
            let (loss, b) = batch_loss(&*model, &tape, &p, train, chunk)?;
            let step = log.steps.len();
            if !b.total.is_finite() {
                return Err(Error::Diverged { step, loss: b.total });
            }
            let grads = tape.backward(loss)?;
            let g = p.gradients(&grads);
            drop(p);
            adam.step(model.params_mut(), &g).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Diverged { step, loss: b.total },
                e => e,
            })?;
            log.steps.push(b);
        }
        let val_lw = camera_mae(&*model, val)?;
        log.val_loss_with.push(val_lw);
        log::debug!("stage2 epoch {epoch}: val L_w {val_lw:.4} lambda {:.3e}", model.lambda());
        if val_lw < best.0 {
            best = (val_lw, model.params().clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    *model.params_mut() = best.1;
    Ok(log)
}

/// Trains attention and predictor on features from the two frozen
/// extractors. The extractors' parameter checksums are verified unchanged.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    gct_extractor: &StgnnModel,
    veh_extractor: &StgnnModel,
    graph: &GraphSpec,
    train: &SampleSet,
    val: &SampleSet,
    config: &FusionConfig,
    output_scale: (f64, f64),
    tc: &TrainConfig,
    seed: u64,
) -> Result<(FusionModel, Stage2Log)> {
    if !gct_extractor.is_frozen() || !veh_extractor.is_frozen() {
        return Err(Error::NotFrozen);
    }
    for ext in [gct_extractor, veh_extractor] {
        config
            .mgat
            .check_features(ext.config().channels, ext.config().feature_width())?;
    }
    let before = (gct_extractor.checksum(), veh_extractor.checksum());
    let mut model = FusionModel::new(config.clone(), graph, &train.camera_nodes, output_scale, &mut SeededRng::new(seed))?;
    let log = train_dynamic(&mut model, train, val, tc, seed)?;
    if (gct_extractor.checksum(), veh_extractor.checksum()) != before {
        return Err(Error::Tape("stage-1 parameters changed during stage 2".into()));
    }
    Ok((model, log))
}
