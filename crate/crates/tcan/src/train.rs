//! Batch training with early stopping, and model evaluation.
//!
//! Each batch loops over its cascades, building one tape per cascade and
//! accumulating gradients (the per-sample losses are scaled by 1/batch so
//! the accumulated gradient equals the batch-mean gradient), then takes one
//! optimizer step. Validation loss is tracked per epoch; training stops
//! once it has failed to improve for more than `patience` epochs, and the
//! best-validation parameters are restored.

use crate::error::{Error, Result};
use crate::metrics::{log2p1, EpochStats, EvalReport, PredRecord};
use crate::model::{ModelConfig, TcanModel, Vocab};
use crate::optim::adam_step;
use crate::seeds;
use crate::tape::{RunMode, Tape};
use crate::time_embed::TimeStats;
use crate::views::{CascadeViews, DatasetSplit};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_msle: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Observation cutoff for time statistics; defaults to the largest
    /// observed join time in the training set.
    pub t_obs: Option<f64>,
    /// Worker threads for validation/test evaluation.
    pub workers: usize,
}

/// Train a model on the split per its config. Returns the best-validation
/// model and the per-epoch history.
pub fn train(split: &DatasetSplit, cfg: &ModelConfig, opts: &TrainOptions) -> Result<(TcanModel, History)> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Validation("train and validation sets must be non-empty".into()));
    }
    // The vocabulary covers the whole split: test-time nodes keep their
    // randomly initialized feature rows rather than erroring.
    let vocab = Vocab::from_views(
        split.train.iter().chain(split.val.iter()).chain(split.test.iter()),
    );
    let stats = TimeStats::from_views(&split.train, opts.t_obs);
    let mean_log_label = split.train.iter().map(|v| log2p1(v.label as f64)).sum::<f64>()
        / split.train.len() as f64;
    let mut model = TcanModel::init(cfg.clone(), vocab, &stats, mean_log_label)?;

    let hyper = model.adam_hyper();
    let mut dropout_rng = seeds::substream(cfg.seed, "train.dropout");
    let mode = RunMode::train(cfg.dropout);

    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_msle: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_snapshot = model.store.snapshot();
    let mut epochs_since_improvement = 0usize;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let mut shuffle_rng = seeds::substream(cfg.seed, &format!("train.shuffle.{epoch}"));
        for i in (1..order.len()).rev() {
            order.swap(i, seeds::uniform_index(&mut shuffle_rng, i + 1));
        }

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let views = &split.train[idx];
                let mut tape = Tape::new();
                let out = model
                    .forward_tape(&mut tape, views, mode, &mut dropout_rng, false)
                    .map_err(|e| train_context(e, epoch, &views.id))?;
                let sq = model.squared_log_error(&mut tape, out.output, views.label)?;
                let loss = tape.scale(sq, scale)?;
                let loss_val = tape.value(sq).get(0, 0);
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss diverged at epoch {epoch} on cascade `{}`",
                        views.id
                    )));
                }
                loss_sum += loss_val;
                tape.backward(loss, &mut model.store)
                    .map_err(|e| train_context(e, epoch, &views.id))?;
            }
            global_step += 1;
            adam_step(&mut model.store, &hyper, global_step)?;
        }
        let train_loss = loss_sum / split.train.len() as f64;

        let val = evaluate(&model, &split.val, opts.workers.max(1))?;
        history.epochs.push(EpochStats { epoch, train_loss, val_msle: val.msle });
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val msle {:.4}", val.msle);

        if val.msle < history.best_val_msle {
            history.best_val_msle = val.msle;
            history.best_epoch = epoch;
            best_snapshot = model.store.snapshot();
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement > cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    model.store.restore(&best_snapshot)?;
    Ok((model, history))
}

fn train_context(e: Error, epoch: usize, cascade_id: &str) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!(
            "op `{op}` produced a non-finite value at epoch {epoch} on cascade `{cascade_id}`"
        )),
        other => other,
    }
}

/// Eval-mode predictions and metrics over a view set. Forward passes are
/// independent per cascade, so `workers > 1` fans them out across threads;
/// results are merged in input order, keeping the report deterministic.
pub fn evaluate(model: &TcanModel, views: &[CascadeViews], workers: usize) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::Validation("evaluate: empty view set".into()));
    }
    let preds = predict_all(model, views, workers)?;
    let records = views
        .iter()
        .zip(preds)
        .map(|(v, y_hat)| PredRecord { id: v.id.clone(), y: v.label as f64, y_hat })
        .collect();
    EvalReport::from_records(records)
}

/// Predictions for each view, in input order.
pub fn predict_all(model: &TcanModel, views: &[CascadeViews], workers: usize) -> Result<Vec<f64>> {
    let workers = workers.max(1).min(views.len());
    if workers == 1 {
        return views.iter().map(|v| model.predict(v)).collect();
    }
    let chunk = views.len().div_ceil(workers);
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = views
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|v| model.predict(v)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(views.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
