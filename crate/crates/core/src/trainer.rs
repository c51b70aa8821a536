//! Joint training with Adam, validation-driven early stopping and
//! resumable state.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::dataset::{make_batches, Dataset, SequenceBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Metrics};
use crate::flow::{training_loss, LossParts, StepNoise};
use crate::model::FlowRec;
use crate::optim::{clip_grad_norm, Adam};
use crate::params::ParamStore;
use crate::rng::{stream, TrainRngs};
use crate::sampler::FlowSampler;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_prior: f64,
    pub l_cfm: f64,
    pub l_align: f64,
    pub total: f64,
    #[serde(rename = "val_hr@5")]
    pub val_hr5: f64,
    #[serde(rename = "val_hr@10")]
    pub val_hr10: f64,
    #[serde(rename = "val_ndcg@5")]
    pub val_ndcg5: f64,
    #[serde(rename = "val_ndcg@10")]
    pub val_ndcg10: f64,
    /// Wall-clock seconds spent on the optimisation pass (validation
    /// excluded).
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log line serialises")
    }
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    /// Epochs since the last improvement.
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return Verdict::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: u64,
    pub stopping: EarlyStopping,
    pub history: Vec<EpochLog>,
    pub finished: bool,
}

/// Everything besides the model that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingParts {
    pub optimizer: Adam,
    pub rngs: TrainRngs,
    pub progress: TrainProgress,
    /// Parameters of the best epoch so far.
    pub best: Option<ParamStore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: FlowRec,
    pub training: TrainingParts,
}

impl TrainState {
    /// Fresh model and optimiser for `config` over a catalog of
    /// `num_items` items.
    pub fn new(config: &RunConfig, num_items: usize) -> Result<Self> {
        let model = FlowRec::new(&config.model, num_items, &mut stream(config.seed, "init"))?;
        let n = model.params().len();
        Ok(Self {
            model,
            training: TrainingParts {
                optimizer: Adam::new(config.train.lr, n),
                rngs: TrainRngs::new(config.seed),
                progress: TrainProgress {
                    epoch: 0,
                    step: 0,
                    stopping: EarlyStopping::new(config.train.patience),
                    history: Vec::new(),
                    finished: false,
                },
                best: None,
            },
        })
    }

    /// The best model seen so far (the current one if nothing was
    /// validated yet).
    pub fn best_model(&self) -> FlowRec {
        match &self.training.best {
            Some(p) => FlowRec::from_params(self.model.config().clone(), self.model.num_items(), p.clone())
                .expect("best parameters share the model layout"),
            None => self.model.clone(),
        }
    }
}

/// Forward, backward and one Adam update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &SequenceBatch, config: &RunConfig) -> Result<LossParts> {
    let TrainState { model, training } = state;
    let noise = StepNoise::draw(model, batch.size(), &mut training.rngs);
    let step = training.progress.step + 1;
    let mut grads = {
        let mut g = Graph::new();
        let mut bound = model.bind();
        let (loss, parts) = training_loss(&mut g, &mut bound, batch, &config.train, noise, Some(&mut training.rngs.dropout))
            .map_err(|e| match e {
                Error::NonFiniteLoss { component, value, .. } => Error::NonFiniteLoss { component, value, step },
                other => other,
            })?;
        (g.backward(loss).params(), parts)
    };
    if let Some(max) = config.train.grad_clip {
        clip_grad_norm(&mut grads.0, max);
    }
    training.optimizer.step(model.params_mut(), &grads.0);
    training.progress.step = step;
    Ok(grads.1)
}

/// Validation options derived from the run config.
pub fn eval_options(config: &RunConfig) -> EvalOptions {
    EvalOptions {
        batch_size: config.train.batch_size,
        workers: config.train.eval_workers,
        mask_history: config.sampler.mask_history,
    }
}

/// Runs one epoch over the training pairs and returns size-weighted mean
/// losses and the elapsed seconds.
pub fn run_epoch(state: &mut TrainState, dataset: &Dataset, config: &RunConfig) -> Result<(LossParts, f64)> {
    let start = Instant::now();
    let examples = dataset.split.train_examples(config.data.all_prefixes);
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let order: Vec<SequenceBatch> = make_batches(
        &examples,
        config.train.batch_size,
        config.model.max_len,
        Some(&mut state.training.rngs.shuffle),
    )
    .collect();
    let mut sum = LossParts::default();
    let mut n = 0.0;
    for batch in &order {
        let p = train_step(state, batch, config)?;
        let w = batch.size() as f64;
        sum.prior += w * p.prior;
        sum.cfm += w * p.cfm;
        sum.align += w * p.align;
        sum.total += w * p.total;
        n += w;
    }
    sum.prior /= n;
    sum.cfm /= n;
    sum.align /= n;
    sum.total /= n;
    Ok((sum, start.elapsed().as_secs_f64()))
}

pub fn validate(model: &FlowRec, dataset: &Dataset, config: &RunConfig) -> Result<Metrics> {
    let sampler = FlowSampler::new(model, config.sampler.steps);
    evaluate(&sampler, &dataset.split.valid, &eval_options(config))
}

/// Trains until early stopping, `max_epochs`, or (when given) until
/// `stop_after` epochs have completed in total. `on_epoch` sees the state
/// after each epoch, e.g. to write logs and checkpoints.
pub fn train(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &RunConfig,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<()> {
    if dataset.num_items() != state.model.num_items() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "model has {} items, dataset has {}",
            state.model.num_items(),
            dataset.num_items()
        )));
    }
    if dataset.split.valid.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let limit = stop_after.map_or(config.train.max_epochs, |s| s.min(config.train.max_epochs));
    while !state.training.progress.finished && state.training.progress.epoch < limit {
        let epoch = state.training.progress.epoch + 1;
        let (loss, seconds) = run_epoch(state, dataset, config)?;
        let val = validate(&state.model, dataset, config)?;
        let log = EpochLog {
            epoch,
            l_prior: loss.prior,
            l_cfm: loss.cfm,
            l_align: loss.align,
            total: loss.total,
            val_hr5: val.hr5,
            val_hr10: val.hr10,
            val_ndcg5: val.ndcg5,
            val_ndcg10: val.ndcg10,
            seconds,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (prior {:.4}, cfm {:.4}, align {:.4}) val ndcg@10 {:.4} [{seconds:.1}s]",
            loss.total,
            loss.prior,
            loss.cfm,
            loss.align,
            val.ndcg10
        );
        let tr = &mut state.training;
        match tr.progress.stopping.observe(epoch, val.ndcg10) {
            Verdict::Improved => tr.best = Some(state.model.params().clone()),
            Verdict::Continue => {}
            Verdict::Stop => tr.progress.finished = true,
        }
        tr.progress.epoch = epoch;
        if epoch >= config.train.max_epochs {
            tr.progress.finished = true;
        }
        tr.progress.history.push(log.clone());
        on_epoch(state, &log)?;
    }
    Ok(())
}
