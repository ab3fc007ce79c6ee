//! Deterministic training: Adam over per-sample tape gradients, validation
//! monitoring every few epochs with best-checkpoint return, and a grid
//! sweep ranked by validation AUPRC.
//!
//! Determinism contract: everything random derives from the run seed
//! (validation split, parameter init, epoch shuffles, bootstrap). Batches
//! parallelize per sample, but gradients are reduced in fixed sample
//! order, so results are bit-identical regardless of thread count.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::embed::EvatVariant;
use crate::gradcheck::ParamSet;
use crate::metrics::{self, MetricsReport};
use crate::model::{LossConfig, ModelConfig, SummitModel};
use crate::seed::{derive_seed, derive_seed_indexed};
use crate::summarize::{
    apply_normalizer, fit_normalizer, summarize_dataset, Normalizer, SummarizationConfig,
    SummaryMatrix,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    /// Strict AUPRC improvement resets patience (default).
    Auprc,
    /// Improvement in either AUPRC or AUROC resets patience.
    AuprcOrAuroc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    /// Stagnation budget in epochs; must be a multiple of `eval_every`.
    pub patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub validation_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fill missing cells with training-set global mean/mode and disable
    /// masking (the imputation ablation input path).
    pub impute: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 256,
            max_epochs: 100,
            eval_every: 5,
            patience: 30,
            early_stop_metric: EarlyStopMetric::Auprc,
            validation_fraction: 0.2,
            seed: 7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            impute: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "learning rate, batch size and eval cadence must be positive".into(),
            ));
        }
        if self.patience % self.eval_every != 0 {
            return Err(Error::Config(format!(
                "patience {} must be a multiple of eval_every {}",
                self.patience, self.eval_every
            )));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::Config(
                "validation fraction must be in (0,1)".into(),
            ));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0)
            || !(0.0 < self.adam_beta2 && self.adam_beta2 < 1.0)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config("bad Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auprc: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// Best epoch carries the maximum validation AUPRC, earliest on ties.
    pub fn check_consistency(&self) -> Result<()> {
        let best = self
            .records
            .iter()
            .max_by(|a, b| {
                a.val_auprc
                    .total_cmp(&b.val_auprc)
                    .then(b.epoch.cmp(&a.epoch))
            })
            .map(|r| r.epoch);
        if best != self.best_epoch {
            return Err(Error::Numeric(format!(
                "best epoch {:?} inconsistent with records (expect {best:?})",
                self.best_epoch
            )));
        }
        Ok(())
    }
}

pub fn write_history_csv(history: &TrainHistory, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "train_loss", "val_auprc", "val_auroc"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for r in &history.records {
        wtr.write_record(&[
            r.epoch.to_string(),
            format!("{}", r.train_loss),
            format!("{}", r.val_auprc),
            format!("{}", r.val_auroc),
        ])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Adam with bias correction; state lives per parameter path.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate as f32,
            beta1: cfg.adam_beta1 as f32,
            beta2: cfg.adam_beta2 as f32,
            eps: cfg.adam_eps as f32,
            t: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let paths: Vec<String> = params.paths().cloned().collect();
        for path in paths {
            let Some(g) = grads.get(&path) else { continue };
            let p = params.get_mut(&path).expect("path from iteration");
            if self.m.get(&path).is_none() {
                self.m
                    .insert(path.clone(), Tensor::zeros(g.rows(), g.cols()));
                self.v
                    .insert(path.clone(), Tensor::zeros(g.rows(), g.cols()));
            }
            let m = self.m.get_mut(&path).expect("just inserted");
            let v = self.v.get_mut(&path).expect("just inserted");
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                if !pv.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite parameter after update in {path}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A trained model bundle: wiring, parameters, and the preprocessing
/// statistics scoring must reuse.
pub struct TrainedModel {
    pub model: SummitModel,
    pub params: ParamSet<f32>,
    pub summarization: SummarizationConfig,
    pub normalizer: Normalizer,
    pub impute: bool,
    pub seed: u64,
    pub history: TrainHistory,
    pub best_val_auprc: Option<f64>,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg,
            loss: self.model.loss,
            variant: self.model.variant,
            schema: self.model.schema.clone(),
            summarization: self.summarization,
            normalizer: self.normalizer.clone(),
            impute: self.impute,
            seed: self.seed,
            params: self.params.clone(),
            extra: serde_json::json!({
                "best_epoch": self.history.best_epoch,
                "best_val_auprc": self.best_val_auprc,
                "stop_reason": self.history.stop_reason,
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = SummitModel::new(ck.model, ck.loss, ck.variant, ck.schema.clone())?;
        Ok(Self {
            model,
            params: ck.params.clone(),
            summarization: ck.summarization,
            normalizer: ck.normalizer.clone(),
            impute: ck.impute,
            seed: ck.seed,
            history: TrainHistory {
                records: vec![],
                best_epoch: None,
                stop_reason: StopReason::MaxEpochs,
            },
            best_val_auprc: None,
        })
    }
}

/// Score summaries with shared read-only parameters, in input order.
pub fn score_summaries(
    model: &SummitModel,
    params: &ParamSet<f32>,
    summaries: &[SummaryMatrix],
) -> Result<Vec<f64>> {
    summaries
        .par_iter()
        .map(|sm| model.predict(params, sm, false).map(|(p, _)| p))
        .collect()
}

fn preprocess(
    ds: &Dataset,
    summ: &SummarizationConfig,
    norm: &Normalizer,
    impute: bool,
) -> Result<Vec<SummaryMatrix>> {
    summarize_dataset(ds, summ)?
        .iter()
        .map(|sm| apply_normalizer(sm, norm, &ds.schema, impute))
        .collect()
}

/// One gradient step over a batch: per-sample forward/backward in
/// parallel, gradient reduction in fixed sample order, one Adam update.
/// Returns the mean batch loss.
fn train_batch(
    model: &SummitModel,
    params: &mut ParamSet<f32>,
    adam: &mut Adam,
    batch: &[(&SummaryMatrix, u8)],
) -> Result<f64> {
    let b = batch.len();
    let seed_grad = 1.0 / b as f32;
    let per_sample: Vec<(f64, ParamSet<f32>)> = batch
        .par_iter()
        .map(|(sm, y)| -> Result<(f64, ParamSet<f32>)> {
            let mut tape: Tape<f32> = Tape::new();
            let nodes = model.params_to_tape(&mut tape, params);
            let pass = model.forward_on_tape(&mut tape, &nodes, sm, false)?;
            let stacked = tape.stack_rows(&[pass.prob])?;
            let loss_id = tape.focal_loss(
                stacked,
                &[*y],
                model.loss.alpha as f32,
                model.loss.gamma as f32,
            )?;
            let loss = tape.value(loss_id).item()? as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric("non-finite training loss".into()));
            }
            let grads = tape.backward(loss_id, seed_grad)?;
            let mut g = ParamSet::new();
            for (path, id) in &nodes {
                if let Some(t) = grads.get(*id) {
                    g.insert(path.clone(), t.clone());
                }
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;

    let mut total = ParamSet::<f32>::new();
    let mut loss_sum = 0.0;
    for (loss, g) in per_sample {
        loss_sum += loss;
        for (path, t) in g.iter() {
            match total.get_mut(path) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => total.insert(path.clone(), t.clone()),
            }
        }
    }
    let grad_norm: f64 = total
        .iter()
        .map(|(_, t)| t.data().iter().map(|&g| (g as f64) * g as f64).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    log::debug!("batch grad norm {grad_norm:.6}");

    adam.step(params, &total)?;
    Ok(loss_sum / b as f64)
}

/// Train on `train_ds`: an internal stratified validation split, focal
/// loss with Adam, validation AUPRC/AUROC every `eval_every` epochs, early
/// stop after `patience` stagnant epochs, best-checkpoint return.
pub fn train(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    summ_cfg: SummarizationConfig,
    variant: EvatVariant,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
) -> Result<TrainedModel> {
    train_cfg.validate()?;
    let model = SummitModel::new(model_cfg, loss_cfg, variant, train_ds.schema.clone())?;

    let (fit_ds, val_ds) = crate::data::split_stratified(
        train_ds,
        train_cfg.validation_fraction,
        derive_seed(train_cfg.seed, "validation-split"),
    )?;

    // Normalization statistics come from the fitting part only.
    let fit_raw = summarize_dataset(&fit_ds, &summ_cfg)?;
    let normalizer = fit_normalizer(&fit_raw, &train_ds.schema)?;
    let fit: Vec<SummaryMatrix> = fit_raw
        .iter()
        .map(|sm| apply_normalizer(sm, &normalizer, &train_ds.schema, train_cfg.impute))
        .collect::<Result<_>>()?;
    let val = preprocess(&val_ds, &summ_cfg, &normalizer, train_cfg.impute)?;
    let fit_labels: Vec<u8> = fit_ds.samples.iter().map(|s| s.label).collect();
    let val_labels: Vec<u8> = val_ds.samples.iter().map(|s| s.label).collect();

    let mut params = model.init_params::<f32>(derive_seed(train_cfg.seed, "init"));
    let mut adam = Adam::new(train_cfg);

    let mut history = TrainHistory {
        records: vec![],
        best_epoch: None,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best_params = params.clone();
    let mut best_auprc = f64::NEG_INFINITY;
    let mut best_auroc = f64::NEG_INFINITY;
    let max_stagnant = train_cfg.patience / train_cfg.eval_every;
    let mut stagnant = 0usize;

    let mut indices: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=train_cfg.max_epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed_indexed(
            train_cfg.seed,
            "shuffle",
            epoch as u64,
        ));
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(train_cfg.batch_size) {
            let batch: Vec<(&SummaryMatrix, u8)> =
                chunk.iter().map(|&i| (&fit[i], fit_labels[i])).collect();
            let mean_loss = train_batch(&model, &mut params, &mut adam, &batch)?;
            loss_sum += mean_loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;

        if epoch % train_cfg.eval_every == 0 {
            let scores = score_summaries(&model, &params, &val)?;
            let val_auprc = metrics::auprc(&scores, &val_labels)?;
            let val_auroc = metrics::auroc(&scores, &val_labels)?;
            history.records.push(EvalRecord {
                epoch,
                train_loss,
                val_auprc,
                val_auroc,
            });
            log::info!(
                "epoch {epoch}: train loss {train_loss:.6}, val auprc {val_auprc:.4}, val auroc {val_auroc:.4}"
            );

            let improved_gate = match train_cfg.early_stop_metric {
                EarlyStopMetric::Auprc => val_auprc > best_auprc,
                EarlyStopMetric::AuprcOrAuroc => {
                    val_auprc > best_auprc || val_auroc > best_auroc
                }
            };
            if val_auprc > best_auprc {
                best_auprc = val_auprc;
                best_params = params.clone();
                history.best_epoch = Some(epoch);
            }
            best_auroc = best_auroc.max(val_auroc);
            if improved_gate {
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant >= max_stagnant {
                    history.stop_reason = StopReason::Patience;
                    break;
                }
            }
        }
    }

    let best_val_auprc = history.best_epoch.map(|_| best_auprc);
    // Before any evaluation happened there is no best checkpoint to
    // prefer; fall back to the final parameters.
    let params = if history.best_epoch.is_some() {
        best_params
    } else {
        params
    };
    Ok(TrainedModel {
        model,
        params,
        summarization: summ_cfg,
        normalizer,
        impute: train_cfg.impute,
        seed: train_cfg.seed,
        history,
        best_val_auprc,
    })
}

/// Score a dataset with a trained bundle and compute the metric suite.
/// The c-index is included when every sample carries an event time.
pub fn evaluate(
    trained: &TrainedModel,
    ds: &Dataset,
    threshold: f64,
    n_boot: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if ds.schema != trained.model.schema {
        return Err(Error::Data(
            "dataset schema does not match the checkpoint schema".into(),
        ));
    }
    let summaries = preprocess(ds, &trained.summarization, &trained.normalizer, trained.impute)?;
    let scores = score_summaries(&trained.model, &trained.params, &summaries)?;
    let labels: Vec<u8> = ds.samples.iter().map(|s| s.label).collect();
    let times: Option<Vec<f64>> = ds
        .samples
        .iter()
        .map(|s| s.event_time)
        .collect::<Option<Vec<f64>>>();
    metrics::metrics_report(
        &scores,
        &labels,
        times.as_deref(),
        threshold,
        n_boot,
        0.95,
        derive_seed(seed, "bootstrap"),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub d_model: Vec<usize>,
    pub num_head: Vec<usize>,
    pub ff_dim: Vec<usize>,
    pub num_layer: Vec<usize>,
    pub classifier_down_factor: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            d_model: vec![16, 32],
            num_head: vec![1, 2],
            ff_dim: vec![32, 64],
            num_layer: vec![1, 2],
            classifier_down_factor: vec![2],
            learning_rate: vec![3e-3, 3e-4],
        }
    }
}

impl SweepGrid {
    pub fn cartesian_size(&self) -> usize {
        self.d_model.len()
            * self.num_head.len()
            * self.ff_dim.len()
            * self.num_layer.len()
            * self.classifier_down_factor.len()
            * self.learning_rate.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cartesian_size() == 0 {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        Ok(())
    }

    fn configs(&self, max_seq_len: usize) -> Vec<(ModelConfig, f64)> {
        let mut out = Vec::new();
        for &d in &self.d_model {
            for &h in &self.num_head {
                for &ff in &self.ff_dim {
                    for &n in &self.num_layer {
                        for &down in &self.classifier_down_factor {
                            for &lr in &self.learning_rate {
                                out.push((
                                    ModelConfig {
                                        d_model: d,
                                        num_head: h,
                                        ff_dim: ff,
                                        num_layer: n,
                                        classifier_down_factor: down,
                                        max_seq_len,
                                    },
                                    lr,
                                ));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: ModelConfig,
    pub learning_rate: f64,
    pub n_params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auprc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub cartesian_size: usize,
    /// Ranked by validation AUPRC descending; ties prefer fewer
    /// parameters. Skipped entries sort last.
    pub entries: Vec<SweepEntry>,
}

/// Train every grid configuration with the shared seed (hence the same
/// validation split) and rank by validation AUPRC.
pub fn sweep(
    grid: &SweepGrid,
    loss_cfg: LossConfig,
    summ_cfg: SummarizationConfig,
    variant: EvatVariant,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    max_seq_len: usize,
) -> Result<SweepReport> {
    grid.validate()?;
    let size = grid.cartesian_size();
    log::info!("sweep over {size} configurations");

    let mut entries = Vec::with_capacity(size);
    for (cfg, lr) in grid.configs(max_seq_len) {
        let mut tc = *train_cfg;
        tc.learning_rate = lr;
        match train(cfg, loss_cfg, summ_cfg, variant, &tc, ds) {
            Ok(trained) => entries.push(SweepEntry {
                config: cfg,
                learning_rate: lr,
                n_params: trained.params.num_scalars(),
                val_auprc: trained.best_val_auprc,
                skipped: None,
            }),
            Err(e) => entries.push(SweepEntry {
                config: cfg,
                learning_rate: lr,
                n_params: 0,
                val_auprc: None,
                skipped: Some(e.to_string()),
            }),
        }
    }
    entries.sort_by(|a, b| match (a.val_auprc, b.val_auprc) {
        (Some(x), Some(y)) => x
            .total_cmp(&y)
            .reverse()
            .then(a.n_params.cmp(&b.n_params)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(SweepReport {
        cartesian_size: size,
        entries,
    })
}
