//! Training configuration, metrics, optimizer, early stopping, the training
//! loop, evaluation and grid search.

use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::DecoderConfig;
use crate::data::{build_vocabulary, encode_prompts, DataBundle, PreparedWindow, PromptMode, PromptStore, WindowSpec, CACHE_BUDGET_BYTES};
use crate::context::PromptBundle;
use crate::embed::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Param, Parameters};
use crate::model::{ModelDims, PkTimeLlm, Sample};
use crate::series::{add_days, csv_open_error, patch, ScalerParams, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    /// Minimum vocabulary size; the prompt corpus may make it larger.
    pub vocab_size: usize,
    pub num_prototypes: usize,
    pub llm_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub attn_gain: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Windows per optimizer step; 0 means the whole training split.
    pub batch_size: usize,
    pub seed: u64,
    pub backbone_seed: u64,
    pub prompt_mode: PromptMode,
    pub probe_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_len: 28,
            horizon: 7,
            patch_len: 7,
            stride: 3,
            vocab_size: 1024,
            num_prototypes: 100,
            llm_dim: 64,
            d_model: 32,
            n_heads: 4,
            ff_dim: 128,
            llm_layers: 2,
            llm_heads: 4,
            attn_gain: 1.0,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            batch_size: 0,
            seed: 0,
            backbone_seed: 0x5eed,
            prompt_mode: PromptMode::Pk,
            probe_windows: 8,
        }
    }
}

impl TrainConfig {
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len,
            horizon: self.horizon,
            patch_len: self.patch_len,
            stride: self.stride,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.llm_layers,
            dim: self.llm_dim,
            n_heads: self.llm_heads,
            ff_dim: self.ff_dim,
            attn_gain: self.attn_gain,
            seed: self.backbone_seed,
        }
    }

    /// Model dimensions for a vocabulary of `vocab_len` tokens.
    pub fn dims(&self, vocab_len: usize) -> ModelDims {
        ModelDims {
            input_len: self.input_len,
            horizon: self.horizon,
            patch_len: self.patch_len,
            stride: self.stride,
            vocab_size: vocab_len,
            num_prototypes: self.num_prototypes,
            d_model: self.d_model,
            n_heads: self.n_heads,
            decoder: self.decoder_config(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive".into());
        }
        if self.input_len < 8 {
            return bad(format!("input_len must be at least 8, got {}", self.input_len));
        }
        self.dims(self.vocab_size.max(self.num_prototypes).max(2)).validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: (1, pred.len()),
            right: (1, truth.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("metric inputs"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Metrics {
            mse: mse(pred, truth)?,
            mae: mae(pred, truth)?,
            n: pred.len(),
        })
    }
}

/// First/second-moment optimizer with bias correction; frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<M: Parameters + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_params_mut(&mut |_, p: &mut Param| {
            if moments.len() <= idx {
                let (r, c) = p.value().shape();
                moments.push((Matrix::zeros(r, c), Matrix::zeros(r, c)));
            }
            let (m, v) = &mut moments[idx];
            idx += 1;
            if p.is_frozen() {
                return;
            }
            let g = p.grad().clone();
            let Some(w) = p.value_mut() else { return };
            for (((w, g), m), v) in w
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
    }
}

/// Patience counter over validation losses; improvement means strictly lower.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }

    /// 1-based epoch of the best loss so far (0 before any update).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

/// Vocabulary and decoded prompt prefixes for the three splits; shared by
/// runs that differ only in their training seed or trainable dimensions.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub vocab: Vocabulary,
    pub mode: PromptMode,
    pub train: PromptStore,
    pub val: PromptStore,
    pub test: PromptStore,
}

impl PreparedRun {
    pub fn store(&self, split: Split) -> &PromptStore {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds the vocabulary and encodes the prompts of every split. Only the
/// frozen parts of the model are used, so the result is valid for any
/// training seed with the same backbone settings.
pub fn prepare_run(config: &TrainConfig, bundle: &DataBundle) -> Result<PreparedRun> {
    config.validate()?;
    check_spec(config, bundle)?;
    let vocab = build_vocabulary(bundle, config.vocab_size.max(config.num_prototypes));
    let template = PkTimeLlm::new(config.dims(vocab.len()), config.seed)?;
    let encode = |w: &[PreparedWindow]| encode_prompts(&template, &vocab, w, config.prompt_mode, CACHE_BUDGET_BYTES);
    Ok(PreparedRun {
        mode: config.prompt_mode,
        train: encode(&bundle.train)?,
        val: encode(&bundle.val)?,
        test: encode(&bundle.test)?,
        vocab,
    })
}

fn check_spec(config: &TrainConfig, bundle: &DataBundle) -> Result<()> {
    if config.window_spec() != bundle.spec {
        return Err(Error::InvalidConfig(format!(
            "config window {:?} does not match the prepared data {:?}",
            config.window_spec(),
            bundle.spec
        )));
    }
    Ok(())
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    /// Parameters from the best validation epoch.
    pub model: PkTimeLlm,
    pub vocab: Vocabulary,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// One head- and probe-averaged `P × V*` attention matrix per epoch.
    pub alignment: Vec<Matrix>,
}

pub fn train(config: &TrainConfig, bundle: &DataBundle) -> Result<TrainOutcome> {
    let run = prepare_run(config, bundle)?;
    train_prepared(config, bundle, &run)
}

fn samples<'a>(
    model: &PkTimeLlm,
    windows: &'a [PreparedWindow],
    store: &PromptStore,
    idx: &[usize],
) -> Result<Vec<(std::sync::Arc<crate::backbone::DecoderCache>, &'a PreparedWindow)>> {
    idx.iter().map(|&i| Ok((store.get(model, i)?, &windows[i]))).collect()
}

fn split_loss(model: &PkTimeLlm, windows: &[PreparedWindow], store: &PromptStore) -> Result<f64> {
    let state = model.proto_state()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, w) in windows.iter().enumerate() {
        let cache = store.get(model, i)?;
        let (y, _) = model.forecast_with(&state, &cache, &w.patches)?;
        sum += y.iter().zip(&w.target_scaled).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += y.len();
    }
    Ok(sum / n as f64)
}

fn alignment_snapshot(model: &PkTimeLlm, windows: &[PreparedWindow], probes: usize) -> Result<Matrix> {
    let state = model.proto_state()?;
    let cache = model.empty_cache();
    let n = probes.min(windows.len()).max(1);
    let mut acc = Matrix::zeros(model.dims.num_patches(), model.dims.num_prototypes);
    for w in windows.iter().take(n) {
        // The attention map does not depend on the prompt prefix.
        let (_, a) = model.forecast_with(&state, &cache, &w.patches)?;
        acc.add_assign(&a)?;
    }
    Ok(acc.scale(1.0 / n as f64))
}

pub fn train_prepared(config: &TrainConfig, bundle: &DataBundle, run: &PreparedRun) -> Result<TrainOutcome> {
    config.validate()?;
    check_spec(config, bundle)?;
    if run.mode != config.prompt_mode {
        return Err(Error::InvalidConfig("prepared prompts were encoded for a different prompt mode".into()));
    }
    if bundle.train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    if bundle.val.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let mut model = PkTimeLlm::new(config.dims(run.vocab.len()), config.seed)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(7);
    let batch = if config.batch_size == 0 {
        bundle.train.len()
    } else {
        config.batch_size
    };

    let mut best = model.clone();
    let mut history = Vec::new();
    let mut alignment = Vec::new();
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let pairs = samples(&model, &bundle.train, &run.train, chunk)?;
            let batch_samples: Vec<Sample<'_>> = pairs
                .iter()
                .map(|(c, w)| Sample {
                    cache: c,
                    patches: &w.patches,
                    target: &w.target_scaled,
                })
                .collect();
            model.zero_grads();
            let loss = model.loss_and_grad(&batch_samples).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {}", b + 1)),
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            adam.step(&mut model);
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_mse = split_loss(&model, &bundle.val, &run.val)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        alignment.push(alignment_snapshot(&model, &bundle.val, config.probe_windows)?);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
        });
        let d = stopper.update(val_mse);
        if d.improved {
            best = model.clone();
        }
        if d.stop {
            break;
        }
    }

    Ok(TrainOutcome {
        config: config.clone(),
        model: best,
        vocab: run.vocab.clone(),
        history,
        best_epoch: stopper.best_epoch(),
        best_val_mse: stopper.best(),
        alignment,
    })
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub anchor_date: NaiveDate,
    pub step: usize,
    pub date: NaiveDate,
    pub pred_scaled: f64,
    pub truth_scaled: f64,
    pub pred: f64,
    pub truth: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub forecasts: Vec<ForecastRow>,
}

/// Forecasts every window of `windows` and pools errors in scaled units.
pub fn evaluate_windows(
    model: &PkTimeLlm,
    windows: &[PreparedWindow],
    store: &PromptStore,
    scaler: &ScalerParams,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let state = model.proto_state()?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut forecasts = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let cache = store.get(model, i)?;
        let (y, _) = model.forecast_with(&state, &cache, &w.patches)?;
        for (k, (&p, &t)) in y.iter().zip(&w.target_scaled).enumerate() {
            forecasts.push(ForecastRow {
                anchor_date: w.window.anchor_date,
                step: k + 1,
                date: add_days(w.window.anchor_date, k + 1),
                pred_scaled: p,
                truth_scaled: t,
                pred: scaler.invert_one(p),
                truth: w.window.target[k],
            });
        }
        pred.extend_from_slice(&y);
        truth.extend_from_slice(&w.target_scaled);
    }
    Ok(Evaluation {
        metrics: Metrics::compute(&pred, &truth)?,
        forecasts,
    })
}

/// Encodes the prompts of one split for `model` and evaluates it.
pub fn evaluate(
    model: &PkTimeLlm,
    vocab: &Vocabulary,
    bundle: &DataBundle,
    split: Split,
    mode: PromptMode,
) -> Result<Evaluation> {
    let windows = bundle.split(split);
    let store = encode_prompts(model, vocab, windows, mode, CACHE_BUDGET_BYTES)?;
    evaluate_windows(model, windows, &store, &bundle.scaler)
}

pub fn write_forecasts_csv(path: impl AsRef<Path>, rows: &[ForecastRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Forecasts one scaled input window outside the prepared splits. Returns
/// the horizon in scaled units.
pub fn forecast_window(
    model: &PkTimeLlm,
    vocab: &Vocabulary,
    prompt: Option<&PromptBundle>,
    input_scaled: &[f64],
    patch_len: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    let patches = patch(input_scaled, patch_len, stride)?.patches;
    let cache = match prompt {
        None => model.empty_cache(),
        Some(p) => model.prefill(&model.embed_tokens(&tokenize(&p.text), vocab)?)?,
    };
    model.forecast(&cache, &patches)
}

/// Relative improvement of the port-knowledge run over a baseline run, in
/// percent of the port-knowledge error.
pub fn improvement_ratio(baseline_mse: f64, pk_mse: f64) -> f64 {
    (baseline_mse - pk_mse) / pk_mse * 100.0
}

/// Hyperparameter grid over the trainable and decoder dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpace {
    pub num_prototypes: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub d_model: Vec<usize>,
    pub ff_dim: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        GridSpace {
            num_prototypes: vec![100, 1000],
            n_heads: vec![4, 8],
            d_model: vec![32, 64],
            ff_dim: vec![128, 256],
        }
    }
}

impl GridSpace {
    /// Every combination, in lexicographic order of sorted parameter tuples.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let sorted = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut out = Vec::new();
        for &p in &sorted(&self.num_prototypes) {
            for &h in &sorted(&self.n_heads) {
                for &d in &sorted(&self.d_model) {
                    for &f in &sorted(&self.ff_dim) {
                        out.push(TrainConfig {
                            num_prototypes: p,
                            n_heads: h,
                            d_model: d,
                            ff_dim: f,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub input_len: usize,
    pub horizon: usize,
    pub prompt_mode: PromptMode,
    pub num_prototypes: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub seed: u64,
    pub val_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub error: Option<String>,
}

impl GridRow {
    fn from_config(c: &TrainConfig) -> Self {
        GridRow {
            input_len: c.input_len,
            horizon: c.horizon,
            prompt_mode: c.prompt_mode,
            num_prototypes: c.num_prototypes,
            n_heads: c.n_heads,
            d_model: c.d_model,
            ff_dim: c.ff_dim,
            seed: c.seed,
            val_mse: None,
            test_mse: None,
            test_mae: None,
            error: None,
        }
    }
}

/// Index of the row with the lowest finite validation MSE; the earliest row wins ties.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = r.val_mse.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: Option<usize>,
    pub best_outcome: Option<TrainOutcome>,
}

/// Trains every configuration of `space` (runs are independent and execute
/// in parallel); failures are recorded in the table rather than aborting.
pub fn grid_search(space: &GridSpace, base: &TrainConfig, bundle: &DataBundle) -> Result<GridResult> {
    let configs = space.configs(base);
    if configs.is_empty() {
        return Err(Error::InvalidConfig("empty grid".into()));
    }
    let results: Vec<(GridRow, Option<TrainOutcome>)> = configs
        .par_iter()
        .map(|c| {
            let mut row = GridRow::from_config(c);
            let run = || -> Result<(TrainOutcome, Metrics)> {
                let outcome = train(c, bundle)?;
                let eval = evaluate(&outcome.model, &outcome.vocab, bundle, Split::Test, c.prompt_mode)?;
                Ok((outcome, eval.metrics))
            };
            match run() {
                Ok((outcome, m)) => {
                    row.val_mse = Some(outcome.best_val_mse);
                    row.test_mse = Some(m.mse);
                    row.test_mae = Some(m.mae);
                    (row, Some(outcome))
                }
                Err(e) => {
                    row.error = Some(e.to_string());
                    (row, None)
                }
            }
        })
        .collect();
    let rows: Vec<GridRow> = results.iter().map(|(r, _)| r.clone()).collect();
    let best = select_best(&rows);
    let best_outcome = best.and_then(|i| results.into_iter().nth(i).and_then(|(_, o)| o));
    Ok(GridResult {
        rows,
        best,
        best_outcome,
    })
}

pub fn write_grid_csv(path: impl AsRef<Path>, rows: &[GridRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
