//! Joint optimization of one component model per variate.
//!
//! Every step of [`train_component`]:
//! 1. computes the prediction MSE for the target variate and its gradients with
//!    respect to the selector (`W`, `b`) and the forecaster, plus the reduction loss
//!    and its closed-form `beta` gradient;
//! 2. takes an Adam step on selector and forecaster (decoupled weight decay on the
//!    forecaster only);
//! 3. from step `K` on, takes an optimizer step on `beta`;
//! 4. applies the proximal compression to `W` with the step's learning rate.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_windows, standardize, Dataset, WindowSet};
use crate::lstm::{LstmParams, LstmTape};
use crate::selector::{LagMode, SelectorGrads, SelectorParams};
use crate::slstm::{SlstmParams, SlstmTape};
use crate::{Error, Result};

/// Which part of the method is swapped out, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Classic LSTM forecaster instead of the sLSTM.
    #[serde(alias = "lstm-forecaster")]
    Lstm,
    /// Fixed uniform compression weights (plain group lasso), `beta` never trained.
    GroupLasso,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "lstm" | "lstm-forecaster" => Ok(Ablation::Lstm),
            "group-lasso" | "group_lasso" => Ok(Ablation::GroupLasso),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Update rule for the reduction logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BetaOptimizer {
    #[default]
    Adam,
    /// Plain gradient descent with the scheduled learning rate.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sparsity weight.
    pub lambda: f64,
    /// Peak learning rate reached at the end of warmup.
    pub eta_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Step from which `beta` (and so `alpha`) is trained.
    #[serde(alias = "K")]
    pub compression_start: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `None` trains on all windows every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    /// Context length `C`.
    pub context: usize,
    pub lag_mode: LagMode,
    /// Hidden width `D`.
    pub hidden: usize,
    pub heads: usize,
    pub beta_optimizer: BetaOptimizer,
    /// Z-score each variate before windowing.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            eta_max: 1e-4,
            warmup_steps: 2000,
            total_steps: 13_000,
            compression_start: 1500,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: None,
            seed: 0,
            ablation: Ablation::None,
            context: 10,
            lag_mode: LagMode::Shared,
            hidden: 32,
            heads: 1,
            beta_optimizer: BetaOptimizer::Adam,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.eta_max > 0.0 && self.eta_max.is_finite()) {
            return bad(format!("eta_max must be positive, got {}", self.eta_max));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps".into());
        }
        if self.compression_start > self.total_steps {
            return bad("compression start K exceeds total_steps".into());
        }
        if self.context == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("context, hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Linear warmup to `eta_max`, then cosine annealing towards zero.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.eta_max * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.eta_max * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moment buffers for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update with decoupled weight decay:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64, hyper: AdamHyper, weight_decay: f64) {
        assert_eq!(params.len(), self.first.len(), "tensor count changed");
        assert_eq!(grads.len(), self.first.len(), "tensor count changed");
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            assert_eq!(p.len(), m.len(), "tensor size changed");
            for k in 0..p.len() {
                m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
                v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
    }
}

/// The recurrent forecaster of a component.
#[derive(Debug, Clone, PartialEq)]
pub enum Forecaster {
    Slstm(SlstmParams),
    Lstm(LstmParams),
}

#[derive(Debug, Clone)]
pub enum ForecasterTape {
    Slstm(SlstmTape),
    Lstm(LstmTape),
}

impl Forecaster {
    pub fn kind(&self) -> &'static str {
        match self {
            Forecaster::Slstm(_) => "slstm",
            Forecaster::Lstm(_) => "lstm",
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Forecaster::Slstm(p) => p.hidden(),
            Forecaster::Lstm(p) => p.hidden(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Forecaster::Slstm(p) => p.tensors(),
            Forecaster::Lstm(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Forecaster::Slstm(p) => p.tensors_mut(),
            Forecaster::Lstm(p) => p.tensors_mut(),
        }
    }

    pub fn forward_batch(&self, inputs: &[ndarray::Array2<f64>]) -> Result<(Array1<f64>, ForecasterTape)> {
        Ok(match self {
            Forecaster::Slstm(p) => {
                let (y, t) = p.forward_batch(inputs)?;
                (y, ForecasterTape::Slstm(t))
            }
            Forecaster::Lstm(p) => {
                let (y, t) = p.forward_batch(inputs)?;
                (y, ForecasterTape::Lstm(t))
            }
        })
    }

    /// Gradients (as a forecaster of the same kind) and input gradients.
    pub fn backward_batch(
        &self,
        inputs: &[ndarray::Array2<f64>],
        tape: &ForecasterTape,
        d_pred: ndarray::ArrayView1<'_, f64>,
    ) -> Result<(Forecaster, Vec<ndarray::Array2<f64>>)> {
        match (self, tape) {
            (Forecaster::Slstm(p), ForecasterTape::Slstm(t)) => {
                let (g, dx) = p.backward_batch(inputs, t, d_pred)?;
                Ok((Forecaster::Slstm(g), dx))
            }
            (Forecaster::Lstm(p), ForecasterTape::Lstm(t)) => {
                let (g, dx) = p.backward_batch(inputs, t, d_pred)?;
                Ok((Forecaster::Lstm(g), dx))
            }
            _ => Err(Error::Shape("tape was recorded by a different forecaster kind".into())),
        }
    }
}

/// Selector plus forecaster predicting variate `variate`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentModel {
    pub variate: usize,
    pub selector: SelectorParams,
    pub forecaster: Forecaster,
}

/// Prediction loss and its gradients for one batch.
#[derive(Debug, Clone)]
pub struct PredictionGrads {
    pub loss: f64,
    pub selector: SelectorGrads,
    pub forecaster: Forecaster,
}

fn lag_views(windows: &WindowSet) -> Vec<ArrayView2<'_, f64>> {
    (0..windows.context_len()).map(|c| windows.lag(c)).collect()
}

impl ComponentModel {
    /// Fresh model with the streams derived from `seed` (selector on stream 0,
    /// forecaster on stream 1).
    pub fn init(variate: usize, variates: usize, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let selector = SelectorParams::init(variates, cfg.hidden, cfg.lag_mode, cfg.context, &mut rng)?;
        rng.set_stream(1);
        let forecaster = match cfg.ablation {
            Ablation::Lstm => Forecaster::Lstm(LstmParams::init(cfg.hidden, &mut rng)?),
            Ablation::None | Ablation::GroupLasso => {
                Forecaster::Slstm(SlstmParams::init(cfg.hidden, cfg.heads, &mut rng)?)
            }
        };
        Ok(Self {
            variate,
            selector,
            forecaster,
        })
    }

    /// Next-step predictions of the target variate for every window.
    pub fn predict(&self, windows: &WindowSet) -> Result<Array1<f64>> {
        let lags = lag_views(windows);
        let embedded = self.selector.embed_all(&lags)?;
        Ok(self.forecaster.forward_batch(&embedded)?.0)
    }

    /// Mean squared prediction error of the target variate.
    pub fn prediction_loss(&self, windows: &WindowSet) -> Result<f64> {
        let pred = self.predict(windows)?;
        let target = windows.targets().column(self.variate).to_owned();
        Ok((&pred - &target).mapv(|e| e * e).mean().unwrap_or(0.0))
    }

    /// Prediction MSE with gradients for selector `W`, `b` and the forecaster.
    pub fn prediction_grads(&self, windows: &WindowSet) -> Result<PredictionGrads> {
        if windows.num_variates() != self.selector.num_variates() {
            return Err(Error::Shape("windows and selector disagree on V".into()));
        }
        let lags = lag_views(windows);
        let embedded = self.selector.embed_all(&lags)?;
        let (pred, tape) = self.forecaster.forward_batch(&embedded)?;
        let residual = &pred - &windows.targets().column(self.variate);
        let n = residual.len() as f64;
        let loss = residual.mapv(|e| e * e).sum() / n;
        let d_pred = residual.mapv(|e| 2.0 * e / n);
        let (forecaster, d_embedded) = self.forecaster.backward_batch(&embedded, &tape, d_pred.view())?;
        let selector = self.selector.backward(&lags, &d_embedded);
        Ok(PredictionGrads {
            loss,
            selector,
            forecaster,
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_pred: f64,
    pub l_red: f64,
    /// Variates still read by the selector after this step's compression.
    pub active_variates: usize,
    pub lr: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.l_pred.to_bits() == b.l_pred.to_bits()
                    && a.l_red.to_bits() == b.l_red.to_bits()
                    && a.active_variates == b.active_variates
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }

    /// Newline-delimited JSON, one record per line.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// The sub-steps of one optimization step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Gradients,
    ParameterUpdate,
    BetaUpdate,
    Proximal,
}

/// Seed of component `v`'s random streams.
pub fn component_seed(seed: u64, variate: usize) -> u64 {
    seed ^ variate as u64
}

/// Trains the model of variate `variate` on pre-built windows.
pub fn train_component(data: &WindowSet, variate: usize, cfg: &TrainConfig) -> Result<(ComponentModel, TrainHistory)> {
    train_component_observed(data, variate, cfg, &mut |_, _| {})
}

/// [`train_component`] reporting every sub-step to `observe(step, phase)`.
pub fn train_component_observed(
    data: &WindowSet,
    variate: usize,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(usize, StepPhase),
) -> Result<(ComponentModel, TrainHistory)> {
    cfg.validate()?;
    if variate >= data.num_variates() {
        return Err(Error::Shape(format!(
            "variate {variate} out of range for {} variates",
            data.num_variates()
        )));
    }
    if data.context_len() != cfg.context {
        return Err(Error::Shape(format!(
            "windows have context {}, config asks for {}",
            data.context_len(),
            cfg.context
        )));
    }
    let seed = component_seed(cfg.seed, variate);
    let model = ComponentModel::init(variate, data.num_variates(), cfg, seed)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(2);
    fit(model, data, cfg, &mut batch_rng, observe)
}

fn fit(
    mut model: ComponentModel,
    data: &WindowSet,
    cfg: &TrainConfig,
    batch_rng: &mut ChaCha8Rng,
    observe: &mut dyn FnMut(usize, StepPhase),
) -> Result<(ComponentModel, TrainHistory)> {
    let hyper = AdamHyper::from(cfg);
    let v = model.variate;
    let mut selector_opt = AdamState::new([model.selector.w.len(), model.selector.b.len()]);
    let mut forecaster_opt = AdamState::new(model.forecaster.tensors().iter().map(|(_, t)| t.len()));
    let mut beta_opt = AdamState::new([model.selector.beta.len()]);
    let learn_beta = cfg.ablation != Ablation::GroupLasso;
    let start = Instant::now();
    let mut history = TrainHistory {
        records: Vec::with_capacity(cfg.total_steps),
    };

    for k in 0..cfg.total_steps {
        let lr = lr_schedule(k, cfg);
        let batch;
        let windows = match cfg.batch_size {
            Some(size) if size < data.len() => {
                let idx = sample(batch_rng, data.len(), size).into_vec();
                batch = data.select(&idx);
                &batch
            }
            _ => data,
        };
        let grads = model.prediction_grads(windows).map_err(|e| match e {
            Error::NonFiniteGate { gate, step } => {
                log::error!("component {v}: non-finite {gate} gate at sequence step {step}");
                Error::TrainDiverged { component: v, step: k }
            }
            other => other,
        })?;
        if !grads.loss.is_finite() {
            return Err(Error::TrainDiverged { component: v, step: k });
        }
        let reduction = model.selector.reduction_loss(cfg.lambda);
        observe(k, StepPhase::Gradients);

        selector_opt.step(
            vec![
                model.selector.w.as_slice_mut().expect("standard layout"),
                model.selector.b.as_slice_mut().expect("standard layout"),
            ],
            vec![
                grads.selector.w.as_slice().expect("standard layout"),
                grads.selector.b.as_slice().expect("standard layout"),
            ],
            lr,
            hyper,
            0.0,
        );
        let forecaster_grads: Vec<&[f64]> = grads.forecaster.tensors().into_iter().map(|(_, g)| g).collect();
        forecaster_opt.step(
            model.forecaster.tensors_mut().into_iter().map(|(_, p)| p).collect(),
            forecaster_grads,
            lr,
            hyper,
            cfg.weight_decay,
        );
        observe(k, StepPhase::ParameterUpdate);

        if learn_beta && k >= cfg.compression_start {
            let beta = model.selector.beta.as_slice_mut().expect("standard layout");
            let g = reduction.grad_beta.as_slice().expect("standard layout");
            match cfg.beta_optimizer {
                BetaOptimizer::Adam => beta_opt.step(vec![beta], vec![g], lr, hyper, 0.0),
                BetaOptimizer::Sgd => beta.iter_mut().zip(g).for_each(|(b, g)| *b -= lr * g),
            }
            observe(k, StepPhase::BetaUpdate);
        }

        match cfg.ablation {
            Ablation::GroupLasso => model.selector.group_lasso_proximal(cfg.lambda, lr),
            _ => model.selector.proximal_step(cfg.lambda, lr),
        }
        observe(k, StepPhase::Proximal);

        if model.selector.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::TrainDiverged { component: v, step: k });
        }
        history.records.push(StepRecord {
            step: k,
            l_pred: grads.loss,
            l_red: reduction.value,
            active_variates: model.selector.active_variates(),
            lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        if k % 1000 == 0 {
            log::debug!(
                "component {v} step {k}: l_pred {:.5} l_red {:.4} active {}",
                grads.loss,
                reduction.value,
                model.selector.active_variates()
            );
        }
    }
    Ok((model, history))
}

/// Outcome of one component in [`train_all`].
pub type ComponentResult = Result<(ComponentModel, TrainHistory)>;

/// Windows used for training: optionally standardized, stride 1.
pub fn training_windows(dataset: &Dataset, cfg: &TrainConfig) -> Result<WindowSet> {
    if cfg.standardize {
        make_windows(&standardize(dataset).0, cfg.context)
    } else {
        make_windows(dataset, cfg.context)
    }
}

/// Trains all `V` components of a dataset. See [`train_all_windows`].
pub fn train_all(dataset: &Dataset, cfg: &TrainConfig, workers: usize) -> Result<Vec<ComponentResult>> {
    cfg.validate()?;
    let windows = training_windows(dataset, cfg)?;
    train_all_windows(&windows, cfg, workers)
}

/// Trains every component independently, `workers` at a time (0 = all cores).
///
/// Each component's result depends only on `(windows, cfg, v)`, so the output is
/// identical for any worker count. A failing component does not stop the others;
/// results are returned in variate order.
pub fn train_all_windows(windows: &WindowSet, cfg: &TrainConfig, workers: usize) -> Result<Vec<ComponentResult>> {
    cfg.validate()?;
    let v = windows.num_variates();
    let run = |i: usize| {
        let out = train_component(windows, i, cfg);
        if let Err(e) = &out {
            log::error!("component {i} failed: {e}");
        }
        out
    };
    if workers == 1 {
        return Ok((0..v).map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..v).into_par_iter().map(run).collect()))
}

/// Splits per-component results into models and histories, failing on the first error.
pub fn collect_components(results: Vec<ComponentResult>) -> Result<(Vec<ComponentModel>, Vec<TrainHistory>)> {
    let mut models = Vec::with_capacity(results.len());
    let mut histories = Vec::with_capacity(results.len());
    for r in results {
        let (m, h) = r?;
        models.push(m);
        histories.push(h);
    }
    Ok((models, histories))
}

/// Mean number of active variates across components at every step.
pub fn mean_usage(histories: &[TrainHistory]) -> Vec<f64> {
    let steps = histories.iter().map(|h| h.records.len()).min().unwrap_or(0);
    (0..steps)
        .map(|k| {
            histories
                .iter()
                .map(|h| h.records[k].active_variates as f64)
                .sum::<f64>()
                / histories.len() as f64
        })
        .collect()
}

/// Learned `alpha` of every component, by variate (per-lag modes flattened lag-major).
pub fn alphas(models: &[ComponentModel]) -> Vec<Vec<f64>> {
    let mut order: Vec<&ComponentModel> = models.iter().collect();
    order.sort_by_key(|m| m.variate);
    order
        .iter()
        .map(|m| m.selector.alpha().iter().copied().collect())
        .collect()
}
