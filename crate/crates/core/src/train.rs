//! Episodic meta-training, bias-only meta-test adaptation and evaluation.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::degrade::mix_seed;
use crate::diff::{AdamW, Graph, ParameterStore};
use crate::episodes::{meta_test_rounds, sample_episode, Episode, Pair, Task};
use crate::error::{param_err, Error, Result};
use crate::imaging::{Image, ImageScore, MetricsReport, ReportMeta};
use crate::model::{is_encoder_param, stack_images, Network};
use crate::real::Real;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub input_size: usize,
    pub shots_in_batch: usize,
    pub log_every: u64,
    pub smooth_window: usize,
    /// Emit a checkpoint event every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            lr_encoder: 1e-5,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            seed: 0,
            input_size: 64,
            shots_in_batch: 1,
            log_every: 10,
            smooth_window: 100,
            checkpoint_every: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            iterations: 300_000,
            input_size: 224,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots_in_batch == 0 || self.batch_size <= self.shots_in_batch {
            return Err(param_err!(
                "batch_size: {} must exceed shots_in_batch {} (at least one)",
                self.batch_size,
                self.shots_in_batch
            ));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_other", self.lr_other)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(param_err!("{name}: must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(param_err!("beta1/beta2: must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param_err!("weight_decay: must be non-negative"));
        }
        if self.log_every == 0 || self.smooth_window == 0 {
            return Err(param_err!("log_every/smooth_window: must be positive"));
        }
        Ok(())
    }
}

/// Which tensors meta-test adaptation may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    #[default]
    Bias,
    Layernorm,
    All,
}

impl AdaptScope {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptScope::Bias => "bias",
            AdaptScope::Layernorm => "layernorm",
            AdaptScope::All => "all",
        }
    }

    pub fn admits(self, name: &str, is_bias: bool) -> bool {
        match self {
            AdaptScope::Bias => is_bias,
            AdaptScope::Layernorm => name.contains(".norm."),
            AdaptScope::All => true,
        }
    }
}

impl fmt::Display for AdaptScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AdaptScope::Bias, AdaptScope::Layernorm, AdaptScope::All]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "adapt scope",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub iterations: u64,
    pub lr_bias: f64,
    pub seed: u64,
    pub scope: AdaptScope,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AdaptConfig {
    pub fn desk() -> Self {
        Self {
            iterations: 500,
            lr_bias: 1e-4,
            seed: 0,
            scope: AdaptScope::Bias,
        }
    }

    pub fn paper() -> Self {
        Self {
            iterations: 20_000,
            lr_bias: 1e-6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_bias > 0.0 && self.lr_bias.is_finite()) {
            return Err(param_err!("lr_bias: must be positive, got {}", self.lr_bias));
        }
        Ok(())
    }
}

/// Mean absolute error over all elements.
pub fn l1_loss<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<f64> {
    if !pred.same_dims(target) {
        return Err(Error::Shape(format!(
            "l1_loss operands {:?} and {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    if pred.data().is_empty() {
        return Err(Error::Empty("l1_loss over an empty image".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Mean L1 of the restored queries against their clean images, as a graph scalar.
///
/// Support encodings are built inside the graph so gradients reach the encoder
/// through keys and values as well as through the query path.
pub fn episode_loss(
    net: &Network,
    g: &mut Graph<f32>,
    store: &ParameterStore<f32>,
    queries: &[Pair],
    support: &[Pair],
) -> Result<crate::diff::Var> {
    let (sx, st) = net.support_tensors::<f32>(support)?;
    let (sx, st) = (g.input(sx), g.input(st));
    let sv = net.encode_supports(g, store, sx, st)?;
    let xq: Vec<&Image> = queries.iter().map(|p| &*p.degraded).collect();
    let yq: Vec<&Image> = queries.iter().map(|p| &*p.clean).collect();
    let xq = g.input(stack_images(&xq)?);
    let yq = g.input(stack_images(&yq)?);
    let f = net.forward(g, store, xq, &sv)?;
    g.l1_loss(f.restored, yq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
}

/// Running mean over the last `window` losses.
#[derive(Clone, Debug)]
pub struct Smoother {
    window: usize,
    values: VecDeque<f64>,
    sum: f64,
}

impl Smoother {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            values: VecDeque::new(),
            sum: 0.0,
        }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        self.values.push_back(v);
        self.sum += v;
        if self.values.len() > self.window {
            self.sum -= self.values.pop_front().unwrap_or(0.0);
        }
        // recompute to keep the result independent of accumulated rounding
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Weights, optimizer moments and the number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParameterStore<f32>,
    pub optimizer: AdamW<f32>,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(store: ParameterStore<f32>, cfg: &TrainConfig) -> Self {
        Self {
            store,
            optimizer: AdamW::new(cfg.beta1, cfg.beta2, ADAM_EPS, cfg.weight_decay),
            iteration: 0,
        }
    }
}

pub enum TrainEvent<'a> {
    Log(&'a LossRecord),
    Checkpoint(&'a TrainState),
}

/// Episodic meta-training of every parameter.
///
/// Each iteration samples one condition, takes `shots_in_batch` pairs as the
/// support set and the rest of the batch as queries, and takes one AdamW step
/// with the encoder at `lr_encoder` and everything else at `lr_other`. On a
/// non-finite loss or gradient the state is left at the last good step and a
/// `NonFinite` error is returned.
pub fn meta_train(
    net: &Network,
    tasks: &[Task],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("meta-training needs at least one task".into()));
    }
    state.store.set_all_trainable(true);
    let mut smoother = Smoother::new(cfg.smooth_window);
    let mut log = Vec::new();
    while state.iteration < cfg.iterations {
        let it = state.iteration + 1;
        let ep = sample_episode(
            tasks,
            cfg.shots_in_batch,
            cfg.batch_size - cfg.shots_in_batch,
            mix_seed(cfg.seed, it),
        )?;
        state.store.zero_grads();
        let loss = {
            let mut g = Graph::new();
            let loss = episode_loss(net, &mut g, &state.store, &ep.query, &ep.support)?;
            let v = g.value(loss).data()[0].to_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss is {v} at iteration {it}")));
            }
            g.backward_into(loss, &mut state.store)?;
            v
        };
        state.optimizer.step(&mut state.store, it, |p| {
            if is_encoder_param(&p.name) {
                cfg.lr_encoder
            } else {
                cfg.lr_other
            }
        })?;
        state.iteration = it;
        let smoothed = smoother.push(loss);
        if it.is_multiple_of(cfg.log_every) || it == cfg.iterations {
            let rec = LossRecord {
                iteration: it,
                raw_loss: loss,
                smoothed_loss: smoothed,
            };
            on_event(TrainEvent::Log(&rec))?;
            log.push(rec);
        }
        if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every) {
            on_event(TrainEvent::Checkpoint(state))?;
        }
    }
    state.store.zero_grads();
    Ok(log)
}

/// Trains all parameters on one fixed episode, e.g. as an overfitting sanity check.
pub fn train_on_episode(
    net: &Network,
    episode: &Episode,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    state.store.set_all_trainable(true);
    let mut smoother = Smoother::new(cfg.smooth_window);
    let mut log = Vec::new();
    while state.iteration < cfg.iterations {
        let it = state.iteration + 1;
        state.store.zero_grads();
        let mut g = Graph::new();
        let loss = episode_loss(net, &mut g, &state.store, &episode.query, &episode.support)?;
        let v = g.value(loss).data()[0].to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss is {v} at iteration {it}")));
        }
        g.backward_into(loss, &mut state.store)?;
        state.optimizer.step(&mut state.store, it, |p| {
            if is_encoder_param(&p.name) {
                cfg.lr_encoder
            } else {
                cfg.lr_other
            }
        })?;
        state.iteration = it;
        let smoothed = smoother.push(v);
        if it.is_multiple_of(cfg.log_every) || it == cfg.iterations {
            log.push(LossRecord {
                iteration: it,
                raw_loss: v,
                smoothed_loss: smoothed,
            });
        }
    }
    state.store.zero_grads();
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    /// SHA-256 over every tensor outside the scope, before and after.
    pub frozen_digest_before: [u8; 32],
    pub frozen_digest_after: [u8; 32],
    /// Tensors the optimizer updated.
    pub touched: usize,
    pub losses: Vec<f64>,
}

/// Meta-test adaptation on a labeled support set.
///
/// Freezes everything outside `cfg.scope` and cycles through the role schedule
/// of [`meta_test_rounds`], one AdamW step (no weight decay) per iteration.
pub fn meta_test_adapt(
    net: &Network,
    store: &mut ParameterStore<f32>,
    support: &[Pair],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let rounds = meta_test_rounds(support)?;
    let scope = cfg.scope;
    store.set_trainable_where(|p| scope.admits(&p.name, p.is_bias));
    let before = store.digest_where(|p| !p.trainable);
    let mut opt = AdamW::new(0.9, 0.999, ADAM_EPS, 0.0);
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    for it in 1..=cfg.iterations {
        let round = &rounds[((it - 1) % rounds.len() as u64) as usize];
        store.zero_grads();
        let mut g = Graph::new();
        let loss = episode_loss(net, &mut g, store, &round.query, &round.support)?;
        let v = g.value(loss).data()[0].to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("adaptation loss is {v} at iteration {it}")));
        }
        g.backward_into(loss, store)?;
        opt.step_uniform(store, it, cfg.lr_bias)?;
        losses.push(v);
    }
    store.zero_grads();
    Ok(AdaptOutcome {
        frozen_digest_before: before,
        frozen_digest_after: store.digest_where(|p| !p.trainable),
        touched: opt.state.len(),
        losses,
    })
}

/// Restores every pair against a fixed support set and scores it.
pub fn evaluate_model(
    net: &Network,
    store: &ParameterStore<f32>,
    pairs: &[Pair],
    support: &[Pair],
    meta: ReportMeta,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let cache = net.support_cache(store, support)?;
    let mut records: Vec<ImageScore> = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(8) {
        let queries: Vec<&Image> = chunk.iter().map(|p| &*p.degraded).collect();
        let restored = net.restore_cached(store, &queries, &cache)?;
        for (p, y) in chunk.iter().zip(&restored) {
            records.push(MetricsReport::score(&p.id, y, &p.clean)?);
        }
    }
    Ok(MetricsReport::new(meta, records))
}

/// Unique identifier of a set of weights (hex SHA-256 of all tensors).
pub fn checkpoint_id(store: &ParameterStore<f32>) -> String {
    store.digest_all().iter().map(|b| format!("{b:02x}")).collect()
}
