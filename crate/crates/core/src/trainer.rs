//! Training loop: horizon warmup, Adam-atan2, warmup-then-constant learning
//! rate and a weight EMA.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{grad_magnitude_stats, GradComponent, DEFAULT_EPS_G, DEFAULT_TAIL_QUANTILE};
use crate::model::{forward, Checkpoint, ForwardOptions, Model, ModelError, Parameters, Variant};
use crate::objective::{response_nll_sum, token_nlls, ObjectiveError, PackedExample};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("non-finite gradient in {0}")]
    NonFiniteGrad(String),
    #[error("gradient for {0} missing or misshaped")]
    GradShape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diagnostics(#[from] crate::diagnostics::DiagnosticsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which target positions the loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTarget {
    /// Response tokens only.
    #[default]
    Response,
    /// Every next-token position of the sequence.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Bidirectional over the instruction, causal over the response.
    #[default]
    Prefix,
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub lr_warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Parameters exempt from weight decay.
    pub no_decay: Vec<String>,
    /// Scale constants of the atan2 update: `a·atan2(m̂, b·sqrt(v̂))`.
    pub atan2_a: f64,
    pub atan2_b: f64,
    pub ema_decay: f64,
    pub batch_tokens: usize,
    pub k_start: usize,
    pub k_end: usize,
    /// `None` means 10% of `total_steps`.
    pub k_warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub seed: u64,
    pub loss_target: LossTarget,
    pub attention: AttentionMode,
    /// Gradient statistics every n steps (0 disables them).
    pub grad_stats_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2.2e-4,
            lr_warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            no_decay: vec!["embed".into(), "z_l_init".into()],
            atan2_a: 1.0,
            atan2_b: 1.0,
            ema_decay: 0.9999,
            batch_tokens: 196_608,
            k_start: 2,
            k_end: 5,
            k_warmup_steps: None,
            total_steps: 10_000,
            seed: 0,
            loss_target: LossTarget::Response,
            attention: AttentionMode::Prefix,
            grad_stats_every: 1,
        }
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::Config {
        field,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn k_warmup(&self) -> usize {
        self.k_warmup_steps.unwrap_or(self.total_steps / 10)
    }

    /// `min_k` is 2 for the hierarchical model, 1 for the looped baseline.
    pub fn validate(&self, total_module_steps: usize, min_k: usize) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(bad("peak_lr", "must be positive and finite"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(field, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(bad("ema_decay", "must lie in [0, 1]"));
        }
        if !(self.atan2_a > 0.0 && self.atan2_b > 0.0) {
            return Err(bad("atan2_a", "scale constants must be positive"));
        }
        if self.batch_tokens == 0 {
            return Err(bad("batch_tokens", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(bad("total_steps", "must be positive"));
        }
        if self.k_start < min_k || self.k_start > self.k_end {
            return Err(bad("k_start", format!("need {min_k} <= k_start <= k_end")));
        }
        if self.k_end > total_module_steps {
            return Err(bad(
                "k_end",
                format!("{} exceeds the {total_module_steps} module steps per pass", self.k_end),
            ));
        }
        Ok(())
    }
}

/// `round(k_start + (k_end − k_start)·min(1, step / k_warmup))`, rounding
/// half away from zero.
pub fn tbptt_horizon(step: usize, cfg: &TrainConfig) -> usize {
    let warm = cfg.k_warmup();
    let frac = if warm == 0 { 1.0 } else { (step as f64 / warm as f64).min(1.0) };
    let k = cfg.k_start as f64 + (cfg.k_end as f64 - cfg.k_start as f64) * frac;
    k.round() as usize
}

/// Linear warmup from 0 to `peak_lr`, then constant.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.lr_warmup_steps == 0 {
        return cfg.peak_lr;
    }
    cfg.peak_lr * (step as f64 / cfg.lr_warmup_steps as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Parameters<S>,
    pub v: Parameters<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(like: &Parameters<S>) -> Self {
        let zeros = Parameters::from_map(
            like.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        );
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub type GradMap<S> = BTreeMap<String, Tensor<S>>;

/// Largest `|a·atan2(m̂, b·sqrt(v̂))|` of an update, before the `lr` factor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub max_update_term: f64,
}

/// One Adam-atan2 step with decoupled weight decay:
/// `θ ← θ − lr·a·atan2(m̂, b·sqrt(v̂)) − lr·wd·θ`.
pub fn adam_atan2_step<S: Scalar>(
    params: &mut Parameters<S>,
    grads: &GradMap<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<UpdateReport> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGrad(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut max_term = 0.0f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name).ok_or_else(|| TrainError::GradShape(name.clone()))?;
        let p = params.get_mut(&name).expect("name from params");
        if g.shape() != p.shape() {
            return Err(TrainError::GradShape(name));
        }
        let decay = if cfg.no_decay.iter().any(|n| *n == name) { 0.0 } else { cfg.weight_decay };
        let m = state.m.get_mut(&name).expect("optimizer mirrors params").data_mut();
        let v = state.v.get_mut(&name).expect("optimizer mirrors params").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = g.to_f64().unwrap();
            let mf = b1 * m.to_f64().unwrap() + (1.0 - b1) * gf;
            let vf = b2 * v.to_f64().unwrap() + (1.0 - b2) * gf * gf;
            *m = S::lit(mf);
            *v = S::lit(vf);
            let term = cfg.atan2_a * (mf / c1).atan2(cfg.atan2_b * (vf / c2).sqrt());
            max_term = max_term.max(term.abs());
            let pf = p.to_f64().unwrap();
            *p = S::lit(pf - lr * term - lr * decay * pf);
        }
    }
    Ok(UpdateReport {
        max_update_term: max_term,
    })
}

/// `ema ← decay·ema + (1 − decay)·params`
pub fn ema_update<S: Scalar>(ema: &mut Parameters<S>, params: &Parameters<S>, decay: f64) {
    for (name, e) in ema.iter_mut() {
        let p = params.get(name).expect("ema mirrors params");
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = S::lit(decay * e.to_f64().unwrap() + (1.0 - decay) * p.to_f64().unwrap());
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Training objective of the batch.
    pub loss: f64,
    /// Response-token NLL of the same batch.
    pub response_loss: f64,
    pub lr: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub examples: usize,
    pub tokens: usize,
    pub max_update_term: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_mean_abs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_log_dispersion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_tail_to_median: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_h_mean_abs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_l_mean_abs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_completed: usize,
    pub tokens_seen: usize,
    /// Set when the data ran out before `total_steps`.
    pub early_stop: Option<String>,
}

/// Next batch: whole examples until `batch_tokens` is reached, always at
/// least one. Empty only when the data is exhausted.
pub fn take_batch<I: Iterator<Item = PackedExample>>(data: &mut std::iter::Peekable<I>, batch_tokens: usize) -> Vec<PackedExample> {
    let mut batch = Vec::new();
    let mut used = 0;
    while let Some(ex) = data.peek() {
        if !batch.is_empty() && used + ex.len() > batch_tokens {
            break;
        }
        used += ex.len();
        batch.push(data.next().expect("peeked"));
        if used >= batch_tokens {
            break;
        }
    }
    batch
}

/// Model, optimizer and EMA owned by one training run.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub model: Model<S>,
    pub ema: Parameters<S>,
    pub opt: OptimizerState<S>,
    pub cfg: TrainConfig,
    step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig) -> Result<Self> {
        model.config.validate()?;
        let min_k = if model.config.variant == Variant::Hrm { 2 } else { 1 };
        let steps = model.config.total_module_steps();
        match model.config.variant {
            Variant::Standard => {}
            _ => cfg.validate(steps, min_k)?,
        }
        let ema = model.params.clone();
        let opt = OptimizerState::new(&model.params);
        Ok(Self {
            model,
            ema,
            opt,
            cfg,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn horizon(&self, step: usize) -> usize {
        match self.model.config.variant {
            Variant::Standard => 1,
            _ => tbptt_horizon(step, &self.cfg),
        }
    }

    /// Mean loss and gradients of a batch at horizon `k`, without updating.
    pub fn loss_and_grads(&self, batch: &[PackedExample], k: usize) -> Result<(f64, f64, GradMap<S>)> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let cfg = &self.model.config;
        let mut tape = Tape::<S>::new();
        let train_z = cfg.train_z_l_init;
        let vars = self.model.params.bind(&mut tape, |n| train_z || n != "z_l_init")?;
        let opts = ForwardOptions {
            grad_horizon: (cfg.variant != Variant::Standard).then_some(k),
            ..Default::default()
        };
        let mut total = None;
        let mut count = 0usize;
        let mut response_sum = 0.0;
        let mut response_count = 0usize;
        for ex in batch {
            let prefix = match self.cfg.attention {
                AttentionMode::Prefix => ex.prefix_len,
                AttentionMode::Causal => 0,
            };
            let out = forward(&mut tape, cfg, &vars, &ex.token_ids, prefix, &opts)?;
            let full_mask;
            let mask = match self.cfg.loss_target {
                LossTarget::Response => &ex.loss_mask,
                LossTarget::Full => {
                    full_mask = vec![true; ex.len()];
                    &full_mask
                }
            };
            let (sum, n) = response_nll_sum(&mut tape, out.logits, &ex.token_ids, mask)?;
            count += n;
            total = Some(match total {
                None => sum,
                Some(acc) => tape.add(acc, sum)?,
            });
            // response NLL of the same logits, off-tape
            let nlls = token_nlls(tape.value(out.logits), &ex.token_ids, &ex.loss_mask)?;
            response_sum += nlls.iter().sum::<f64>();
            response_count += nlls.len();
        }
        if count == 0 {
            return Err(ObjectiveError::EmptyResponse.into());
        }
        let loss = tape.scale(total.expect("non-empty batch"), S::lit(1.0 / count as f64))?;
        let grads = tape.backward(loss)?;
        let map = vars
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(&tape, *v)))
            .collect();
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap();
        let response = if response_count == 0 { f64::NAN } else { response_sum / response_count as f64 };
        Ok((loss_value, response, map))
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[PackedExample]) -> Result<StepMetrics> {
        let k = self.horizon(self.step);
        let lr = lr_schedule(self.step, &self.cfg);
        let (loss, response_loss, grads) = self.loss_and_grads(batch, k)?;
        let mut metrics = StepMetrics {
            step: self.step,
            loss,
            response_loss,
            lr,
            k,
            examples: batch.len(),
            tokens: batch.iter().map(|e| e.len()).sum(),
            max_update_term: 0.0,
            grad_mean_abs: None,
            grad_log_dispersion: None,
            grad_tail_to_median: None,
            grad_h_mean_abs: None,
            grad_l_mean_abs: None,
        };
        if self.cfg.grad_stats_every > 0 && self.step % self.cfg.grad_stats_every == 0 {
            let mut all = Vec::new();
            let mut h = Vec::new();
            let mut l = Vec::new();
            for (name, g) in &grads {
                let vals = g.data().iter().map(|v| v.to_f64().unwrap());
                match GradComponent::of(name) {
                    GradComponent::H => h.extend(vals.clone()),
                    GradComponent::L => l.extend(vals.clone()),
                    GradComponent::Other => {}
                }
                all.extend(vals);
            }
            let s = grad_magnitude_stats(&all, DEFAULT_EPS_G, DEFAULT_TAIL_QUANTILE)?;
            metrics.grad_mean_abs = Some(s.mean_abs);
            metrics.grad_log_dispersion = Some(s.log_dispersion);
            metrics.grad_tail_to_median = Some(s.tail_to_median);
            if !h.is_empty() {
                metrics.grad_h_mean_abs = Some(grad_magnitude_stats(&h, DEFAULT_EPS_G, DEFAULT_TAIL_QUANTILE)?.mean_abs);
            }
            if !l.is_empty() {
                metrics.grad_l_mean_abs = Some(grad_magnitude_stats(&l, DEFAULT_EPS_G, DEFAULT_TAIL_QUANTILE)?.mean_abs);
            }
        }
        let report = adam_atan2_step(&mut self.model.params, &grads, &mut self.opt, lr, &self.cfg)?;
        metrics.max_update_term = report.max_update_term;
        ema_update(&mut self.ema, &self.model.params, self.cfg.ema_decay);
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `total_steps` or until `data` runs dry. Batches are filled
    /// greedily up to `batch_tokens` (at least one example each).
    pub fn run<I, F>(&mut self, data: I, mut on_step: F) -> Result<TrainReport>
    where
        I: IntoIterator<Item = PackedExample>,
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        let mut data = data.into_iter().peekable();
        let mut tokens_seen = 0;
        log::info!(
            "training {} steps, horizon {}→{} over {} steps",
            self.cfg.total_steps,
            self.cfg.k_start,
            self.cfg.k_end,
            self.cfg.k_warmup()
        );
        while self.step < self.cfg.total_steps {
            let batch = take_batch(&mut data, self.cfg.batch_tokens);
            if batch.is_empty() {
                let msg = format!("data exhausted after {} of {} steps", self.step, self.cfg.total_steps);
                log::warn!("{msg}");
                return Ok(TrainReport {
                    steps_completed: self.step,
                    tokens_seen,
                    early_stop: Some(msg),
                });
            }
            let used: usize = batch.iter().map(PackedExample::len).sum();
            tokens_seen += used;
            let m = self.train_step(&batch)?;
            on_step(&m)?;
        }
        Ok(TrainReport {
            steps_completed: self.step,
            tokens_seen,
            early_stop: None,
        })
    }

    /// The EMA weights as a model (used for evaluation and release).
    pub fn ema_model(&self) -> Model<S> {
        Model {
            config: self.model.config.clone(),
            params: self.ema.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            ema: Some(self.ema.clone()),
            meta: serde_json::json!({
                "step": self.step,
                "optimizer_step": self.opt.step,
                "train": self.cfg,
            }),
        }
    }
}
