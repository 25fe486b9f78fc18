//! Gradient statistics, Jacobian growth, depth probes and FLOPs accounting.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{magicnorm_module, BlockContext, ForwardOptions, Model, ModelError, ModuleTag, RecurrentTrace, Variant};
use crate::objective::attention_entropy;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("no values to summarize")]
    Empty,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

pub const DEFAULT_EPS_G: f64 = 1e-12;
pub const DEFAULT_TAIL_QUANTILE: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradComponent {
    H,
    L,
    Other,
}

impl GradComponent {
    pub fn of(param_name: &str) -> Self {
        if param_name.starts_with("h.") {
            Self::H
        } else if param_name.starts_with("l.") {
            Self::L
        } else {
            Self::Other
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub mean_abs: f64,
    pub median_abs: f64,
    /// `Std(ln(|g| + eps_g))`
    pub log_dispersion: f64,
    /// `(q_tail + eps_g) / (q_50 + eps_g)` of `|g|`.
    pub tail_to_median: f64,
    pub count: usize,
    /// Set when every entry is zero.
    pub all_zero: bool,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn grad_magnitude_stats(values: &[f64], eps_g: f64, tail_quantile: f64) -> Result<GradStats> {
    if values.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    let mean_abs = abs.iter().sum::<f64>() / n;
    let logs: Vec<f64> = abs.iter().map(|a| (a + eps_g).ln()).collect();
    let log_mean = logs.iter().sum::<f64>() / n;
    let log_var = logs.iter().map(|l| (l - log_mean).powi(2)).sum::<f64>() / n;
    let median_abs = quantile_sorted(&abs, 0.5);
    let tail = quantile_sorted(&abs, tail_quantile);
    let all_zero = abs[abs.len() - 1] == 0.0;
    if all_zero {
        log::warn!("all {} gradient entries are zero", abs.len());
    }
    Ok(GradStats {
        mean_abs,
        median_abs,
        log_dispersion: log_var.sqrt(),
        tail_to_median: (tail + eps_g) / (median_abs + eps_g),
        count: abs.len(),
        all_zero,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEstimate {
    pub depth: usize,
    /// Median spectral-norm estimate over probes.
    pub growth: f64,
    pub per_probe: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct PowerIteration {
    pub probes: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            probes: 3,
            max_iters: 100,
            tol: 1e-9,
            seed: 0,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

/// Spectral norm of the `d`-fold composed Jacobian of `step` around the
/// trajectory from `x0`, for `d = 1..=depth`. Each iteration applies `J`
/// by tangent replay and `Jᵀ` by a reverse pass.
pub fn jacobian_growth<F>(step: F, x0: &Tensor<f64>, depth: usize, cfg: &PowerIteration) -> Result<Vec<GrowthEstimate>>
where
    F: Fn(&mut Tape<f64>, Var) -> crate::tensor::Result<Var>,
{
    if depth == 0 || cfg.probes == 0 {
        return Err(DiagnosticsError::Contract("depth and probe count must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.param(x0.clone())?;
    let mut outs = Vec::with_capacity(depth);
    let mut cur = x;
    for _ in 0..depth {
        cur = step(&mut tape, cur)?;
        outs.push(cur);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut estimates = Vec::with_capacity(depth);
    for (i, &out) in outs.iter().enumerate() {
        let mut per_probe = Vec::with_capacity(cfg.probes);
        let mut converged = true;
        for _ in 0..cfg.probes {
            let mut v: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            let mut sigma = 0.0;
            let mut done = false;
            for _ in 0..cfg.max_iters {
                let jv = tape.jvp(&[(x, &v)], out)?;
                let new_sigma = norm(&jv);
                let jtjv = tape.backward_with_seed(out, &jv)?.wrt(&tape, x).into_data();
                let n = norm(&jtjv);
                let delta = (new_sigma - sigma).abs();
                sigma = new_sigma;
                if n == 0.0 {
                    done = true;
                    break;
                }
                v = jtjv.into_iter().map(|x| x / n).collect();
                if delta <= cfg.tol * sigma.max(1.0) {
                    done = true;
                    break;
                }
            }
            converged &= done;
            per_probe.push(sigma);
        }
        estimates.push(GrowthEstimate {
            depth: i + 1,
            growth: median(&per_probe),
            per_probe,
            converged,
        });
    }
    Ok(estimates)
}

/// [`jacobian_growth`] of a trained model's recurrent module: the L-module
/// for `hrm` (injection `z_H⁰ + e` held fixed, starting from `z_l_init`) or
/// the shared module for `looped` (starting from zeros).
pub fn module_jacobian_growth(
    model: &Model<f64>,
    tokens: &[u32],
    prefix_len: usize,
    depth: usize,
    cfg: &PowerIteration,
) -> Result<Vec<GrowthEstimate>> {
    let c = &model.config;
    let prefix = match c.variant {
        Variant::Hrm => "l.",
        Variant::Looped => "",
        Variant::Standard => {
            return Err(DiagnosticsError::Contract("the standard variant has no recurrent module".into()))
        }
    };
    if tokens.is_empty() || prefix_len > tokens.len() || tokens.len() > c.context_len {
        return Err(DiagnosticsError::Contract(format!(
            "{} tokens with prefix_len {prefix_len}",
            tokens.len()
        )));
    }
    let t = tokens.len();
    let (inj, x0) = {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let pv = model.params.bind(&mut tape, |_| false)?;
        let rows = tape.gather_rows(pv.get("embed")?, tokens)?;
        let e = tape.scale(rows, (c.d_model as f64).sqrt())?;
        let zeros = tape.constant(Tensor::zeros(&[t, c.d_model]))?;
        let (inj, x0) = if c.variant == Variant::Hrm {
            let z_h = tape.rms_norm(e, c.norm_eps)?;
            (tape.add(z_h, e)?, tape.add(zeros, pv.get("z_l_init")?)?)
        } else {
            (e, zeros)
        };
        (tape.value(inj).clone(), tape.value(x0).clone())
    };
    let mask = crate::objective::prefix_mask(prefix_len, t);
    let positions: Vec<usize> = (0..t).collect();
    let bound = std::cell::OnceCell::new();
    let step = |tape: &mut Tape<f64>, z: Var| -> crate::tensor::Result<Var> {
        let (module, inj) = match bound.get() {
            Some(b) => b,
            None => {
                let pv = model.params.bind(tape, |_| false).map_err(model_to_tensor)?;
                let module = pv.module(prefix, c.layers_per_module).map_err(model_to_tensor)?;
                let inj = tape.constant(inj.clone())?;
                bound.get_or_init(|| (module, inj))
            }
        };
        let ctx = BlockContext {
            mask: &mask,
            positions: &positions,
            rope_theta: c.rope_theta,
            norm_eps: c.norm_eps,
            n_heads: c.n_heads,
            head_dim: c.head_dim,
        };
        magicnorm_module(tape, z, *inj, &ctx, module, c.exit_norm)
            .map(|o| o.state)
            .map_err(model_to_tensor)
    };
    jacobian_growth(step, &x0, depth, cfg)
}

fn model_to_tensor(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Dimension {
            op: "module step",
            detail: other.to_string(),
        },
    }
}

fn check_pair<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiagnosticsError::Contract(format!(
            "state shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `‖z_n − z_{n−1}‖` per position, averaged over positions, for each
/// adjacent pair.
pub fn block_diff_norms<S: Scalar>(states: &[Tensor<S>]) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(DiagnosticsError::Contract("need at least two states".into()));
    }
    states
        .windows(2)
        .map(|w| {
            check_pair(&w[0], &w[1])?;
            let d = w[0].cols();
            let rows = w[0].len() / d;
            let total: f64 = w[0]
                .data()
                .chunks_exact(d)
                .zip(w[1].data().chunks_exact(d))
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (y.to_f64().unwrap() - x.to_f64().unwrap()).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            Ok(total / rows as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSeries {
    pub values: Vec<f64>,
    /// Positions skipped because one of the states was zero there.
    pub skipped: usize,
}

/// Position-wise cosine between consecutive states, averaged over positions.
pub fn block_cosine<S: Scalar>(states: &[Tensor<S>]) -> Result<CosineSeries> {
    if states.len() < 2 {
        return Err(DiagnosticsError::Contract("need at least two states".into()));
    }
    let mut skipped = 0;
    let mut values = Vec::with_capacity(states.len() - 1);
    for w in states.windows(2) {
        check_pair(&w[0], &w[1])?;
        let d = w[0].cols();
        let mut total = 0.0;
        let mut used = 0usize;
        for (a, b) in w[0].data().chunks_exact(d).zip(w[1].data().chunks_exact(d)) {
            let a: Vec<f64> = a.iter().map(|v| v.to_f64().unwrap()).collect();
            let b: Vec<f64> = b.iter().map(|v| v.to_f64().unwrap()).collect();
            let (na, nb) = (norm(&a), norm(&b));
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            total += (dot / (na * nb)).clamp(-1.0, 1.0);
            used += 1;
        }
        values.push(if used == 0 { 0.0 } else { total / used as f64 });
    }
    if skipped > 0 {
        log::warn!("block_cosine skipped {skipped} zero-norm positions");
    }
    Ok(CosineSeries { values, skipped })
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

/// `KL(p ‖ q)` from log-probabilities.
pub fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(probe ‖ final)`
    #[default]
    ProbeToFinal,
    /// `KL(final ‖ probe)`
    FinalToProbe,
}

/// Per-probe KL against the final distribution, averaged over positions.
/// A probe that is bitwise equal to `final_logits` scores exactly 0.
pub fn logit_lens_kl<S: Scalar>(probes: &[Tensor<S>], final_logits: &Tensor<S>, direction: KlDirection) -> Result<Vec<f64>> {
    let v = final_logits.cols();
    let rows = final_logits.len() / v;
    let finals: Vec<Vec<f64>> = (0..rows)
        .map(|i| log_softmax(&final_logits.data()[i * v..(i + 1) * v].iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>()))
        .collect();
    probes
        .iter()
        .map(|p| {
            check_pair(p, final_logits)?;
            if p == final_logits {
                return Ok(0.0);
            }
            let total: f64 = (0..rows)
                .map(|i| {
                    let lp = log_softmax(&p.data()[i * v..(i + 1) * v].iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>());
                    match direction {
                        KlDirection::ProbeToFinal => kl_from_logs(&lp, &finals[i]),
                        KlDirection::FinalToProbe => kl_from_logs(&finals[i], &lp),
                    }
                })
                .sum();
            Ok(total / rows as f64)
        })
        .collect()
}

/// Which states the logit lens decodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensSites {
    /// Every module step (blocks grouped for the standard variant).
    #[default]
    AllSteps,
    /// H-module exits only (falls back to all steps for the baselines).
    HExits,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthProbe {
    pub diff_norms: Vec<f64>,
    pub cosines: Vec<f64>,
    pub cosine_skipped: usize,
    pub kl: Vec<f64>,
    /// Mean attention entropy per block application, in execution order.
    pub attention_entropy: Vec<f64>,
    pub samples: usize,
}

impl DepthProbe {
    fn accumulate(&mut self, other: &DepthProbe) {
        fn add(a: &mut Vec<f64>, b: &[f64]) {
            if a.is_empty() {
                a.resize(b.len(), 0.0);
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add(&mut self.diff_norms, &other.diff_norms);
        add(&mut self.cosines, &other.cosines);
        add(&mut self.kl, &other.kl);
        add(&mut self.attention_entropy, &other.attention_entropy);
        self.cosine_skipped += other.cosine_skipped;
        self.samples += other.samples;
    }

    fn scale(&mut self, f: f64) {
        for v in [&mut self.diff_norms, &mut self.cosines, &mut self.kl, &mut self.attention_entropy] {
            v.iter_mut().for_each(|x| *x *= f);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DepthOptions {
    pub sites: LensSites,
    pub direction: KlDirection,
    /// Standard variant: consecutive blocks merged into one probe.
    pub blocks_per_probe: usize,
}

impl Default for DepthOptions {
    fn default() -> Self {
        Self {
            sites: LensSites::AllSteps,
            direction: KlDirection::ProbeToFinal,
            blocks_per_probe: 1,
        }
    }
}

/// Depth-ordered states of one pass: module-step states for the recurrent
/// variants, RMS-normalized block outputs (every `blocks_per_probe`-th) for
/// the standard stack.
pub fn depth_states<S: Scalar>(config_variant: Variant, trace: &RecurrentTrace<S>, blocks_per_probe: usize, eps: f64) -> Vec<Tensor<S>> {
    match config_variant {
        Variant::Standard => {
            let k = blocks_per_probe.max(1);
            trace
                .blocks
                .iter()
                .enumerate()
                .filter(|(i, _)| (i + 1) % k == 0 || i + 1 == trace.blocks.len())
                .map(|(_, b)| normalize_rows(&b.state, eps))
                .collect()
        }
        _ => trace.steps.iter().map(|s| s.state.clone()).collect(),
    }
}

fn normalize_rows<S: Scalar>(t: &Tensor<S>, eps: f64) -> Tensor<S> {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone()).expect("finite state");
    let n = tape.rms_norm(v, S::lit(eps)).expect("finite state");
    tape.value(n).clone()
}

/// Depth probes of one sequence.
pub fn depth_probe<S: Scalar>(model: &Model<S>, tokens: &[u32], prefix_len: usize, opts: &DepthOptions) -> Result<DepthProbe> {
    let fopts = ForwardOptions {
        record_attention: true,
        record_blocks: model.config.variant == Variant::Standard,
        ..Default::default()
    };
    let (logits, trace) = model.evaluate(tokens, prefix_len, &fopts)?;
    let mut states = depth_states(model.config.variant, &trace, opts.blocks_per_probe, model.config.norm_eps);
    let head = model.params.get("head").ok_or_else(|| ModelError::MissingParam("head".into()))?;
    let mut lens: Vec<Tensor<S>> = match (model.config.variant, opts.sites) {
        (Variant::Hrm, LensSites::HExits) => trace
            .steps
            .iter()
            .filter(|s| s.tag == ModuleTag::H)
            .map(|s| s.state.matmul(head))
            .collect::<crate::tensor::Result<_>>()?,
        _ => states.iter().map(|s| s.matmul(head)).collect::<crate::tensor::Result<_>>()?,
    };
    if let Some(last) = lens.last_mut() {
        *last = logits.clone();
    }
    if states.len() < 2 {
        // a single-block stack still has its embedding as a predecessor
        states.insert(0, states[0].clone());
    }
    let cos = block_cosine(&states)?;
    Ok(DepthProbe {
        diff_norms: block_diff_norms(&states)?,
        cosines: cos.values,
        cosine_skipped: cos.skipped,
        kl: logit_lens_kl(&lens, &logits, opts.direction)?,
        attention_entropy: trace.attention.iter().map(|r| attention_entropy(&r.probs)).collect(),
        samples: 1,
    })
}

/// Depth probes averaged over a batch of `(tokens, prefix_len)` samples.
pub fn depth_probe_batch<S: Scalar>(model: &Model<S>, batch: &[(Vec<u32>, usize)], opts: &DepthOptions) -> Result<DepthProbe> {
    if batch.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut acc = DepthProbe::default();
    for (tokens, prefix) in batch {
        acc.accumulate(&depth_probe(model, tokens, *prefix, opts)?);
    }
    acc.scale(1.0 / batch.len() as f64);
    Ok(acc)
}

/// Dense training estimate `6·N·D`.
pub fn flops_dense(n_params: f64, tokens: f64) -> f64 {
    6.0 * n_params * tokens
}

/// `(2·fwd + 4·bwd)·N·D`, where the step equivalents count module
/// applications weighted by their share of the core parameters.
pub fn flops_recurrent(n_core: f64, tokens: f64, fwd_step_equiv: f64, bwd_step_equiv: f64) -> f64 {
    (2.0 * fwd_step_equiv + 4.0 * bwd_step_equiv) * n_core * tokens
}

/// Forward and backward step equivalents of a configuration when gradients
/// flow through the last `horizon` module steps.
pub fn step_equivalents(config: &crate::model::ModelConfig, horizon: usize) -> (f64, f64) {
    match config.variant {
        // two equally sized modules: each step touches half the core
        Variant::Hrm => {
            let n = config.total_module_steps() as f64;
            (n / 2.0, horizon.min(config.total_module_steps()) as f64 / 2.0)
        }
        Variant::Looped => (config.loop_count as f64, horizon.min(config.loop_count) as f64),
        Variant::Standard => (1.0, 1.0),
    }
}

/// `m.mme±XX` with two significant decimals, e.g. `1.02e21`.
pub fn format_sci(v: f64) -> String {
    format!("{v:.2e}")
}

/// Plot-ready `step<TAB>metric<TAB>value` lines.
pub fn columnar(rows: &[(usize, &str, f64)]) -> String {
    let mut out = String::from("step\tmetric\tvalue\n");
    for (step, metric, value) in rows {
        let _ = writeln!(out, "{step}\t{metric}\t{value}");
    }
    out
}

impl DepthProbe {
    pub fn rows(&self) -> Vec<(usize, &'static str, f64)> {
        let mut rows = Vec::new();
        for (i, v) in self.diff_norms.iter().enumerate() {
            rows.push((i + 1, "block_diff_norm", *v));
        }
        for (i, v) in self.cosines.iter().enumerate() {
            rows.push((i + 1, "block_cosine", *v));
        }
        for (i, v) in self.kl.iter().enumerate() {
            rows.push((i, "logit_lens_kl", *v));
        }
        for (i, v) in self.attention_entropy.iter().enumerate() {
            rows.push((i, "attention_entropy", *v));
        }
        rows
    }
}
