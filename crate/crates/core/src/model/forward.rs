use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::layers::{magicnorm_module, prenorm_block, rms_norm, BlockContext, ModuleOutput};
use super::{Model, ModelConfig, ModelError, ParamVars, Result, Variant};
use crate::objective::prefix_mask;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleTag {
    H,
    L,
    /// One application of the weight-shared looped module.
    Loop,
    /// The whole stack of the standard variant.
    Stack,
}

/// Which module steps get head logits in the trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogitProbes {
    #[default]
    None,
    /// H exits for `hrm`; every step for the other variants.
    HExits,
    All,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Number of trailing module steps that receive gradient. `None` means
    /// all of them.
    pub grad_horizon: Option<usize>,
    pub record_attention: bool,
    pub record_blocks: bool,
    pub logit_probes: LogitProbes,
}

#[derive(Clone, Debug)]
pub struct TraceStep<S> {
    pub index: usize,
    pub tag: ModuleTag,
    /// Tape node of the state leaving this step.
    pub var: Var,
    pub state: Tensor<S>,
    pub logits: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct AttentionRecord<S> {
    pub step: usize,
    pub layer: usize,
    /// `[heads, t, t]`
    pub probs: Tensor<S>,
}

/// Residual stream after one block, before any exit norm.
#[derive(Clone, Debug)]
pub struct BlockRecord<S> {
    pub step: usize,
    pub layer: usize,
    pub state: Tensor<S>,
}

#[derive(Clone, Debug, Default)]
pub struct RecurrentTrace<S> {
    pub steps: Vec<TraceStep<S>>,
    pub attention: Vec<AttentionRecord<S>>,
    pub blocks: Vec<BlockRecord<S>>,
}

impl<S: Scalar> RecurrentTrace<S> {
    pub fn tags(&self) -> Vec<ModuleTag> {
        self.steps.iter().map(|s| s.tag).collect()
    }

    /// Steps that end with an H-module update.
    pub fn h_exits(&self) -> impl Iterator<Item = &TraceStep<S>> {
        self.steps.iter().filter(|s| s.tag == ModuleTag::H)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    /// `[t, vocab]`
    pub logits: Var,
    pub trace: RecurrentTrace<S>,
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Forward passes issued by the current thread so far.
pub fn forward_passes() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

/// Module tag order of one forward pass.
pub fn module_schedule(config: &ModelConfig) -> Vec<ModuleTag> {
    match config.variant {
        Variant::Hrm => (0..config.h_cycles)
            .flat_map(|_| {
                std::iter::repeat_n(ModuleTag::L, config.l_steps_per_cycle).chain([ModuleTag::H])
            })
            .collect(),
        Variant::Looped => vec![ModuleTag::Loop; config.loop_count],
        Variant::Standard => vec![ModuleTag::Stack],
    }
}

struct Prepared<'a> {
    embedded: Var,
    ctx: BlockContext<'a>,
}

fn check_inputs(config: &ModelConfig, tokens: &[u32], prefix_len: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::Contract("empty token sequence".into()));
    }
    if tokens.len() > config.context_len {
        return Err(ModelError::Length {
            len: tokens.len(),
            context: config.context_len,
        });
    }
    if prefix_len > tokens.len() {
        return Err(ModelError::Contract(format!(
            "prefix_len {prefix_len} exceeds sequence length {}",
            tokens.len()
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::Token {
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

fn prepare<'a, S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    params: &ParamVars,
    tokens: &[u32],
    mask: &'a crate::tensor::BoolTensor,
    positions: &'a [usize],
) -> Result<Prepared<'a>> {
    let rows = tape.gather_rows(params.get("embed")?, tokens)?;
    let embedded = tape.scale(rows, S::lit((config.d_model as f64).sqrt()))?;
    Ok(Prepared {
        embedded,
        ctx: BlockContext {
            mask,
            positions,
            rope_theta: config.rope_theta,
            norm_eps: config.norm_eps,
            n_heads: config.n_heads,
            head_dim: config.head_dim,
        },
    })
}

struct Recorder<'o, S> {
    opts: &'o ForwardOptions,
    head: Tensor<S>,
    trace: RecurrentTrace<S>,
}

impl<S: Scalar> Recorder<'_, S> {
    fn module(&mut self, tape: &Tape<S>, step: usize, tag: ModuleTag, out: &ModuleOutput) -> Result<()> {
        if self.opts.record_attention {
            for (layer, heads) in out.attention.iter().enumerate() {
                self.trace.attention.push(stack_heads(tape, step, layer, heads)?);
            }
        }
        if self.opts.record_blocks {
            for (layer, &b) in out.blocks.iter().enumerate() {
                self.trace.blocks.push(BlockRecord {
                    step,
                    layer,
                    state: tape.value(b).clone(),
                });
            }
        }
        self.step(tape, step, tag, out.state)
    }

    fn step(&mut self, tape: &Tape<S>, index: usize, tag: ModuleTag, var: Var) -> Result<()> {
        let state = tape.value(var).clone();
        let probe = match self.opts.logit_probes {
            LogitProbes::None => false,
            LogitProbes::HExits => tag != ModuleTag::L,
            LogitProbes::All => true,
        };
        let logits = if probe { Some(state.matmul(&self.head)?) } else { None };
        self.trace.steps.push(TraceStep {
            index,
            tag,
            var,
            state,
            logits,
        });
        Ok(())
    }

    /// The last step's probe is the returned logits themselves, so the two
    /// are bitwise equal.
    fn finish(mut self, tape: &Tape<S>, logits: Var) -> RecurrentTrace<S> {
        if let Some(last) = self.trace.steps.last_mut() {
            if last.logits.is_some() {
                last.logits = Some(tape.value(logits).clone());
            }
        }
        self.trace
    }
}

fn stack_heads<S: Scalar>(tape: &Tape<S>, step: usize, layer: usize, heads: &[Var]) -> Result<AttentionRecord<S>> {
    let t = tape.value(heads[0]).rows();
    let mut data = Vec::with_capacity(heads.len() * t * t);
    for &h in heads {
        data.extend_from_slice(tape.value(h).data());
    }
    Ok(AttentionRecord {
        step,
        layer,
        probs: Tensor::new(vec![heads.len(), t, t], data)?,
    })
}

fn check_horizon(k: usize, min: usize, total: usize) -> Result<()> {
    if k < min || k > total {
        return Err(ModelError::Horizon { k, min, total });
    }
    Ok(())
}

/// Runs any variant. `prefix_len` sets the bidirectional attention region;
/// zero gives a plain causal mask.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    params: &ParamVars,
    tokens: &[u32],
    prefix_len: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<S>> {
    match config.variant {
        Variant::Hrm => hrm_forward(tape, config, params, tokens, prefix_len, opts),
        _ => variant_forward(tape, config, params, tokens, prefix_len, opts),
    }
}

/// The hierarchical model: `(L × l_steps, H) × h_cycles` module updates,
/// head applied to the final H state.
pub fn hrm_forward<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    params: &ParamVars,
    tokens: &[u32],
    prefix_len: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<S>> {
    if config.variant != Variant::Hrm {
        return Err(ModelError::Contract(format!("hrm_forward on {:?} config", config.variant)));
    }
    check_inputs(config, tokens, prefix_len)?;
    let schedule = module_schedule(config);
    let n = schedule.len();
    let k = opts.grad_horizon.unwrap_or(n);
    check_horizon(k, 2, n)?;
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));

    let t = tokens.len();
    let mask = prefix_mask(prefix_len, t);
    let positions: Vec<usize> = (0..t).collect();
    let p = prepare(tape, config, params, tokens, &mask, &positions)?;
    let h_mod = params.module("h.", config.layers_per_module)?;
    let l_mod = params.module("l.", config.layers_per_module)?;
    let head = params.get("head")?;
    let mut rec = Recorder {
        opts,
        head: tape.value(head).clone(),
        trace: RecurrentTrace::default(),
    };

    let mut z_h = rms_norm(tape, p.embedded, config.norm_eps)?;
    let zeros = tape.constant(Tensor::zeros(&[t, config.d_model]))?;
    let mut z_l = tape.add(zeros, params.get("z_l_init")?)?;

    // Steps before `cut` run without recording gradients; the states handed
    // to step `cut` are detached.
    let cut = n - k;
    let grad_was = tape.grad_enabled();
    if cut > 0 {
        tape.set_grad_enabled(false);
    }
    for (s, &tag) in schedule.iter().enumerate() {
        if s == cut && cut > 0 {
            tape.set_grad_enabled(grad_was);
            z_h = tape.detach(z_h);
            z_l = tape.detach(z_l);
        }
        let out = match tag {
            ModuleTag::L => {
                let inj = tape.add(z_h, p.embedded)?;
                let out = magicnorm_module(tape, z_l, inj, &p.ctx, &l_mod, config.exit_norm)?;
                z_l = out.state;
                out
            }
            _ => {
                let out = magicnorm_module(tape, z_h, z_l, &p.ctx, &h_mod, config.exit_norm)?;
                z_h = out.state;
                out
            }
        };
        rec.module(tape, s, tag, &out)?;
    }
    tape.set_grad_enabled(grad_was);
    let logits = tape.matmul(z_h, head)?;
    Ok(ForwardOutput {
        logits,
        trace: rec.finish(tape, logits),
    })
}

/// Baselines: `standard` (block stack, final norm, head) and `looped`
/// (one weight-shared module applied `loop_count` times, embeddings injected
/// at every application).
pub fn variant_forward<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    params: &ParamVars,
    tokens: &[u32],
    prefix_len: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<S>> {
    if config.variant == Variant::Hrm {
        return Err(ModelError::Contract("variant_forward takes standard or looped configs".into()));
    }
    check_inputs(config, tokens, prefix_len)?;
    let schedule = module_schedule(config);
    let n = schedule.len();
    let k = opts.grad_horizon.unwrap_or(n);
    check_horizon(k, 1, n)?;
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));

    let t = tokens.len();
    let mask = prefix_mask(prefix_len, t);
    let positions: Vec<usize> = (0..t).collect();
    let p = prepare(tape, config, params, tokens, &mask, &positions)?;
    let module = params.module("", config.layers_per_module)?;
    let head = params.get("head")?;
    let mut rec = Recorder {
        opts,
        head: tape.value(head).clone(),
        trace: RecurrentTrace::default(),
    };

    let state = match config.variant {
        Variant::Standard => {
            let mut h = p.embedded;
            let mut out = ModuleOutput {
                state: h,
                blocks: Vec::new(),
                attention: Vec::new(),
            };
            for layer in &module.layers {
                let (next, probs) = prenorm_block(tape, h, &p.ctx, layer)?;
                h = next;
                out.blocks.push(h);
                out.attention.push(probs);
            }
            out.state = rms_norm(tape, h, config.norm_eps)?;
            rec.module(tape, 0, ModuleTag::Stack, &out)?;
            out.state
        }
        _ => {
            let mut z = tape.constant(Tensor::zeros(&[t, config.d_model]))?;
            let cut = n - k;
            let grad_was = tape.grad_enabled();
            if cut > 0 {
                tape.set_grad_enabled(false);
            }
            for s in 0..n {
                if s == cut && cut > 0 {
                    tape.set_grad_enabled(grad_was);
                    z = tape.detach(z);
                }
                let out = magicnorm_module(tape, z, p.embedded, &p.ctx, &module, config.exit_norm)?;
                z = out.state;
                rec.module(tape, s, ModuleTag::Loop, &out)?;
            }
            tape.set_grad_enabled(grad_was);
            z
        }
    };
    let logits = tape.matmul(state, head)?;
    Ok(ForwardOutput {
        logits,
        trace: rec.finish(tape, logits),
    })
}

impl<S: Scalar> Model<S> {
    /// Gradient-free forward pass returning plain logits and the trace.
    pub fn evaluate(
        &self,
        tokens: &[u32],
        prefix_len: usize,
        opts: &ForwardOptions,
    ) -> Result<(Tensor<S>, RecurrentTrace<S>)> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let vars = self.params.bind(&mut tape, |_| false)?;
        let out = forward(&mut tape, &self.config, &vars, tokens, prefix_len, opts)?;
        Ok((tape.value(out.logits).clone(), out.trace))
    }
}
