use crate::tensor::{BoolTensor, Scalar, Tape, Var};

use super::Result;

/// Per-call settings shared by every block of one forward pass.
#[derive(Clone, Debug)]
pub struct BlockContext<'a> {
    pub mask: &'a BoolTensor,
    pub positions: &'a [usize],
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub n_heads: usize,
    pub head_dim: usize,
}

/// Tape handles for one pre-norm block.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub gate: Var,
    pub gate_bias: Var,
    pub mlp_a: Var,
    pub mlp_b: Var,
    pub mlp_c: Var,
}

#[derive(Clone, Debug)]
pub struct ModuleVars {
    pub layers: Vec<LayerVars>,
}

pub fn rms_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, eps: f64) -> Result<Var> {
    Ok(tape.rms_norm(x, S::lit(eps))?)
}

/// Rotary embedding of `[t, n_heads·head_dim]` queries and keys, head by head.
pub fn rope_apply<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
) -> Result<(Var, Var)> {
    let mut rotate = |x: Var| -> Result<Var> {
        let width = tape.value(x).cols();
        if width == head_dim {
            return Ok(tape.rope(x, positions, theta)?);
        }
        let heads = (0..width / head_dim)
            .map(|h| {
                let part = tape.narrow_cols(x, h * head_dim, head_dim)?;
                tape.rope(part, positions, theta)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat_cols(&heads)?)
    };
    let q = rotate(q)?;
    let k = rotate(k)?;
    Ok((q, k))
}

/// Multi-head attention on the (already normalized) block input `x`.
/// Returns the projected output and one `[t, t]` probability node per head.
pub fn gated_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    ctx: &BlockContext<'_>,
    layer: &LayerVars,
) -> Result<(Var, Vec<Var>)> {
    let hd = ctx.head_dim;
    let q = tape.matmul(x, layer.q)?;
    let k = tape.matmul(x, layer.k)?;
    let v = tape.matmul(x, layer.v)?;
    let scale = S::lit(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(ctx.n_heads);
    let mut probs = Vec::with_capacity(ctx.n_heads);
    for h in 0..ctx.n_heads {
        let qh = tape.narrow_cols(q, h * hd, hd)?;
        let kh = tape.narrow_cols(k, h * hd, hd)?;
        let vh = tape.narrow_cols(v, h * hd, hd)?;
        let qh = tape.rope(qh, ctx.positions, ctx.rope_theta)?;
        let kh = tape.rope(kh, ctx.positions, ctx.rope_theta)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.masked_softmax(scores, ctx.mask)?;
        heads.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let pre_gate = tape.matmul(x, layer.gate)?;
    let pre_gate = tape.add(pre_gate, layer.gate_bias)?;
    let gate = tape.sigmoid(pre_gate)?;
    let gated = tape.mul(joined, gate)?;
    Ok((tape.matmul(gated, layer.o)?, probs))
}

/// `(silu(x·A) ∘ (x·B))·C`
pub fn swiglu_mlp<S: Scalar>(tape: &mut Tape<S>, x: Var, layer: &LayerVars) -> Result<Var> {
    let a = tape.matmul(x, layer.mlp_a)?;
    let a = tape.silu(a)?;
    let b = tape.matmul(x, layer.mlp_b)?;
    let h = tape.mul(a, b)?;
    Ok(tape.matmul(h, layer.mlp_c)?)
}

/// `h + Attn(Norm(h))`, then `h + Mlp(Norm(h))`.
pub fn prenorm_block<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    ctx: &BlockContext<'_>,
    layer: &LayerVars,
) -> Result<(Var, Vec<Var>)> {
    let xn = rms_norm(tape, h, ctx.norm_eps)?;
    let (attn, probs) = gated_attention(tape, xn, ctx, layer)?;
    let h = tape.add(h, attn)?;
    let xn = rms_norm(tape, h, ctx.norm_eps)?;
    let mlp = swiglu_mlp(tape, xn, layer)?;
    Ok((tape.add(h, mlp)?, probs))
}

/// Output of one module application.
#[derive(Clone, Debug)]
pub struct ModuleOutput {
    pub state: Var,
    /// Residual stream after each block, before the exit norm.
    pub blocks: Vec<Var>,
    /// Per layer, per head attention probabilities.
    pub attention: Vec<Vec<Var>>,
}

/// `Norm(z + injection + Σ sublayers)`: the blocks run on `z + injection`,
/// and the result is normalized at exit when `exit_norm` is set.
pub fn magicnorm_module<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    injection: Var,
    ctx: &BlockContext<'_>,
    module: &ModuleVars,
    exit_norm: bool,
) -> Result<ModuleOutput> {
    let mut h = tape.add(z, injection)?;
    let mut blocks = Vec::with_capacity(module.layers.len());
    let mut attention = Vec::with_capacity(module.layers.len());
    for layer in &module.layers {
        let (next, probs) = prenorm_block(tape, h, ctx, layer)?;
        h = next;
        blocks.push(h);
        attention.push(probs);
    }
    let state = if exit_norm { rms_norm(tape, h, ctx.norm_eps)? } else { h };
    Ok(ModuleOutput {
        state,
        blocks,
        attention,
    })
}
