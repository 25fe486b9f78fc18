mod common;

use common::naive::{self, Layer};
use common::{random_tensor, rng};
use hrm_core::model::{
    gated_attention, magicnorm_module, prenorm_block, rms_norm, rope_apply, swiglu_mlp, BlockContext,
    LayerVars, ModelConfig, ModuleVars, Parameters, Variant,
};
use hrm_core::tensor::{BoolTensor, Scalar, Tape, Tensor};
use proptest::prelude::*;

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt()
}

fn ctx<'a>(cfg: &ModelConfig, mask: &'a BoolTensor, positions: &'a [usize]) -> BlockContext<'a> {
    BlockContext {
        mask,
        positions,
        rope_theta: cfg.rope_theta,
        norm_eps: cfg.norm_eps,
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim,
    }
}

fn naive_layer<'a>(p: &'a Parameters<f64>, base: &str) -> Layer<'a> {
    let g = |s: &str| p.get(&format!("{base}.{s}")).unwrap().data();
    Layer {
        q: g("attn.q"),
        k: g("attn.k"),
        v: g("attn.v"),
        o: g("attn.o"),
        gate: g("attn.gate"),
        gate_bias: g("attn.gate_bias"),
        a: g("mlp.a"),
        b: g("mlp.b"),
        c: g("mlp.c"),
    }
}

fn zero_sublayers<S: Scalar>(p: &mut Parameters<S>) {
    for (name, t) in p.iter_mut() {
        if name.contains("layers.") {
            t.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

#[test]
fn rms_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 4], &[2.0; 4]).unwrap()).unwrap();
    let y = rms_norm(&mut tape, x, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));

    let z = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let y = rms_norm(&mut tape, z, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut r = rng(4);
    let x = tape.constant(random_tensor(&mut r, &[3, 1536], 5.0)).unwrap();
    let y = rms_norm(&mut tape, x, 1e-6).unwrap();
    for i in 0..3 {
        assert!((rms(tape.value(y).row(i)) - 1.0).abs() < 1e-5);
    }
}

#[test]
fn rope_is_identity_at_position_zero_and_preserves_pair_norms() {
    let mut r = rng(5);
    let mut tape = Tape::<f64>::new();
    let qt = random_tensor(&mut r, &[3, 8], 1.0);
    let q = tape.constant(qt.clone()).unwrap();
    let k = tape.constant(random_tensor(&mut r, &[3, 8], 1.0)).unwrap();
    let (q0, _) = rope_apply(&mut tape, q, k, &[0, 0, 0], 4, 1e4).unwrap();
    assert_eq!(tape.value(q0), &qt);

    let (q1, _) = rope_apply(&mut tape, q, k, &[3, 17, 250], 4, 1e4).unwrap();
    let rotated = tape.value(q1).data();
    for (a, b) in qt.data().chunks(2).zip(rotated.chunks(2)) {
        assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-6);
    }
}

#[test]
fn rope_scores_depend_only_on_offsets() {
    let mut r = rng(6);
    let q = random_tensor(&mut r, &[1, 16], 1.0);
    let k = random_tensor(&mut r, &[1, 16], 1.0);
    let score = |p1: usize, p2: usize| {
        let mut tape = Tape::<f64>::new();
        let qv = tape.constant(q.clone()).unwrap();
        let kv = tape.constant(k.clone()).unwrap();
        let qr = tape.rope(qv, &[p1], 1e4).unwrap();
        let kr = tape.rope(kv, &[p2], 1e4).unwrap();
        let a = tape.value(qr).data();
        let b = tape.value(kr).data();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    };
    for (p1, p2, s) in [(3, 1, 5), (0, 9, 100), (40, 2, 7)] {
        assert!((score(p1, p2) - score(p1 + s, p2 + s)).abs() < 1e-5);
    }
}

fn attention_setup(seed: u64, t: usize) -> (ModelConfig, Parameters<f64>, Tensor<f64>) {
    let cfg = ModelConfig::tiny(Variant::Standard, 8, 2, 1, 10);
    let p = Parameters::<f64>::init(&cfg, seed);
    let mut r = rng(seed + 100);
    let x = random_tensor(&mut r, &[t, 8], 1.0);
    (cfg, p, x)
}

fn run_attention(cfg: &ModelConfig, p: &Parameters<f64>, x: &Tensor<f64>, mask: &BoolTensor) -> Tensor<f64> {
    let t = x.rows();
    let positions: Vec<usize> = (0..t).collect();
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, |_| true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let layer = pv.layer("", 0).unwrap();
    let (out, probs) = gated_attention(&mut tape, xv, &ctx(cfg, mask, &positions), &layer).unwrap();
    assert_eq!(probs.len(), cfg.n_heads);
    tape.value(out).clone()
}

#[test]
fn closed_gate_silences_attention() {
    let (cfg, mut p, x) = attention_setup(1, 5);
    p.get_mut("layers.0.attn.gate").unwrap().data_mut().fill(0.0);
    p.get_mut("layers.0.attn.gate_bias").unwrap().data_mut().fill(-40.0);
    let mask = BoolTensor::from_fn(5, 5, |i, j| j <= i);
    let out = run_attention(&cfg, &p, &x, &mask);
    let max = out.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 1e-3, "max |out| = {max}");
}

#[test]
fn open_gate_equals_ungated_attention() {
    let (cfg, mut p, x) = attention_setup(2, 5);
    p.get_mut("layers.0.attn.gate_bias").unwrap().data_mut().fill(40.0);
    let mask = BoolTensor::from_fn(5, 5, |i, j| j < 2 || j <= i);
    let out = run_attention(&cfg, &p, &x, &mask);
    let oracle = naive::attention(
        x.data(),
        5,
        8,
        2,
        &naive_layer(&p, "layers.0"),
        &|i, j| j < 2 || j <= i,
        1e4,
        false,
    );
    for (a, b) in out.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn single_token_attention_matches_hand_computation() {
    let (cfg, mut p, x) = attention_setup(3, 1);
    let mut r = rng(33);
    p.get_mut("layers.0.attn.gate_bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(random_tensor(&mut r, &[8], 1.0).data());
    let mask = BoolTensor::from_fn(1, 1, |_, _| true);
    let positions = [0];
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, |_| true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let layer = pv.layer("", 0).unwrap();
    let (out, probs) = gated_attention(&mut tape, xv, &ctx(&cfg, &mask, &positions), &layer).unwrap();
    for h in probs {
        assert_eq!(tape.value(h).data(), &[1.0]);
    }
    // out = (sigmoid(x·Wg + b) ∘ x·Wv)·Wo
    let l = naive_layer(&p, "layers.0");
    let v = naive::matmul(x.data(), 1, 8, l.v, 8);
    let g = naive::matmul(x.data(), 1, 8, l.gate, 8);
    let gated: Vec<f64> = (0..8).map(|i| naive::sigmoid(g[i] + l.gate_bias[i]) * v[i]).collect();
    let expected = naive::matmul(&gated, 1, 8, l.o, 8);
    for (a, b) in tape.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn layer_leaves(tape: &mut Tape<f64>, p: &Parameters<f64>) -> LayerVars {
    p.bind(tape, |_| true).unwrap().layer("", 0).unwrap()
}

#[test]
fn swiglu_examples() {
    let mut cfg = ModelConfig::tiny(Variant::Standard, 4, 2, 1, 10);
    cfg.mlp_hidden = Some(6);
    let mut p = Parameters::<f64>::init(&cfg, 9);
    let mut r = rng(10);
    let x = random_tensor(&mut r, &[3, 4], 1.0);

    let mut tape = Tape::new();
    let layer = layer_leaves(&mut tape, &p);
    let zero = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
    let y = swiglu_mlp(&mut tape, zero, &layer).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let xv = tape.constant(x.clone()).unwrap();
    let y = swiglu_mlp(&mut tape, xv, &layer).unwrap();
    let oracle = naive::swiglu(x.data(), 3, 4, 6, &naive_layer(&p, "layers.0"));
    for (a, b) in tape.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }

    p.get_mut("layers.0.mlp.a").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::new();
    let layer = layer_leaves(&mut tape, &p);
    let xv = tape.constant(x).unwrap();
    let y = swiglu_mlp(&mut tape, xv, &layer).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_weight_block_is_the_identity_with_unit_jacobian() {
    let cfg = ModelConfig::tiny(Variant::Standard, 8, 2, 1, 10);
    let mut p = Parameters::<f64>::init(&cfg, 11);
    zero_sublayers(&mut p);
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[3, 8], 2.0);
    let mask = BoolTensor::from_fn(3, 3, |i, j| j <= i);
    let positions = [0, 1, 2];
    let mut tape = Tape::new();
    let layer = layer_leaves(&mut tape, &p);
    let xv = tape.param(x.clone()).unwrap();
    let (y, _) = prenorm_block(&mut tape, xv, &ctx(&cfg, &mask, &positions), &layer).unwrap();
    assert_eq!(tape.value(y), &x);
    for i in 0..x.len() {
        let mut seed = vec![0.0; x.len()];
        seed[i] = 1.0;
        let g = tape.backward_with_seed(y, &seed).unwrap();
        let row = g.wrt(&tape, xv);
        for (j, &v) in row.data().iter().enumerate() {
            assert_eq!(v, if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn residual_blocks_accumulate_variance() {
    let cfg = ModelConfig::tiny(Variant::Standard, 16, 2, 1, 10);
    let mask = BoolTensor::from_fn(6, 6, |i, j| j <= i);
    let positions: Vec<usize> = (0..6).collect();
    let variance = |t: &Tensor<f64>| {
        let n = t.len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    };
    let mut grew = 0;
    let mut ratio_sum = 0.0;
    for seed in 0..100 {
        let p = Parameters::<f64>::init(&cfg, seed);
        let mut r = rng(1000 + seed);
        let x = random_tensor(&mut r, &[6, 16], 1.0);
        let mut tape = Tape::new();
        let layer = layer_leaves(&mut tape, &p);
        let xv = tape.constant(x.clone()).unwrap();
        let (y, _) = prenorm_block(&mut tape, xv, &ctx(&cfg, &mask, &positions), &layer).unwrap();
        let ratio = variance(tape.value(y)) / variance(&x);
        ratio_sum += ratio;
        grew += usize::from(ratio >= 1.0);
    }
    assert!(grew >= 95, "variance grew in only {grew}/100 draws");
    assert!(ratio_sum / 100.0 > 1.0);
}

#[test]
fn zero_module_reduces_to_exit_norm() {
    let cfg = ModelConfig::tiny(Variant::Looped, 8, 2, 2, 10);
    let mut p = Parameters::<f64>::init(&cfg, 13);
    zero_sublayers(&mut p);
    let mut r = rng(14);
    let z = random_tensor(&mut r, &[4, 8], 3.0);
    let mask = BoolTensor::from_fn(4, 4, |i, j| j <= i);
    let positions: Vec<usize> = (0..4).collect();
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, |_| true).unwrap();
    let module = pv.module("", 2).unwrap();
    let zv = tape.constant(z.clone()).unwrap();
    let inj = tape.constant(Tensor::zeros(&[4, 8])).unwrap();
    let out = magicnorm_module(&mut tape, zv, inj, &ctx(&cfg, &mask, &positions), &module, true).unwrap();
    assert_eq!(tape.value(out.state).data(), naive::rms_norm(z.data(), 8, cfg.norm_eps).as_slice());
    assert_eq!(out.blocks.len(), 2);
}

fn rms_trajectory(exit_norm: bool, steps: usize) -> Vec<Vec<f64>> {
    let cfg = ModelConfig::tiny(Variant::Looped, 16, 2, 2, 10);
    let p = Parameters::<f32>::init(&cfg, 15);
    let mut r = rng(16);
    let t = 5;
    let e: Tensor<f32> = random_tensor(&mut r, &[t, 16], 1.0).cast();
    let mask = BoolTensor::from_fn(t, t, |i, j| j <= i);
    let positions: Vec<usize> = (0..t).collect();
    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let pv = p.bind(&mut tape, |_| false).unwrap();
    let module: ModuleVars = pv.module("", 2).unwrap();
    let c = ctx(&cfg, &mask, &positions);
    let ev = tape.constant(e).unwrap();
    let mut z = tape.constant(Tensor::zeros(&[t, 16])).unwrap();
    let mut out = Vec::new();
    for _ in 0..steps {
        z = magicnorm_module(&mut tape, z, ev, &c, &module, exit_norm).unwrap().state;
        let v = tape.value(z);
        out.push((0..t).map(|i| rms(&v.cast::<f64>().row(i).to_vec())).collect());
    }
    out
}

#[test]
fn exit_norm_bounds_state_while_prenorm_grows() {
    for step in rms_trajectory(true, 100) {
        for r in step {
            assert!((r - 1.0).abs() < 1e-3, "rms {r}");
        }
    }
    let pre = rms_trajectory(false, 100);
    let mean: Vec<f64> = pre.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    for w in mean.windows(2) {
        assert!(w[1] > w[0], "pre-norm state rms not increasing: {} -> {}", w[0], w[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn module_exit_is_unit_rms(seed in 0u64..1000, t in 1usize..6, scale in 0.1f64..20.0) {
        let cfg = ModelConfig::tiny(Variant::Looped, 8, 2, 1, 10);
        let p = Parameters::<f32>::init(&cfg, seed);
        let mut r = rng(seed);
        let z: Tensor<f32> = random_tensor(&mut r, &[t, 8], scale).cast();
        let inj: Tensor<f32> = random_tensor(&mut r, &[t, 8], scale).cast();
        let mask = BoolTensor::from_fn(t, t, |i, j| j <= i);
        let positions: Vec<usize> = (0..t).collect();
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape, |_| true).unwrap();
        let module = pv.module("", 1).unwrap();
        let zv = tape.constant(z).unwrap();
        let iv = tape.constant(inj).unwrap();
        let out = magicnorm_module(&mut tape, zv, iv, &ctx(&cfg, &mask, &positions), &module, true).unwrap();
        let v = tape.value(out.state).cast::<f64>();
        for i in 0..t {
            prop_assert!((rms(v.row(i)) - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zeroed_block_is_identity(seed in 0u64..1000, t in 1usize..5) {
        let cfg = ModelConfig::tiny(Variant::Standard, 8, 2, 1, 10);
        let mut p = Parameters::<f64>::init(&cfg, seed);
        zero_sublayers(&mut p);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[t, 8], 3.0);
        let mask = BoolTensor::from_fn(t, t, |i, j| j <= i);
        let positions: Vec<usize> = (0..t).collect();
        let mut tape = Tape::new();
        let layer = layer_leaves(&mut tape, &p);
        let xv = tape.constant(x.clone()).unwrap();
        let (y, _) = prenorm_block(&mut tape, xv, &ctx(&cfg, &mask, &positions), &layer).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}
