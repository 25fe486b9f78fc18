//! Test-only oracles. Nothing here calls into the reverse pass; gradients
//! are estimated purely from function values.
#![allow(dead_code)]

use hrm_core::tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluates `f` on fresh leaves built from `inputs`.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.param(t.clone()).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Central finite differences of a scalar function w.r.t. every input entry.
pub fn finite_difference<F>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut grads = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((eval_scalar(f, &plus) - eval_scalar(f, &minus)) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Reduces an arbitrary output to a scalar with a fixed random projection so
/// that every output entry influences the checked gradient.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed);
    let weights = random_tensor(&mut r, &shape, 1.0);
    let w = tape.constant(weights)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Plain row-major reimplementations of the model math, written without the
/// tape. Used as independent oracles.
pub mod naive {
    pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    pub fn rms_norm(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
        x.chunks(d)
            .flat_map(|row| {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let r = 1.0 / (ms + eps).sqrt();
                row.iter().map(move |v| v * r).collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn rope(x: &[f64], hd: usize, positions: &[usize], theta: f64) -> Vec<f64> {
        let mut out = x.to_vec();
        for (r, &p) in positions.iter().enumerate() {
            for i in 0..hd / 2 {
                let angle = p as f64 * theta.powf(-(2.0 * i as f64) / hd as f64);
                let (a, b) = (x[r * hd + 2 * i], x[r * hd + 2 * i + 1]);
                out[r * hd + 2 * i] = a * angle.cos() - b * angle.sin();
                out[r * hd + 2 * i + 1] = a * angle.sin() + b * angle.cos();
            }
        }
        out
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn column_block(x: &[f64], cols: usize, start: usize, len: usize) -> Vec<f64> {
        x.chunks(cols).flat_map(|r| r[start..start + len].to_vec()).collect()
    }

    pub struct Layer<'a> {
        pub q: &'a [f64],
        pub k: &'a [f64],
        pub v: &'a [f64],
        pub o: &'a [f64],
        pub gate: &'a [f64],
        pub gate_bias: &'a [f64],
        pub a: &'a [f64],
        pub b: &'a [f64],
        pub c: &'a [f64],
    }

    /// Gated multi-head attention on already-normalized `x`. With
    /// `gated = false` the gate is skipped.
    pub fn attention(
        x: &[f64],
        t: usize,
        d: usize,
        heads: usize,
        l: &Layer,
        allowed: &dyn Fn(usize, usize) -> bool,
        theta: f64,
        gated: bool,
    ) -> Vec<f64> {
        let hd = d / heads;
        let q = matmul(x, t, d, l.q, d);
        let k = matmul(x, t, d, l.k, d);
        let v = matmul(x, t, d, l.v, d);
        let pos: Vec<usize> = (0..t).collect();
        let mut joined = vec![0.0; t * d];
        for h in 0..heads {
            let qh = rope(&column_block(&q, d, h * hd, hd), hd, &pos, theta);
            let kh = rope(&column_block(&k, d, h * hd, hd), hd, &pos, theta);
            let vh = column_block(&v, d, h * hd, hd);
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..hd).map(|c| qh[i * hd + c] * kh[j * hd + c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let max = (0..t)
                    .filter(|&j| allowed(i, j))
                    .map(|j| scores[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = (0..t)
                    .map(|j| if allowed(i, j) { (scores[j] - max).exp() } else { 0.0 })
                    .collect();
                let z: f64 = w.iter().sum();
                for c in 0..hd {
                    joined[i * d + h * hd + c] = (0..t).map(|j| w[j] / z * vh[j * hd + c]).sum();
                }
            }
        }
        if gated {
            let g = matmul(x, t, d, l.gate, d);
            for i in 0..t * d {
                joined[i] *= sigmoid(g[i] + l.gate_bias[i % d]);
            }
        }
        matmul(&joined, t, d, l.o, d)
    }

    pub fn swiglu(x: &[f64], t: usize, d: usize, hidden: usize, l: &Layer) -> Vec<f64> {
        let a = matmul(x, t, d, l.a, hidden);
        let b = matmul(x, t, d, l.b, hidden);
        let h: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a * sigmoid(*a) * b).collect();
        matmul(&h, t, hidden, l.c, d)
    }

    pub fn block(
        x: &[f64],
        t: usize,
        d: usize,
        heads: usize,
        hidden: usize,
        l: &Layer,
        allowed: &dyn Fn(usize, usize) -> bool,
        theta: f64,
        eps: f64,
    ) -> Vec<f64> {
        let a = attention(&rms_norm(x, d, eps), t, d, heads, l, allowed, theta, true);
        let h: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
        let m = swiglu(&rms_norm(&h, d, eps), t, d, hidden, l);
        h.iter().zip(&m).map(|(h, m)| h + m).collect()
    }
}
