mod common;

use std::collections::BTreeMap;

use hrm_core::data::synthetic::CopyReverseTask;
use hrm_core::model::{Model, ModelConfig, Parameters, Variant};
use hrm_core::tensor::Tensor;
use hrm_core::trainer::{
    adam_atan2_step, ema_update, lr_schedule, take_batch, tbptt_horizon, GradMap, OptimizerState, StepMetrics, TrainConfig,
    TrainError, Trainer,
};
use proptest::prelude::*;

fn params(values: &[f64]) -> Parameters<f64> {
    let mut map = BTreeMap::new();
    map.insert("w".to_string(), Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    Parameters::from_map(map)
}

fn grads(values: &[f64]) -> GradMap<f64> {
    let mut map = BTreeMap::new();
    map.insert("w".to_string(), Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    map
}

fn w(p: &Parameters<f64>) -> Vec<f64> {
    p.get("w").unwrap().data().to_vec()
}

#[test]
fn horizon_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.k_warmup(), 1_000);
    assert_eq!(tbptt_horizon(0, &cfg), 2);
    assert_eq!(tbptt_horizon(500, &cfg), 4);
    assert_eq!(tbptt_horizon(1_000, &cfg), 5);
    assert_eq!(tbptt_horizon(1_000_000, &cfg), 5);
    let instant = TrainConfig { k_warmup_steps: Some(0), ..cfg };
    assert_eq!(tbptt_horizon(0, &instant), 5);
}

proptest! {
    #[test]
    fn horizon_is_monotone_and_clamped(warm in 1usize..500, a in 0usize..2000, b in 0usize..2000) {
        let cfg = TrainConfig { k_warmup_steps: Some(warm), ..Default::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(tbptt_horizon(lo, &cfg) <= tbptt_horizon(hi, &cfg));
        prop_assert!((2..=5).contains(&tbptt_horizon(hi, &cfg)));
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert_eq!(lr_schedule(1_000, &cfg), 1.1e-4);
    assert_eq!(lr_schedule(2_000, &cfg), 2.2e-4);
    assert_eq!(lr_schedule(1_000_000, &cfg), 2.2e-4);
}

#[test]
fn zero_gradient_moves_only_by_weight_decay() {
    let cfg = TrainConfig::default();
    let mut p = params(&[0.5, -2.0, 0.0]);
    let mut st = OptimizerState::new(&p);
    let lr = 1e-3;
    let r = adam_atan2_step(&mut p, &grads(&[0.0; 3]), &mut st, lr, &cfg).unwrap();
    assert_eq!(r.max_update_term, 0.0);
    let expected: Vec<f64> = [0.5, -2.0, 0.0].iter().map(|x| x - lr * cfg.weight_decay * x).collect();
    assert_eq!(w(&p), expected);
}

#[test]
fn no_decay_list_is_respected() {
    let cfg = TrainConfig::default();
    let mut map = BTreeMap::new();
    map.insert("embed".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap());
    let mut p = Parameters::from_map(map.clone());
    let mut st = OptimizerState::new(&p);
    adam_atan2_step(&mut p, &map.iter().map(|(k, _)| (k.clone(), Tensor::zeros(&[1]))).collect(), &mut st, 0.1, &cfg)
        .unwrap();
    assert_eq!(p.get("embed").unwrap().data(), &[1.0]);
}

#[test]
fn gradient_scale_invariance() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut rng = common::rng(9);
    let init = common::random_tensor(&mut rng, &[16], 1.0);
    let (mut a, mut b) = (params(init.data()), params(init.data()));
    let (mut sa, mut sb) = (OptimizerState::new(&a), OptimizerState::new(&b));
    for _ in 0..50 {
        let g = common::random_tensor(&mut rng, &[16], 1.0);
        let g10: Vec<f64> = g.data().iter().map(|x| 10.0 * x).collect();
        adam_atan2_step(&mut a, &grads(g.data()), &mut sa, 1e-2, &cfg).unwrap();
        adam_atan2_step(&mut b, &grads(&g10), &mut sb, 1e-2, &cfg).unwrap();
    }
    for (x, y) in w(&a).iter().zip(w(&b)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn constant_gradient_fixed_point() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let lr = 1e-3;
    let mut p = params(&[0.0, 0.0]);
    let mut st = OptimizerState::new(&p);
    let mut prev = w(&p);
    for _ in 0..10_000 {
        adam_atan2_step(&mut p, &grads(&[0.3, -7.0]), &mut st, lr, &cfg).unwrap();
        let now = w(&p);
        let d: Vec<f64> = prev.iter().zip(&now).map(|(a, b)| (a - b) / lr).collect();
        assert!((d[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-4);
        assert!((d[1] + std::f64::consts::FRAC_PI_4).abs() < 1e-4);
        prev = now;
    }
}

proptest! {
    #[test]
    fn update_term_is_bounded(seed: u64, scale in -20.0f64..20.0, steps in 1usize..20) {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut rng = common::rng(seed);
        let mut p = params(&[0.0; 8]);
        let mut st = OptimizerState::new(&p);
        let lr = 0.01;
        for _ in 0..steps {
            let g: Vec<f64> = common::random_tensor(&mut rng, &[8], 1.0).data().iter().map(|x| x * scale.exp()).collect();
            let before = w(&p);
            let r = adam_atan2_step(&mut p, &grads(&g), &mut st, lr, &cfg).unwrap();
            prop_assert!(r.max_update_term <= std::f64::consts::FRAC_PI_2);
            for (a, b) in before.iter().zip(w(&p)) {
                prop_assert!((a - b).abs() <= lr * std::f64::consts::FRAC_PI_2 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn ema_stays_in_history_hull(seed: u64, decay in 0.0f64..1.0) {
        let mut rng = common::rng(seed);
        let start = common::random_tensor(&mut rng, &[6], 1.0);
        let mut ema = params(start.data());
        let mut lo = start.data().to_vec();
        let mut hi = start.data().to_vec();
        for _ in 0..30 {
            let p = common::random_tensor(&mut rng, &[6], 3.0);
            for i in 0..6 {
                lo[i] = lo[i].min(p.data()[i]);
                hi[i] = hi[i].max(p.data()[i]);
            }
            ema_update(&mut ema, &params(p.data()), decay);
            for (i, e) in w(&ema).iter().enumerate() {
                prop_assert!(*e >= lo[i] - 1e-12 && *e <= hi[i] + 1e-12);
            }
        }
    }
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut p = params(&[1.0]);
    let mut st = OptimizerState::new(&p);
    let r = adam_atan2_step(&mut p, &grads(&[f64::NAN]), &mut st, 0.1, &TrainConfig::default());
    assert!(matches!(r, Err(TrainError::NonFiniteGrad(name)) if name == "w"));
    assert_eq!(w(&p), vec![1.0]);
}

#[test]
fn ema_examples() {
    let mut e = params(&[1.0, 2.0]);
    ema_update(&mut e, &params(&[5.0, -5.0]), 0.0);
    assert_eq!(w(&e), vec![5.0, -5.0]);
    ema_update(&mut e, &params(&[0.0, 0.0]), 1.0);
    assert_eq!(w(&e), vec![5.0, -5.0]);

    let (e0, p) = (3.0, -1.0);
    let mut e = params(&[e0]);
    let n = 5_000;
    for _ in 0..n {
        ema_update(&mut e, &params(&[p]), 0.9999);
    }
    let closed = p + (e0 - p) * 0.9999f64.powi(n);
    assert!((w(&e)[0] - closed).abs() < 1e-10);
}

#[test]
fn config_validation() {
    let cfg = TrainConfig::default();
    assert!(cfg.validate(8, 2).is_ok());
    assert!(matches!(
        TrainConfig { k_end: 9, ..cfg.clone() }.validate(8, 2),
        Err(TrainError::Config { field: "k_end", .. })
    ));
    assert!(matches!(
        TrainConfig { k_start: 1, ..cfg.clone() }.validate(8, 2),
        Err(TrainError::Config { field: "k_start", .. })
    ));
    assert!(TrainConfig { beta2: 1.0, ..cfg }.validate(8, 2).is_err());
    let parsed: Result<TrainConfig, _> = serde_json::from_str(r#"{"peak_lr": 1e-3, "bogus": 1}"#);
    assert!(parsed.is_err());
}

fn tiny_trainer(total: usize, seed: u64) -> Trainer<f32> {
    let task = CopyReverseTask::default();
    let mut mc = ModelConfig::tiny(Variant::Hrm, 16, 2, 1, task.vocab_size());
    mc.context_len = task.max_seq_len();
    let tc = TrainConfig {
        peak_lr: 3e-3,
        lr_warmup_steps: 5,
        total_steps: total,
        k_warmup_steps: Some(total / 2),
        batch_tokens: 64,
        ema_decay: 0.9,
        seed,
        ..Default::default()
    };
    Trainer::new(Model::init(mc, seed).unwrap(), tc).unwrap()
}

fn run(total: usize, seed: u64, examples: usize) -> (Vec<StepMetrics>, Trainer<f32>, hrm_core::trainer::TrainReport) {
    let mut t = tiny_trainer(total, seed);
    let data = CopyReverseTask::default().dataset(seed, examples);
    let mut log = Vec::new();
    let report = t
        .run(data, |m| {
            log.push(m.clone());
            Ok(())
        })
        .unwrap();
    (log, t, report)
}

#[test]
fn training_is_deterministic_and_schedules_k() {
    let (a, ta, report) = run(12, 3, 10_000);
    let (b, tb, _) = run(12, 3, 10_000);
    assert_eq!(report.steps_completed, 12);
    assert!(report.early_stop.is_none());
    let lines = |m: &[StepMetrics]| m.iter().map(|x| serde_json::to_string(x).unwrap()).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(ta.model.params, tb.model.params);
    assert_eq!(a[0].k, 2);
    assert_eq!(a.last().unwrap().k, 5);
    assert!(a.iter().all(|m| m.tokens <= 64 && m.loss.is_finite()));
    assert!(lines(&a)[0].contains("\"K\":2"));
    assert_ne!(ta.ema, ta.model.params);
    let ck = ta.checkpoint();
    assert_eq!(ck.meta["step"], 12);
    assert!(ck.ema.is_some());
}

#[test]
fn exhausted_data_stops_cleanly() {
    let (log, _, report) = run(100, 1, 6);
    assert!(report.early_stop.is_some());
    assert!(report.steps_completed < 100);
    assert_eq!(log.len(), report.steps_completed);
}

#[test]
fn training_reduces_loss() {
    let (log, _, _) = run(60, 5, 10_000);
    let head: f64 = log[..5].iter().map(|m| m.loss).sum::<f64>() / 5.0;
    let tail: f64 = log[55..].iter().map(|m| m.loss).sum::<f64>() / 5.0;
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn batches_take_whole_examples() {
    let ex = |n: usize| hrm_core::objective::PackedExample::new(vec![2; n], 1, hrm_core::objective::Condition::Direct).unwrap();
    let mut data = vec![ex(5), ex(5), ex(5), ex(20), ex(3)].into_iter().peekable();
    let lens = |b: Vec<hrm_core::objective::PackedExample>| b.iter().map(|e| e.len()).collect::<Vec<_>>();
    assert_eq!(lens(take_batch(&mut data, 12)), vec![5, 5]);
    assert_eq!(lens(take_batch(&mut data, 12)), vec![5]);
    // an oversized example still forms a batch of its own
    assert_eq!(lens(take_batch(&mut data, 12)), vec![20]);
    assert_eq!(lens(take_batch(&mut data, 12)), vec![3]);
    assert!(take_batch(&mut data, 12).is_empty());
}
