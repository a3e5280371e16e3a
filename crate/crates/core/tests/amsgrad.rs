use vnetseg::diffcore::DiffTensor;
use vnetseg::optim::{zero_grads, AmsgradConfig, OptimizerState, SecondMoment};
use vnetseg::vnet::NamedParam;

fn param(values: Vec<f64>) -> NamedParam<f64> {
    let n = values.len();
    NamedParam {
        name: "w".into(),
        tensor: DiffTensor::new(vec![n], values).unwrap().with_grad(),
    }
}

fn set_grad(p: &mut NamedParam<f64>, g: &[f64]) {
    p.tensor.zero_grad();
    p.tensor.accumulate_grad(g).unwrap();
}

/// Gradient for step `t`: large early spikes, then sign flips of shrinking size.
fn adversarial(t: usize, i: usize) -> f64 {
    let sign = if (t + i) % 2 == 0 { 1.0 } else { -1.0 };
    let scale = if t % 17 == 0 {
        50.0
    } else {
        1.0 / (1.0 + t as f64)
    };
    sign * scale * (1.0 + i as f64)
}

#[test]
fn v_hat_never_decreases() {
    let mut params = vec![param(vec![0.5, -0.2, 1.0])];
    let mut opt = OptimizerState::new(AmsgradConfig::default()).unwrap();
    let mut prev = vec![0.0; 3];
    for t in 0..100 {
        let g: Vec<f64> = (0..3).map(|i| adversarial(t, i)).collect();
        set_grad(&mut params[0], &g);
        opt.step(&mut params).unwrap();
        let vh = &opt.moments[0].v_hat;
        for i in 0..3 {
            assert!(vh[i] >= prev[i], "step {t} element {i}");
            assert!(vh[i] >= opt.moments[0].v[i]);
        }
        prev = vh.clone();
    }
    assert_eq!(opt.step_count, 100);
}

#[test]
fn first_step_hand_value() {
    let mut params = vec![param(vec![1.0])];
    set_grad(&mut params[0], &[1.0]);
    let mut opt = OptimizerState::new(AmsgradConfig {
        learning_rate: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    })
    .unwrap();
    opt.step(&mut params).unwrap();
    let theta = params[0].tensor.values()[0];
    assert!((theta - -2.16228).abs() < 1e-4, "{theta}");
    assert_eq!(params[0].tensor.grad().unwrap(), &[0.0]);
}

fn trajectory(rule: SecondMoment) -> Vec<f64> {
    let mut params = vec![param(vec![0.3, 0.7])];
    let mut opt = OptimizerState::new(AmsgradConfig {
        learning_rate: 0.01,
        ..Default::default()
    })
    .unwrap()
    .with_rule(rule);
    let mut out = Vec::new();
    for t in 0..50 {
        let g: Vec<f64> = (0..2).map(|i| adversarial(t, i)).collect();
        set_grad(&mut params[0], &g);
        opt.step(&mut params).unwrap();
        out.extend_from_slice(params[0].tensor.values());
    }
    out
}

#[test]
fn replay_is_bit_identical() {
    let a = trajectory(SecondMoment::RunningMax);
    let b = trajectory(SecondMoment::RunningMax);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn current_moment_rule_matches_hand_table() {
    // Adam without second-moment bias correction on g = 1, -1, 2.
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut params = vec![param(vec![0.0])];
    let mut opt = OptimizerState::new(AmsgradConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
    })
    .unwrap()
    .with_rule(SecondMoment::Current);
    let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.0f64);
    for (t, g) in [1.0, -1.0, 2.0].into_iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
        theta -= lr * m_hat / (v.sqrt() + eps);
        set_grad(&mut params[0], &[g]);
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.values()[0] - theta).abs() < 1e-12);
    }
    assert!((theta - -3.954676).abs() < 1e-5, "{theta}");
    assert_ne!(
        trajectory(SecondMoment::Current),
        trajectory(SecondMoment::RunningMax)
    );
}

#[test]
fn zero_grads_clears_stale_accumulation() {
    let mut params = vec![param(vec![1.0, 2.0])];
    set_grad(&mut params[0], &[5.0, 5.0]);
    zero_grads(&mut params);
    zero_grads(&mut params);
    params[0].tensor.accumulate_grad(&[1.0, 1.0]).unwrap();
    assert_eq!(params[0].tensor.grad().unwrap(), &[1.0, 1.0]);
}
