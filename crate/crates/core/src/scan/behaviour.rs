use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;
use crate::distill::distill_grads;
use crate::pole_bank::logit;
use crate::tensor_io::Rng;

const EPS: f64 = 0.01;

fn cfg(e: usize, g: usize, l: usize, k: usize, rf: usize) -> OperatorConfig {
    OperatorConfig {
        channels: e,
        groups: g,
        real_poles: l,
        complex_pairs: k,
        r_f: rf,
        epsilon: EPS,
    }
}

fn input(rng: &mut Rng, b: usize, m: usize, e: usize) -> TokenSequence {
    TokenSequence::new(b, m, e, rng.normals(b * m * e)).unwrap()
}

/// Single-group bank with one real pole `a` (`s̄ = 1`).
fn real_pole(a: f64) -> PoleBankParams {
    let mut p = PoleBankParams::zeros(PoleBankConfig::new(1, 1, 0, EPS).unwrap());
    p.rho_hat_r.set(0, 0, logit(a / (1.0 - EPS)));
    p.s_hat.set(0, 0, 40.0);
    p
}

fn complex_pair(rho: f64, theta: f64) -> PoleBankParams {
    let mut p = PoleBankParams::zeros(PoleBankConfig::new(1, 0, 1, EPS).unwrap());
    p.rho_hat_c.set(0, 0, logit(rho / (1.0 - EPS)));
    p.theta_hat.set(0, 0, logit(theta / PI));
    p
}

fn impulse(m: usize) -> Vec<f64> {
    let mut u = vec![0.0; m];
    u[0] = 1.0;
    u
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn geometric_impulse_recurrence() {
    let q = vec![-0.5; 6];
    let y = grouped_recurrence(&q, &impulse(6), 1, 1, 1);
    assert_eq!(y, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);
}

#[test]
fn alternating_two_lag_recurrence() {
    let q: Vec<f64> = (0..6).flat_map(|_| [0.0, 0.25]).collect();
    let y = grouped_recurrence(&q, &impulse(6), 1, 1, 2);
    assert_eq!(y, vec![1.0, 0.0, -0.25, 0.0, 0.0625, 0.0]);
}

#[test]
fn operator_impulse_responses() {
    // The numerator delays the drive by one lag, so the response starts at t = 1.
    let r = lti_crosscheck(&real_pole(0.5), &[1.0], 0.0, &impulse(8), 1e-10).unwrap();
    for (k, v) in r.operator.iter().enumerate().skip(1) {
        assert!((v - 0.5f64.powi(k as i32 - 1)).abs() < 1e-12, "{k}: {v}");
    }
    assert_eq!(r.operator[0], 0.0);

    let r = lti_crosscheck(&complex_pair(0.5, PI / 2.0), &[1.0, 0.0], 0.0, &impulse(7), 1e-10).unwrap();
    let want = [0.0, 1.0, 0.0, -0.25, 0.0, 0.0625, 0.0];
    assert!(max_abs_diff(&r.operator, &want) < 1e-12, "{:?}", r.operator);
}

#[test]
fn lti_second_order_and_direct_only() {
    let mut rng = Rng::new(21);
    let u = rng.normals(256);
    let r = lti_crosscheck(&complex_pair(0.9, PI / 3.0), &[0.7, -0.2], 0.3, &u, 1e-10).unwrap();
    assert!(r.max_abs_error <= 1e-10);

    let r = lti_crosscheck(&complex_pair(0.9, PI / 3.0), &[0.0, 0.0], 1.7, &u, 1e-10).unwrap();
    for (o, ut) in r.operator.iter().zip(&u) {
        assert!((o - 1.7 * ut).abs() <= 1e-15);
    }
}

#[test]
fn lti_mismatch_is_reported() {
    let mut pole = real_pole(0.5);
    let p = lti_operator(&pole, &[1.0], 0.0).unwrap();
    assert_eq!(p.config.channels, 2);
    pole.config.groups = 2;
    assert!(lti_operator(&pole, &[1.0], 0.0).is_err());
    let err = lti_crosscheck(&real_pole(0.5), &[1.0], 0.0, &impulse(8), -1.0).unwrap_err();
    assert!(matches!(err, Error::MismatchBeyondTolerance { .. }));
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = Rng::new(8);
    let p = OperatorParams::random(cfg(4, 2, 1, 1, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let x = TokenSequence::zeros(2, 10, 4);
    let o = reference_forward(&x, &p, &ScanRoute::forward(10)).unwrap();
    assert!(o.data.iter().all(|&v| v == 0.0));
}

#[test]
fn causality_along_route() {
    let mut rng = Rng::new(9);
    let p = OperatorParams::random(cfg(6, 3, 1, 1, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let x = input(&mut rng, 1, 16, 6);
    for route in [ScanRoute::forward(16), ScanRoute::backward(16), ScanRoute::column_forward(4, 4)] {
        let base = forward_route(&x, &p, &route, Precision::F64).unwrap();
        let pos = 9;
        let mut y = x.clone();
        y.token_mut(0, route.order[pos]).iter_mut().for_each(|v| *v += 0.5);
        let pert = forward_route(&y, &p, &route, Precision::F64).unwrap();
        for (i, &t) in route.order.iter().enumerate() {
            let same = base.token(0, t) == pert.token(0, t);
            assert_eq!(same, i < pos, "route {} position {i}", route.id);
        }
    }
}

#[test]
fn route_permutation_consistency() {
    let mut rng = Rng::new(10);
    let p = OperatorParams::random(cfg(4, 2, 2, 1, 3), ModulationMode::Shared, &mut rng).unwrap();
    let x = input(&mut rng, 2, 12, 4);
    let route = ScanRoute::column_backward(3, 4);
    let direct = forward_route(&x, &p, &route, Precision::F64).unwrap();

    let mut permuted = TokenSequence::zeros(2, 12, 4);
    for b in 0..2 {
        for (pos, &t) in route.order.iter().enumerate() {
            permuted.token_mut(b, pos).copy_from_slice(x.token(b, t));
        }
    }
    let via = forward_route(&permuted, &p, &ScanRoute::forward(12), Precision::F64).unwrap();
    for b in 0..2 {
        for (pos, &t) in route.order.iter().enumerate() {
            assert_eq!(direct.token(b, t), via.token(b, pos));
        }
    }
}

#[test]
fn linear_in_injected_drive() {
    let mut rng = Rng::new(12);
    let p = OperatorParams::random(cfg(4, 2, 1, 2, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let x = input(&mut rng, 1, 20, 4);
    let bank = p.bank().unwrap();
    let scales = crate::modulation::compute_scales(&x, &p.heads, 2).unwrap();
    let poles = crate::modulation::modulate(&bank, &scales, true).unwrap();
    let q = crate::denominator::expand_token_denominators(&poles).q;
    let eta = rng.normals(20 * 4);
    let y1 = grouped_recurrence(&q, &eta, 4, 2, 5);
    let eta2: Vec<f64> = eta.iter().map(|v| 2.0 * v).collect();
    let y2 = grouped_recurrence(&q, &eta2, 4, 2, 5);
    for (a, b) in y1.iter().zip(&y2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn bidirectional_output_symmetric_on_palindrome() {
    let mut rng = Rng::new(13);
    let p = OperatorParams::random(cfg(4, 2, 1, 1, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let m = 8;
    let mut x = TokenSequence::zeros(1, m, 4);
    for t in 0..m / 2 {
        let v = rng.normals(4);
        x.token_mut(0, t).copy_from_slice(&v);
        x.token_mut(0, m - 1 - t).copy_from_slice(&v);
    }
    let o = forward_multi_route(&x, &p, &[ScanRoute::forward(m), ScanRoute::backward(m)], Precision::F64).unwrap();
    for t in 0..m {
        assert_eq!(o.token(0, t), o.token(0, m - 1 - t));
    }
}

#[test]
fn bounded_outputs_on_long_sequence() {
    let mut rng = Rng::new(14);
    let p = OperatorParams::random(cfg(8, 4, 2, 2, 4), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let data = (0..4096 * 8).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let x = TokenSequence::new(1, 4096, 8, data).unwrap();
    let o = forward_route(&x, &p, &ScanRoute::forward(4096), Precision::F32).unwrap();
    assert!(o.data.iter().all(|v| v.is_finite() && v.abs() < 1e6));
}

#[test]
fn direct_path_gradient() {
    let mut rng = Rng::new(15);
    let mut p = OperatorParams::init(cfg(4, 2, 1, 1, 2), ModulationMode::Shared, &mut rng).unwrap();
    p.d = rng.normals(4);
    let x = input(&mut rng, 2, 8, 4);
    let routes = [ScanRoute::forward(8)];
    let (_, g) = grad::loss_and_grad(&x, &p, &routes, Loss::SumSquares).unwrap();
    for ch in 0..4 {
        let h = 1e-6;
        let mut plus = p.clone();
        plus.d[ch] += h;
        let mut minus = p.clone();
        minus.d[ch] -= h;
        let f = |q: &OperatorParams| Loss::SumSquares.value(&forward_multi_route(&x, q, &routes, Precision::F64).unwrap()).unwrap();
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert!((fd - g.d[ch]).abs() <= 1e-8 * g.d[ch].abs().max(1.0), "{fd} vs {}", g.d[ch]);
    }
}

#[test]
fn full_gradient_check_seed_7() {
    let mut rng = Rng::new(7);
    let p = OperatorParams::random(cfg(8, 4, 1, 1, 4), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let x = input(&mut rng, 2, 16, 8);
    let routes = [ScanRoute::forward(16), ScanRoute::backward(16)];
    let rep = grad_check(&x, &p, &routes, Loss::SumSquares, 1e-6).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    assert_eq!(rep.n_params, p.flatten().len());
}

#[test]
fn clipped_angle_has_zero_gradient() {
    let mut rng = Rng::new(16);
    let mut p = OperatorParams::random(cfg(4, 1, 0, 1, 2), ModulationMode::Shared, &mut rng).unwrap();
    // θ close to π and s_θ ≥ 1.25 for every token: the clip is always active.
    p.pole.theta_hat.set(0, 0, 6.0);
    p.heads.w_theta = Mat::zeros(1, 4);
    p.heads.b_theta = vec![2.0];
    let x = input(&mut rng, 1, 10, 4);
    let (_, g) = grad::loss_and_grad(&x, &p, &[ScanRoute::forward(10)], Loss::SumSquares).unwrap();
    assert_eq!(g.pole.theta_hat.get(0, 0), 0.0);
    assert_eq!(g.heads.b_theta[0], 0.0);
    assert_ne!(g.pole.rho_hat_c.get(0, 0), 0.0);
}

#[test]
fn distillation_gradient_and_stop_gradient() {
    let mut rng = Rng::new(17);
    let p = OperatorParams::random(cfg(4, 2, 1, 1, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let teacher_p = OperatorParams::random(cfg(4, 2, 1, 1, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
    let x = input(&mut rng, 1, 12, 4);
    let routes = [ScanRoute::forward(12)];
    let teacher = forward_multi_route(&x, &teacher_p, &routes, Precision::F64).unwrap();
    let rep = grad_check(&x, &p, &routes, Loss::Distill { teacher: &teacher }, 1e-6).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");

    let student = forward_multi_route(&x, &p, &routes, Precision::F64).unwrap();
    let g = distill_grads(&[student], std::slice::from_ref(&teacher)).unwrap();
    let upstream = TokenSequence::new(1, 12, 4, g.teacher[0].clone()).unwrap();
    let tg = backward(&x, &teacher_p, &routes, &upstream).unwrap();
    assert!(tg.flatten().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_start_reproduces_input(seed in 0u64..10_000, g in 1usize..4, l in 0usize..3, k in 0usize..3) {
        prop_assume!(l + 2 * k >= 1);
        let mut rng = Rng::new(seed);
        let p = OperatorParams::init(cfg(2 * g, g, l, k, 2), ModulationMode::GroupSpecific, &mut rng).unwrap();
        let x = input(&mut rng, 1, 17, 2 * g);
        let o = forward_route(&x, &p, &ScanRoute::backward(17), Precision::F64).unwrap();
        prop_assert!(max_abs_diff(&o.data, &x.data) <= 1e-12);
    }

    #[test]
    fn kernel_matches_reference(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let g = [1, 2, 4][rng.int_range(0, 2)];
        let c = cfg(4 * g, g, rng.int_range(0, 2), rng.int_range(1, 2), rng.int_range(1, 4));
        let p = OperatorParams::random(c, ModulationMode::GroupSpecific, &mut rng).unwrap();
        let x = input(&mut rng, 2, 25, 4 * g);
        let route = ScanRoute::backward(25);
        let a = forward_route(&x, &p, &route, Precision::F64).unwrap();
        let b = reference_forward(&x, &p, &route).unwrap();
        prop_assert!(max_abs_diff(&a.data, &b.data) <= 1e-10);
    }
}
