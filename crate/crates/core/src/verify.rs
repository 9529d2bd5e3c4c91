//! The property suite behind `tcpssm verify`: ten numbered checks, each with a fixed
//! tolerance. Every draw comes from a seeded counter-based stream, so a report depends
//! only on the options.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::analysis::{
    dominant_bin, flop_report, horizon, impulse_response, log_envelope_slope, memory_horizon, reduction, FlopModel,
    GroupSelection, TransferFunction,
};
use crate::denominator::{expand_poles, expand_sorted_into, factor_max_modulus, MAX_ORDER};
use crate::distill::distill_grads;
use crate::error::Result;
use crate::mat::Mat;
use crate::modulation::{compute_scales, modulate, modulate_group_into, ModulationHeads, ModulationMode};
use crate::numerator::{dense_equivalent_b, driving_signal, CausalWindow, NumeratorParams};
use crate::pole_bank::{base_factors, constrain, constrain_with_margin, logit, Factor, PoleBankConfig, PoleBankParams};
use crate::scan::{
    backward, forward_multi_route, forward_route, grad_check, lti_crosscheck, reference_forward, Loss,
    OperatorConfig, OperatorParams, Precision, ScanRoute,
};
use crate::sequence::TokenSequence;
use crate::tensor_io::Rng;

pub const REPORT_SCHEMA: &str = "tcp-report/1";
pub const EPSILON: f64 = 0.01;

pub const STABILITY_DRAWS: usize = 10_000;
pub const STABILITY_SLACK: f64 = 1e-9;
pub const STABILITY_TIME_LIMIT: Duration = Duration::from_secs(60);
pub const IDENTITY_CONFIGS: usize = 100;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const ORACLE_CONFIGS: usize = 100;
pub const ORACLE_TOL_F64: f64 = 1e-10;
pub const ORACLE_TOL_F32: f64 = 1e-4;
pub const LOW_RANK_CASES: usize = 1000;
pub const LOW_RANK_TOL: f64 = 1e-12;
pub const LTI_SYSTEMS: usize = 50;
pub const LTI_LEN: usize = 256;
pub const LTI_TOL: f64 = 1e-10;
pub const GRAD_CONFIGS: usize = 20;
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const FLOP_TOL_PP: f64 = 0.1;
pub const ENVELOPE_TOL: f64 = 0.02;
pub const IMPULSE_LEN: usize = 1024;
pub const MEMMAP_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// `F32` checks the single-precision kernel against the f64 oracle at `1e-4` only.
    pub precision: Precision,
    /// Replaces the pole-bank margin inside the stability fuzz (sabotage test). The bound
    /// being checked stays `1 - 0.01`.
    pub mutate_epsilon: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            mutate_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(id: usize, name: &'static str, passed: bool, metric: f64, tolerance: f64, detail: String) -> Self {
        Self {
            id,
            name,
            passed,
            metric,
            tolerance,
            detail,
        }
    }

    fn failed(id: usize, name: &'static str, tolerance: f64, err: impl std::fmt::Display) -> Self {
        Self::new(id, name, false, f64::NAN, tolerance, format!("error: {err}"))
    }

    /// One line of the pass/fail matrix.
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} metric={:.3e} tol={:.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.metric,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema: &'static str,
    pub seed: u64,
    pub precision: Precision,
    pub mutate_epsilon: Option<f64>,
    pub checks: Vec<CheckOutcome>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn failing(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

pub fn run_suite(opts: &VerifyOptions) -> VerifyReport {
    let checks: Vec<CheckOutcome> = vec![
        stability_fuzz(opts),
        identity_recovery(opts),
        oracle_equivalence(opts),
        low_rank_identity(opts),
        lti_crosscheck_suite(opts),
        gradient_check(opts),
        flop_model(opts),
        impulse_physics(opts),
        memory_map_monotonicity(opts),
        determinism(opts),
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    VerifyReport {
        schema: REPORT_SCHEMA,
        seed: opts.seed,
        precision: opts.precision,
        mutate_epsilon: opts.mutate_epsilon,
        checks,
        all_passed,
    }
}

/// Stream for draw `i` of check `id`.
fn stream(opts: &VerifyOptions, id: u64, i: usize) -> Rng {
    Rng::new(opts.seed).split(id).split(i as u64)
}

fn random_pole_params(rng: &mut Rng, config: PoleBankConfig, spread: f64) -> PoleBankParams {
    let mut p = PoleBankParams::zeros(config);
    for m in [&mut p.rho_hat_c, &mut p.theta_hat, &mut p.rho_hat_r, &mut p.s_hat] {
        m.as_mut_slice().iter_mut().for_each(|v| *v = spread * rng.normal());
    }
    p
}

fn random_order(rng: &mut Rng, max_l: usize, max_k: usize) -> (usize, usize) {
    let l = rng.int_range(0, max_l);
    let k = rng.int_range(0, max_k);
    if l + k == 0 {
        (1, 0)
    } else {
        (l, k)
    }
}

fn random_heads(rng: &mut Rng, mode: ModulationMode, groups: usize, channels: usize, scale: f64) -> ModulationHeads {
    let mut h = ModulationHeads::zeros(mode, groups, channels);
    let rows = h.rows();
    let w = scale / (channels as f64).sqrt();
    h.w_rho = Mat::randn(rows, channels, w, rng);
    h.b_rho = (0..rows).map(|_| scale * rng.normal()).collect();
    h.w_theta = Mat::randn(rows, channels, w, rng);
    h.b_theta = (0..rows).map(|_| scale * rng.normal()).collect();
    h
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// 1. Base and token-modulated denominators keep every root within `1 - ε + 1e-9`.
pub fn stability_fuzz(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "stability_fuzz";
    let bound = 1.0 - EPSILON + STABILITY_SLACK;
    let margin = opts.mutate_epsilon.unwrap_or(EPSILON);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut factors = Vec::new();
    for i in 0..STABILITY_DRAWS {
        let mut rng = stream(opts, 1, i);
        let groups = rng.int_range(1, 4);
        let (l, k) = random_order(&mut rng, 3, 3);
        let channels = 2 * groups;
        let config = PoleBankConfig {
            groups,
            real_poles: l,
            complex_pairs: k,
            epsilon: EPSILON,
        };
        let params = random_pole_params(&mut rng, config, 4.0);
        let bank = constrain_with_margin(&params, margin);
        let heads = random_heads(&mut rng, ModulationMode::GroupSpecific, groups, channels, 2.0);
        let tokens: Vec<Vec<f64>> = (0..4).map(|_| rng.normals(channels)).collect();
        let mut s_rho = vec![0.0; groups];
        let mut s_theta = vec![0.0; groups];
        for g in 0..groups {
            let mut check = |f: &[Factor]| -> Result<()> {
                let m = factor_max_modulus(f)?;
                worst = worst.max(m);
                checked += 1;
                if m > bound {
                    violations += 1;
                }
                Ok(())
            };
            if let Err(e) = base_factors(&bank, g).and_then(|f| check(&f)) {
                return CheckOutcome::failed(1, NAME, bound, e);
            }
            for x in &tokens {
                heads.token_scales(x, &mut s_rho, &mut s_theta);
                modulate_group_into(&bank, g, s_rho[g], s_theta[g], true, &mut factors);
                if let Err(e) = check(&factors) {
                    return CheckOutcome::failed(1, NAME, bound, e);
                }
            }
        }
    }
    let in_time = start.elapsed() < STABILITY_TIME_LIMIT;
    CheckOutcome::new(
        1,
        NAME,
        violations == 0 && in_time,
        worst,
        bound,
        format!(
            "{STABILITY_DRAWS} draws, {checked} denominators, {violations} violations{}",
            if in_time { "" } else { ", over time limit" }
        ),
    )
}

/// 2. Zero heads reproduce the base denominator coefficients.
pub fn identity_recovery(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "identity_recovery";
    let mut worst = 0.0f64;
    let mut factors = Vec::new();
    let mut buf = [0.0; MAX_ORDER + 1];
    for i in 0..IDENTITY_CONFIGS {
        let mut rng = stream(opts, 2, i);
        let groups = rng.int_range(1, 8);
        let (l, k) = random_order(&mut rng, 4, 4);
        let config = PoleBankConfig {
            groups,
            real_poles: l,
            complex_pairs: k,
            epsilon: EPSILON,
        };
        let bank = match constrain(&random_pole_params(&mut rng, config, 2.0)) {
            Ok(b) => b,
            Err(e) => return CheckOutcome::failed(2, NAME, IDENTITY_TOL, e),
        };
        let channels = groups * rng.int_range(1, 4);
        let mode = if i % 2 == 0 { ModulationMode::Shared } else { ModulationMode::GroupSpecific };
        let heads = ModulationHeads::zeros(mode, groups, channels);
        let mut s_rho = vec![0.0; groups];
        let mut s_theta = vec![0.0; groups];
        heads.token_scales(&rng.normals(channels), &mut s_rho, &mut s_theta);
        for g in 0..groups {
            let base = expand_poles(&base_factors(&bank, g).unwrap()).unwrap();
            modulate_group_into(&bank, g, s_rho[g], s_theta[g], true, &mut factors);
            let r = expand_sorted_into(&mut factors, &mut buf);
            let scale = base[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = max_abs_diff(&base[1..], &buf[1..=r]);
            worst = worst.max(if scale > 0.0 { err / scale } else { err });
        }
    }
    CheckOutcome::new(
        2,
        NAME,
        worst <= IDENTITY_TOL,
        worst,
        IDENTITY_TOL,
        format!("{IDENTITY_CONFIGS} configs, relative to max |q_base|"),
    )
}

/// Random operator within the oracle-equivalence envelope.
const ORACLE_HEAD_SCALE: f64 = 0.2;

pub fn random_oracle_case(rng: &mut Rng) -> (OperatorParams, TokenSequence, Vec<ScanRoute>) {
    let groups = [1, 4, 8][rng.int_range(0, 2)];
    let channels = groups * rng.int_range(1, 64 / groups);
    let (l, k) = random_order(rng, 2, 2);
    let config = OperatorConfig {
        channels,
        groups,
        real_poles: l,
        complex_pairs: k,
        r_f: rng.int_range(1, 8),
        epsilon: EPSILON,
    };
    let mode = if rng.uniform() < 0.5 { ModulationMode::Shared } else { ModulationMode::GroupSpecific };
    let mut params = OperatorParams::random(config, mode, rng).expect("valid random config");
    // Gentler token-to-token pole motion keeps the time-varying recurrence from growing.
    for w in [&mut params.heads.w_rho, &mut params.heads.w_theta] {
        w.as_mut_slice().iter_mut().for_each(|v| *v *= ORACLE_HEAD_SCALE);
    }
    let len = rng.int_range(16, 1024);
    let batch = rng.int_range(1, 2);
    let data = (0..batch * len * channels).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let x = TokenSequence::new(batch, len, channels, data).unwrap();
    let routes = if rng.uniform() < 0.5 {
        vec![ScanRoute::forward(len)]
    } else {
        vec![ScanRoute::forward(len), ScanRoute::backward(len)]
    };
    (params, x, routes)
}

fn fused_reference(x: &TokenSequence, p: &OperatorParams, routes: &[ScanRoute]) -> Result<TokenSequence> {
    let mut acc = TokenSequence::zeros(x.batch, x.len, x.channels);
    for route in routes {
        let o = reference_forward(x, p, route)?;
        for (a, v) in acc.data.iter_mut().zip(&o.data) {
            *a += v;
        }
    }
    let n = routes.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// 3. Ring-buffer kernel against the naive f64 oracle.
pub fn oracle_equivalence(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "oracle_equivalence";
    let check_f64 = opts.precision == Precision::F64;
    let tol = if check_f64 { ORACLE_TOL_F64 } else { ORACLE_TOL_F32 };
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for i in 0..ORACLE_CONFIGS {
        let mut rng = stream(opts, 3, i);
        let (p, x, routes) = random_oracle_case(&mut rng);
        let run = || -> Result<(f64, f64)> {
            let oracle = fused_reference(&x, &p, &routes)?;
            let e64 = if check_f64 {
                max_abs_diff(&forward_multi_route(&x, &p, &routes, Precision::F64)?.data, &oracle.data)
            } else {
                0.0
            };
            let e32 = max_abs_diff(&forward_multi_route(&x, &p, &routes, Precision::F32)?.data, &oracle.data);
            Ok((e64, e32))
        };
        match run() {
            Ok((a, b)) => {
                worst64 = worst64.max(a);
                worst32 = worst32.max(b);
            }
            Err(e) => return CheckOutcome::failed(3, NAME, tol, e),
        }
    }
    let passed = worst64 <= ORACLE_TOL_F64 && worst32 <= ORACLE_TOL_F32;
    let detail = if check_f64 {
        format!("{ORACLE_CONFIGS} configs, f64 {worst64:.3e} <= {ORACLE_TOL_F64:.0e}, f32 {worst32:.3e} <= {ORACLE_TOL_F32:.0e}")
    } else {
        format!("{ORACLE_CONFIGS} configs, f32 kernel only")
    };
    CheckOutcome::new(3, NAME, passed, if check_f64 { worst64 } else { worst32 }, tol, detail)
}

/// 4. `Σ_i B_i x_{t-i}` with dense `B_i` equals the low-rank drive.
pub fn low_rank_identity(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "low_rank_identity";
    let mut worst = 0.0f64;
    for i in 0..LOW_RANK_CASES {
        let mut rng = stream(opts, 4, i);
        let e = rng.int_range(1, 16);
        let r = rng.int_range(1, 8);
        let rf = rng.int_range(1, 8);
        let num = NumeratorParams {
            u: Mat::randn(e, rf, 1.0, &mut rng),
            v: Mat::randn(e, rf, 1.0, &mut rng),
            w_alpha: Mat::randn(r, e, 1.0, &mut rng),
            w_gamma: Mat::randn(rf, e, 1.0, &mut rng),
            r_f: rf,
        };
        let t = rng.int_range(0, r + 2);
        let xs: Vec<Vec<f64>> = (0..=t).map(|_| rng.normals(e)).collect();
        let latents: Vec<Vec<f64>> = xs.iter().map(|x| num.project(x)).collect();
        let alpha = rng.normals(r);
        let gamma: Vec<f64> = (0..rf).map(|_| rng.uniform()).collect();
        let eta = driving_signal(&CausalWindow::at(&latents, t, rf, r), &alpha, &gamma, &num.u);
        let sum = lagged_sum(&dense_equivalent_b(&alpha, &gamma, &num.u, &num.v), &xs, t);
        // Same sum over absolute values: the size of the products both paths round.
        let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
        let abs_m = |m: &Mat| Mat::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j).abs());
        let abs_xs: Vec<Vec<f64>> = xs.iter().map(|x| abs(x)).collect();
        let magnitude = lagged_sum(
            &dense_equivalent_b(&abs(&alpha), &gamma, &abs_m(&num.u), &abs_m(&num.v)),
            &abs_xs,
            t,
        );
        let scale = magnitude.iter().fold(0.0f64, |m, v| m.max(*v));
        let err = max_abs_diff(&sum, &eta);
        worst = worst.max(if scale > 0.0 { err / scale } else { err });
    }
    CheckOutcome::new(
        4,
        NAME,
        worst <= LOW_RANK_TOL,
        worst,
        LOW_RANK_TOL,
        format!("{LOW_RANK_CASES} cases, relative to max Σ|α||U|γ|V||x|"),
    )
}

fn lagged_sum(dense: &[Mat], xs: &[Vec<f64>], t: usize) -> Vec<f64> {
    let mut sum = vec![0.0; xs[0].len()];
    for (lag, b) in dense.iter().enumerate() {
        if let Some(s) = t.checked_sub(lag + 1) {
            for (acc, v) in sum.iter_mut().zip(b.matvec(&xs[s])) {
                *acc += v;
            }
        }
    }
    sum
}

/// 5. Identity modulation plus scalar taps equals a companion-form simulation.
pub fn lti_crosscheck_suite(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "lti_crosscheck";
    let mut worst = 0.0f64;
    for i in 0..LTI_SYSTEMS {
        let mut rng = stream(opts, 5, i);
        let (l, k) = random_order(&mut rng, 2, 2);
        let config = PoleBankConfig {
            groups: 1,
            real_poles: l,
            complex_pairs: k,
            epsilon: EPSILON,
        };
        let pole = random_pole_params(&mut rng, config, 1.5);
        let taps = rng.normals(config.order());
        let d = rng.normal();
        let u = rng.normals(LTI_LEN);
        match lti_crosscheck(&pole, &taps, d, &u, LTI_TOL) {
            Ok(rep) => worst = worst.max(rep.max_abs_error),
            Err(e) => return CheckOutcome::failed(5, NAME, LTI_TOL, e),
        }
    }
    CheckOutcome::new(
        5,
        NAME,
        worst <= LTI_TOL,
        worst,
        LTI_TOL,
        format!("{LTI_SYSTEMS} systems, M = {LTI_LEN}"),
    )
}

/// 6. Analytic gradients against central differences, and a silent teacher path.
pub fn gradient_check(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "gradient_check";
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    for i in 0..GRAD_CONFIGS {
        let mut rng = stream(opts, 6, i);
        let groups = [1, 2, 4][rng.int_range(0, 2)];
        let channels = groups * rng.int_range(1, 8 / groups);
        let (l, k) = random_order(&mut rng, 2, 2);
        let config = OperatorConfig {
            channels,
            groups,
            real_poles: l,
            complex_pairs: k,
            r_f: rng.int_range(1, 4),
            epsilon: EPSILON,
        };
        let mode = if i % 2 == 0 { ModulationMode::GroupSpecific } else { ModulationMode::Shared };
        let p = OperatorParams::random(config, mode, &mut rng).unwrap();
        let len = rng.int_range(4, 16);
        let x = TokenSequence::new(2, len, channels, rng.normals(2 * len * channels)).unwrap();
        let routes = [ScanRoute::forward(len), ScanRoute::backward(len)];
        match grad_check(&x, &p, &routes, Loss::SumSquares, GRAD_STEP) {
            Ok(rep) => {
                if rep.max_rel_error > worst || worst_param.is_empty() {
                    worst = rep.max_rel_error;
                    worst_param = format!("config {i} {}", rep.worst_param);
                }
            }
            Err(e) => return CheckOutcome::failed(6, NAME, GRAD_TOL, e),
        }
    }

    // Teacher path: its upstream gradient is zero, so its own parameters receive nothing.
    let mut rng = stream(opts, 6, GRAD_CONFIGS);
    let config = OperatorConfig {
        channels: 4,
        groups: 2,
        real_poles: 1,
        complex_pairs: 1,
        r_f: 2,
        epsilon: EPSILON,
    };
    let student_p = OperatorParams::random(config, ModulationMode::GroupSpecific, &mut rng).unwrap();
    let teacher_p = OperatorParams::random(config, ModulationMode::GroupSpecific, &mut rng).unwrap();
    let x = TokenSequence::new(1, 10, 4, rng.normals(40)).unwrap();
    let routes = [ScanRoute::forward(10)];
    let teacher_silent = (|| -> Result<bool> {
        let s = forward_multi_route(&x, &student_p, &routes, Precision::F64)?;
        let t = forward_multi_route(&x, &teacher_p, &routes, Precision::F64)?;
        let g = distill_grads(&[s], &[t])?;
        let upstream = TokenSequence::new(1, 10, 4, g.teacher[0].clone())?;
        let tg = backward(&x, &teacher_p, &routes, &upstream)?;
        Ok(g.teacher[0].iter().all(|&v| v == 0.0) && tg.flatten().iter().all(|&v| v == 0.0))
    })();
    let teacher_silent = matches!(teacher_silent, Ok(true));
    CheckOutcome::new(
        6,
        NAME,
        worst <= GRAD_TOL && teacher_silent,
        worst,
        GRAD_TOL,
        format!(
            "{GRAD_CONFIGS} configs, worst {worst_param}, teacher gradient {}",
            if teacher_silent { "zero" } else { "NONZERO" }
        ),
    )
}

/// 7. Cost formulas and the quoted reduction arithmetic.
pub fn flop_model(_opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "flop_model";
    let mut ok = true;
    for r in 1..=16u64 {
        for r_f in 1..=16u64 {
            for n in [1u64, 4, 8, 16, 64] {
                let m = FlopModel {
                    r,
                    r_f,
                    n_state: n,
                    channels: 3,
                    len: 5,
                    routes: 2,
                };
                ok &= m.tcp_cost() == 2 * r + 3 * r_f && m.baseline_cost() == 7 * n;
                ok &= m.tcp_total() == (2 * r + 3 * r_f) * 30 && m.baseline_total() == 7 * n * 30;
            }
        }
    }
    let example = FlopModel {
        r: 4,
        r_f: 8,
        n_state: 16,
        channels: 1,
        len: 1,
        routes: 1,
    };
    let rep = flop_report(example);
    ok &= matches!(&rep, Ok(r) if r.tcp_per_token_channel == 32 && r.baseline_per_token_channel == 112);
    let quoted = [(295.3, 497.5, 40.6), (129.9, 233.0, 44.2)];
    let worst = quoted
        .iter()
        .map(|&(new, base, pct)| (100.0 * reduction(new, base) - pct).abs())
        .fold(0.0, f64::max);
    CheckOutcome::new(
        7,
        NAME,
        ok && worst <= FLOP_TOL_PP,
        worst,
        FLOP_TOL_PP,
        format!(
            "integer costs {}, 295.3/497.5 -> {:.1}%, 129.9/233.0 -> {:.1}%",
            if ok { "exact" } else { "WRONG" },
            100.0 * reduction(295.3, 497.5),
            100.0 * reduction(129.9, 233.0)
        ),
    )
}

/// 8. Envelope decay and dominant frequency of a single complex pair.
pub fn impulse_physics(_opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "impulse_physics";
    let (rho, theta) = (0.9, PI / 3.0);
    let mut pole = PoleBankParams::zeros(PoleBankConfig {
        groups: 1,
        real_poles: 0,
        complex_pairs: 1,
        epsilon: EPSILON,
    });
    pole.rho_hat_c.set(0, 0, logit(rho / (1.0 - EPSILON)));
    pole.theta_hat.set(0, 0, logit(theta / PI));
    let q = match constrain(&pole).and_then(|b| expand_poles(&base_factors(&b, 0)?)) {
        Ok(c) => c[1..].to_vec(),
        Err(e) => return CheckOutcome::failed(8, NAME, ENVELOPE_TOL, e),
    };
    let h = impulse_response(&TransferFunction::all_pole(q), IMPULSE_LEN);
    let slope = log_envelope_slope(&h, 200).unwrap_or(f64::NAN);
    let slope_err = ((slope - rho.ln()) / rho.ln()).abs();
    let bin = dominant_bin(&h);
    let want = theta / (2.0 * PI) * IMPULSE_LEN as f64;
    let bin_ok = (bin as f64 - want).abs() <= 1.0;
    CheckOutcome::new(
        8,
        NAME,
        slope_err <= ENVELOPE_TOL && bin_ok,
        slope_err,
        ENVELOPE_TOL,
        format!("slope {slope:.6} vs ln 0.9 = {:.6}, dominant bin {bin} vs {want:.2}", rho.ln()),
    )
}

/// Synthetic two-region grid: the left half (region A) gets larger non-negative inputs and
/// non-negative radius heads, so its `s_ρ` exceeds every token of the right half.
pub fn two_region_case(rng: &mut Rng, height: usize, width: usize) -> (OperatorParams, TokenSequence, Vec<bool>) {
    let channels = 4;
    let groups = 2;
    let (l, k) = random_order(rng, 2, 2);
    let config = OperatorConfig {
        channels,
        groups,
        real_poles: l,
        complex_pairs: k,
        r_f: 2,
        epsilon: EPSILON,
    };
    let mut p = OperatorParams::init(config, ModulationMode::GroupSpecific, rng).unwrap();
    p.pole = random_pole_params(rng, config.pole_config(), 1.5);
    p.heads.w_rho = Mat::from_fn(groups, channels, |_, _| rng.uniform_range(0.5, 1.5));
    p.heads.b_rho = (0..groups).map(|_| rng.uniform_range(0.0, 0.5)).collect();
    p.heads.w_theta = Mat::randn(groups, channels, 1.0, rng);
    let m = height * width;
    let mut region_a = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * channels);
    for t in 0..m {
        let a = t % width < width / 2;
        region_a.push(a);
        let (lo, hi) = if a { (1.0, 2.0) } else { (0.0, 0.5) };
        data.extend((0..channels).map(|_| rng.uniform_range(lo, hi)));
    }
    let x = TokenSequence::new(1, m, channels, data).unwrap().with_grid(height, width).unwrap();
    (p, x, region_a)
}

/// 9. Larger radius scale means strictly shorter memory, and the markers follow.
pub fn memory_map_monotonicity(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "memory_map_monotonicity";
    let mut hits = 0usize;
    let mut strict = true;
    for i in 0..MEMMAP_TRIALS {
        let mut rng = stream(opts, 9, i);
        let (h, w) = (rng.int_range(2, 8), 2 * rng.int_range(1, 4));
        let (p, x, region_a) = two_region_case(&mut rng, h, w);
        let run = || -> Result<bool> {
            let bank = p.bank()?;
            let scales = compute_scales(&x, &p.heads, p.config.groups)?;
            let poles = modulate(&bank, &scales, p.heads.clamp_radius)?;
            let map = memory_horizon(&poles, 0, (h, w), GroupSelection::All, 0)?;
            let max_a = (0..h * w).filter(|&t| region_a[t]).map(|t| map.tau[t]).fold(f64::MIN, f64::max);
            let min_b = (0..h * w).filter(|&t| !region_a[t]).map(|t| map.tau[t]).fold(f64::MAX, f64::min);
            let mk = map.markers();
            Ok(max_a < min_b && !region_a[mk.t1] && region_a[mk.t2])
        };
        match run() {
            Ok(true) => hits += 1,
            Ok(false) => strict = false,
            Err(e) => return CheckOutcome::failed(9, NAME, MEMMAP_TRIALS as f64, e),
        }
    }
    CheckOutcome::new(
        9,
        NAME,
        strict && hits == MEMMAP_TRIALS,
        hits as f64,
        MEMMAP_TRIALS as f64,
        format!("{hits}/{MEMMAP_TRIALS} trials with T1 in the slow region and T2 in the fast region"),
    )
}

/// 10. Forward and backward results are bit-identical across runs and thread counts.
pub fn determinism(opts: &VerifyOptions) -> CheckOutcome {
    const NAME: &str = "determinism";
    let mut rng = stream(opts, 10, 0);
    let (p, x, _) = random_oracle_case(&mut rng);
    let routes = vec![ScanRoute::forward(x.len), ScanRoute::backward(x.len)];
    let run = |threads: usize| -> Result<(Vec<u64>, Vec<u64>)> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::Error::Config(e.to_string()))?;
        pool.install(|| {
            let o = forward_multi_route(&x, &p, &routes, opts.precision)?;
            let g = backward(&x, &p, &routes, &o)?;
            Ok((
                o.data.iter().map(|v| v.to_bits()).collect(),
                g.flatten().iter().map(|v| v.to_bits()).collect(),
            ))
        })
    };
    let results: Vec<Result<(Vec<u64>, Vec<u64>)>> = [1, 2, 4, 1].iter().map(|&t| run(t)).collect();
    let first = match &results[0] {
        Ok(r) => r.clone(),
        Err(e) => return CheckOutcome::failed(10, NAME, 0.0, e),
    };
    let same = results.iter().all(|r| matches!(r, Ok(v) if *v == first));
    let single = forward_route(&x, &p, &routes[0], opts.precision).map(|o| o.data.iter().all(|v| v.is_finite()));
    CheckOutcome::new(
        10,
        NAME,
        same && matches!(single, Ok(true)),
        if same { 0.0 } else { 1.0 },
        0.0,
        "scan and gradient bits across 1, 2, 4 threads and repeated runs".into(),
    )
}

/// Window sanity for the memory horizon: used by the CLI report.
pub fn horizon_of(rho: f64) -> f64 {
    horizon(rho)
}
