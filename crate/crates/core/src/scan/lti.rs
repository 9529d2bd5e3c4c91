//! LTI cross-check against a companion-form state-space simulation.
//!
//! With zero heads the poles are token-independent. A constant bias channel makes the
//! per-lag mixing `α` constant, so the operator reduces to the fixed rational filter
//! `d + Σ β_i z⁻ⁱ / Q(z⁻¹)` on the signal channel.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{forward_route, OperatorConfig, OperatorParams, Precision, ScanRoute};
use crate::denominator::expand_poles;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::modulation::{ModulationHeads, ModulationMode};
use crate::numerator::NumeratorParams;
use crate::pole_bank::{base_factors, constrain, PoleBankParams};
use crate::sequence::TokenSequence;

#[derive(Debug, Clone, Serialize)]
pub struct LtiReport {
    pub len: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub operator: Vec<f64>,
    pub companion: Vec<f64>,
}

/// Two-channel operator: channel 0 carries the constant 1, channel 1 the signal.
pub fn lti_operator(pole: &PoleBankParams, taps: &[f64], d: f64) -> Result<OperatorParams> {
    let pc = pole.config;
    if pc.groups != 1 {
        return Err(Error::Config(format!("LTI check needs G = 1, got {}", pc.groups)));
    }
    let r = pc.order();
    if taps.len() != r {
        return Err(Error::ShapeMismatch(format!("{} taps for order {r}", taps.len())));
    }
    let config = OperatorConfig {
        channels: 2,
        groups: 1,
        real_poles: pc.real_poles,
        complex_pairs: pc.complex_pairs,
        r_f: 1,
        epsilon: pc.epsilon,
    };
    let numerator = NumeratorParams {
        u: Mat::from_vec(2, 1, vec![0.0, 2.0])?,
        v: Mat::from_vec(2, 1, vec![0.0, 1.0])?,
        w_alpha: Mat::from_fn(r, 2, |i, j| if j == 0 { taps[i] } else { 0.0 }),
        w_gamma: Mat::zeros(1, 2),
        r_f: 1,
    };
    let p = OperatorParams {
        config,
        pole: pole.clone(),
        heads: ModulationHeads::zeros(ModulationMode::Shared, 1, 2),
        numerator,
        d: vec![0.0, d],
    };
    p.validate()?;
    Ok(p)
}

/// Simulates `h_t = A h_{t-1} + b u_t`, `v_t = c·h_t + d u_t` with the `(r+1)`-dimensional
/// companion state `h_t = [w_t, w_{t-1}, …, w_{t-r}]`.
pub fn companion_simulate(q: &[f64], taps: &[f64], d: f64, u: &[f64]) -> Vec<f64> {
    let r = q.len();
    let n = r + 1;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, &qi) in q.iter().enumerate() {
        a[(0, i)] = -qi;
    }
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[0] = 1.0;
    let mut c = DVector::<f64>::zeros(n);
    for (i, &t) in taps.iter().enumerate() {
        c[i + 1] = t;
    }
    let mut h = DVector::<f64>::zeros(n);
    u.iter()
        .map(|&ut| {
            h = &a * &h + &b * ut;
            c.dot(&h) + d * ut
        })
        .collect()
}

pub fn lti_crosscheck(pole: &PoleBankParams, taps: &[f64], d: f64, input: &[f64], tol: f64) -> Result<LtiReport> {
    let p = lti_operator(pole, taps, d)?;
    let m = input.len();
    let data = input.iter().flat_map(|&u| [1.0, u]).collect();
    let x = TokenSequence::new(1, m, 2, data)?;
    let o = forward_route(&x, &p, &ScanRoute::forward(m), Precision::F64)?;
    let operator: Vec<f64> = (0..m).map(|t| o.token(0, t)[1]).collect();

    let bank = constrain(pole)?;
    let coeffs = expand_poles(&base_factors(&bank, 0)?)?;
    let companion = companion_simulate(&coeffs[1..], taps, d, input);

    let max_abs_error = operator
        .iter()
        .zip(&companion)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if max_abs_error.is_nan() || max_abs_error > tol {
        return Err(Error::MismatchBeyondTolerance {
            what: "LTI companion simulation".into(),
            error: max_abs_error,
            tolerance: tol,
        });
    }
    Ok(LtiReport {
        len: m,
        max_abs_error,
        tolerance: tol,
        operator,
        companion,
    })
}
