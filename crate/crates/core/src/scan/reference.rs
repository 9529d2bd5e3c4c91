//! Naive f64 oracle: whole-sequence module calls, windows rebuilt per token, full history.

use super::{check_inputs, OperatorParams, ScanRoute};
use crate::denominator::expand_token_denominators;
use crate::error::{Error, Result};
use crate::modulation::{compute_scales, modulate};
use crate::numerator::{driving_signal, mixing_and_gates, CausalWindow};
use crate::sequence::TokenSequence;

/// `y_t^(g) = η_t^(g) - Σ_i q_{t,g,i} y_{t-i}^(g)` over a whole sequence.
///
/// `q` is `[M, G, r]` and `eta` is `[M, E]`, both in visiting order.
pub fn grouped_recurrence(q: &[f64], eta: &[f64], channels: usize, groups: usize, order: usize) -> Vec<f64> {
    let len = eta.len() / channels;
    let eg = channels / groups;
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        for ch in 0..channels {
            let g = ch / eg;
            let coeffs = &q[(t * groups + g) * order..(t * groups + g + 1) * order];
            let mut acc = eta[t * channels + ch];
            for i in 1..=order.min(t) {
                acc -= coeffs[i - 1] * y[(t - i) * channels + ch];
            }
            y[t * channels + ch] = acc;
        }
    }
    y
}

pub fn reference_forward(x: &TokenSequence, p: &OperatorParams, route: &ScanRoute) -> Result<TokenSequence> {
    p.validate()?;
    check_inputs(x, p, route)?;
    let cfg = p.config;
    let (e, groups, r, rf) = (cfg.channels, cfg.groups, cfg.order(), cfg.r_f);

    let bank = p.bank()?;
    let scales = compute_scales(x, &p.heads, groups)?;
    let poles = modulate(&bank, &scales, p.heads.clamp_radius)?;
    let q = expand_token_denominators(&poles);

    let mut out = TokenSequence::zeros(x.batch, x.len, e);
    out.grid = x.grid;
    for b in 0..x.batch {
        let latents: Vec<Vec<f64>> = route
            .order
            .iter()
            .map(|&t| p.numerator.project(x.token(b, t)))
            .collect();
        let mut q_route = Vec::with_capacity(x.len * groups * r);
        let mut eta = Vec::with_capacity(x.len * e);
        for (pos, &t) in route.order.iter().enumerate() {
            let window = CausalWindow::at(&latents, pos, rf, r);
            let (alpha, gamma) = mixing_and_gates(x.token(b, t), &p.numerator);
            eta.extend(driving_signal(&window, &alpha, &gamma, &p.numerator.u));
            for g in 0..groups {
                q_route.extend_from_slice(q.at(b, t, g));
            }
        }
        let y = grouped_recurrence(&q_route, &eta, e, groups, r);
        for (pos, &t) in route.order.iter().enumerate() {
            let xt = x.token(b, t).to_vec();
            let o = out.token_mut(b, t);
            for ch in 0..e {
                o[ch] = y[pos * e + ch] + p.d[ch] * xt[ch];
                if !o[ch].is_finite() {
                    return Err(Error::NonFiniteDetected { batch: b, token: t });
                }
            }
        }
    }
    Ok(out)
}
