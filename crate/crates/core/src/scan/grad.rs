//! Hand-derived reverse pass through the whole operator, and a finite-difference check.
//!
//! Conventions: the angle clip passes gradient only strictly inside `(0, π)`; a radius that
//! hit the `1 - ε` cap receives none. The denominator product is differentiated factor by
//! factor through the product of the remaining factors.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use super::{forward_multi_route, OperatorParams, Precision, ScanRoute, PARAM_BLOCKS};
use crate::denominator::{expand_sorted_into, MAX_ORDER};
use crate::distill::{distill_grads, distill_loss};
use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::modulation::modulate_group_into;
use crate::pole_bank::{sigmoid, ConstrainedPoleBank, Factor};
use crate::sequence::TokenSequence;

/// Gradients stored in a parameter-shaped container: every trainable field holds
/// `∂L/∂field`, the configuration fields are copied from the parameters.
pub type ParamGrads = OperatorParams;

#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// `Σ o²`
    SumSquares,
    /// Single-layer L1 distillation towards a fixed teacher output.
    Distill { teacher: &'a TokenSequence },
}

impl Loss<'_> {
    pub fn value(&self, o: &TokenSequence) -> Result<f64> {
        match self {
            Loss::SumSquares => Ok(o.data.iter().map(|v| v * v).sum()),
            Loss::Distill { teacher } => distill_loss(std::slice::from_ref(o), std::slice::from_ref(*teacher)),
        }
    }

    /// `∂L/∂o`, same layout as `o`.
    pub fn grad(&self, o: &TokenSequence) -> Result<TokenSequence> {
        let data = match self {
            Loss::SumSquares => o.data.iter().map(|v| 2.0 * v).collect(),
            Loss::Distill { teacher } => {
                let mut g = distill_grads(std::slice::from_ref(o), std::slice::from_ref(*teacher))?;
                g.student.swap_remove(0)
            }
        };
        TokenSequence::new(o.batch, o.len, o.channels, data)
    }
}

/// Everything the reverse pass needs from one forward sweep of one (batch row, route).
struct Tape {
    pre_rho: Vec<f64>,
    pre_theta: Vec<f64>,
    s_rho: Vec<f64>,
    s_theta: Vec<f64>,
    q: Vec<f64>,
    phi: Vec<f64>,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    psi: Vec<f64>,
    y: Vec<f64>,
}

fn record(x: &TokenSequence, p: &OperatorParams, bank: &ConstrainedPoleBank, b: usize, route: &ScanRoute) -> Tape {
    let cfg = p.config;
    let (e, groups, r, rf) = (cfg.channels, cfg.groups, cfg.order(), cfg.r_f);
    let eg = e / groups;
    let m = x.len;
    let c = p.heads.rows();
    let mut tape = Tape {
        pre_rho: Vec::with_capacity(m * c),
        pre_theta: Vec::with_capacity(m * c),
        s_rho: vec![0.0; m * groups],
        s_theta: vec![0.0; m * groups],
        q: Vec::with_capacity(m * groups * r),
        phi: Vec::with_capacity(m * rf),
        alpha: Vec::with_capacity(m * r),
        gamma: Vec::with_capacity(m * rf),
        psi: Vec::with_capacity(m * rf),
        y: vec![0.0; m * e],
    };
    let mut factors = Vec::new();
    let mut buf = [0.0; MAX_ORDER + 1];
    for (pos, &t) in route.order.iter().enumerate() {
        let xt = x.token(b, t);
        let (pr, pt) = p.heads.preactivations(xt);
        for g in 0..groups {
            let row = p.heads.row_for_group(g);
            let sr = p.heads.radius_scale(pr[row]);
            let st = p.heads.angle_scale(pt[row]);
            tape.s_rho[pos * groups + g] = sr;
            tape.s_theta[pos * groups + g] = st;
            modulate_group_into(bank, g, sr, st, p.heads.clamp_radius, &mut factors);
            expand_sorted_into(&mut factors, &mut buf);
            tape.q.extend_from_slice(&buf[1..=r]);
        }
        tape.pre_rho.extend(pr);
        tape.pre_theta.extend(pt);

        let phi = p.numerator.v.matvec_t(xt);
        let alpha = p.numerator.w_alpha.matvec(xt);
        let gamma: Vec<f64> = (0..rf).map(|k| sigmoid(dot(p.numerator.w_gamma.row(k), xt))).collect();
        let mut psi = vec![0.0; rf];
        for i in 1..=r.min(pos) {
            let lagged = &tape.phi[(pos - i) * rf..(pos - i + 1) * rf];
            for k in 0..rf {
                psi[k] += alpha[i - 1] * lagged[k];
            }
        }
        let zeta: Vec<f64> = psi.iter().zip(&gamma).map(|(a, g)| a * g).collect();
        let eta = p.numerator.u.matvec(&zeta);
        for ch in 0..e {
            let g = ch / eg;
            let mut acc = eta[ch];
            for i in 1..=r.min(pos) {
                acc -= tape.q[(pos * groups + g) * r + i - 1] * tape.y[(pos - i) * e + ch];
            }
            tape.y[pos * e + ch] = acc;
        }
        tape.phi.extend(phi);
        tape.alpha.extend(alpha);
        tape.gamma.extend(gamma);
        tape.psi.extend(psi);
    }
    tape
}

/// Base-pole accumulators, `[G, K]` and `[G, L]`.
struct BaseGrads {
    rho_c: Mat,
    theta_c: Mat,
    rho_bar_r: Mat,
    s_bar: Mat,
}

/// `∂P/∂c_j[m]` for `P = Π_j c_j`, contracted with `gp`: returns `g_j[m]` per factor.
fn product_backward(coeffs: &[Vec<f64>], gp: &[f64]) -> Vec<Vec<f64>> {
    coeffs
        .iter()
        .enumerate()
        .map(|(j, cj)| {
            let mut others = vec![1.0];
            for (k, ck) in coeffs.iter().enumerate() {
                if k == j {
                    continue;
                }
                let mut next = vec![0.0; others.len() + ck.len() - 1];
                for (a, &oa) in others.iter().enumerate() {
                    for (b, &cb) in ck.iter().enumerate() {
                        next[a + b] += oa * cb;
                    }
                }
                others = next;
            }
            (0..cj.len())
                .map(|m| (0..others.len()).map(|k| gp[k + m] * others[k]).sum())
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn backward_row(
    x: &TokenSequence,
    p: &OperatorParams,
    bank: &ConstrainedPoleBank,
    b: usize,
    route: &ScanRoute,
    grad_out: &TokenSequence,
    weight: f64,
) -> (OperatorParams, BaseGrads) {
    let cfg = p.config;
    let (e, groups, r, rf) = (cfg.channels, cfg.groups, cfg.order(), cfg.r_f);
    let (l_n, k_n) = (cfg.real_poles, cfg.complex_pairs);
    let eg = e / groups;
    let m = x.len;
    let tape = record(x, p, bank, b, route);
    let cap = p.heads.clamp_radius.then_some(1.0 - cfg.epsilon);
    let c_rows = p.heads.rows();

    let mut g = zeroed(p);
    let mut base = BaseGrads {
        rho_c: Mat::zeros(groups, k_n),
        theta_c: Mat::zeros(groups, k_n),
        rho_bar_r: Mat::zeros(groups, l_n),
        s_bar: Mat::zeros(groups, l_n),
    };
    let mut gy = vec![0.0; m * e];
    let mut gphi = vec![0.0; m * rf];
    let mut gq = vec![0.0; r + 1];
    let mut gs_rho = vec![0.0; groups];
    let mut gs_theta = vec![0.0; groups];
    let mut gpre_rho = vec![0.0; c_rows];
    let mut gpre_theta = vec![0.0; c_rows];

    for pos in (0..m).rev() {
        let t = route.order[pos];
        let xt = x.token(b, t);
        let go = grad_out.token(b, t);

        for ch in 0..e {
            let grp = ch / eg;
            let mut v = weight * go[ch];
            for i in 1..=r {
                if pos + i < m {
                    v -= tape.q[((pos + i) * groups + grp) * r + i - 1] * gy[(pos + i) * e + ch];
                }
            }
            gy[pos * e + ch] = v;
            g.d[ch] += weight * go[ch] * xt[ch];
        }
        let gy_t = &gy[pos * e..(pos + 1) * e];

        // Numerator.
        let gamma = &tape.gamma[pos * rf..(pos + 1) * rf];
        let psi = &tape.psi[pos * rf..(pos + 1) * rf];
        let alpha = &tape.alpha[pos * r..(pos + 1) * r];
        let mut gzeta = vec![0.0; rf];
        for ch in 0..e {
            for k in 0..rf {
                let zeta = gamma[k] * psi[k];
                let gu = g.numerator.u.get(ch, k) + gy_t[ch] * zeta;
                g.numerator.u.set(ch, k, gu);
                gzeta[k] += p.numerator.u.get(ch, k) * gy_t[ch];
            }
        }
        let mut gpsi = vec![0.0; rf];
        for k in 0..rf {
            let gpre = gzeta[k] * psi[k] * gamma[k] * (1.0 - gamma[k]);
            gpsi[k] = gzeta[k] * gamma[k];
            for (w, &xv) in g.numerator.w_gamma.row_mut(k).iter_mut().zip(xt) {
                *w += gpre * xv;
            }
        }
        for i in 1..=r.min(pos) {
            let src = pos - i;
            let galpha = dot(&tape.phi[src * rf..(src + 1) * rf], &gpsi);
            for (w, &xv) in g.numerator.w_alpha.row_mut(i - 1).iter_mut().zip(xt) {
                *w += galpha * xv;
            }
            for k in 0..rf {
                gphi[src * rf + k] += alpha[i - 1] * gpsi[k];
            }
        }
        for (ch, &xv) in xt.iter().enumerate() {
            for k in 0..rf {
                let gv = g.numerator.v.get(ch, k) + xv * gphi[pos * rf + k];
                g.numerator.v.set(ch, k, gv);
            }
        }

        // Denominator and poles.
        gs_rho.iter_mut().for_each(|v| *v = 0.0);
        gs_theta.iter_mut().for_each(|v| *v = 0.0);
        for grp in 0..groups {
            gq[0] = 0.0;
            let mut any = false;
            for i in 1..=r {
                let mut acc = 0.0;
                if pos >= i {
                    for ch in grp * eg..(grp + 1) * eg {
                        acc -= gy_t[ch] * tape.y[(pos - i) * e + ch];
                    }
                }
                gq[i] = acc;
                any |= acc != 0.0;
            }
            if !any {
                continue;
            }
            let s = tape.s_rho[pos * groups + grp];
            let st = tape.s_theta[pos * groups + grp];
            let mut coeffs = Vec::with_capacity(l_n + k_n);
            let mut parts = Vec::with_capacity(l_n + k_n);
            for l in 0..l_n {
                let mb = bank.rho_bar_r.get(grp, l);
                let raw = if mb > 0.0 { (s * mb.ln()).exp() } else { 0.0 };
                let clamped = cap.is_some_and(|c| raw > c);
                let mag = if clamped { cap.unwrap() } else { raw };
                coeffs.push(Factor::Real { a: bank.s_bar.get(grp, l) * mag }.coeffs());
                parts.push((raw, mag, clamped));
            }
            for k in 0..k_n {
                let rb = bank.rho_c.get(grp, k);
                let raw = if rb > 0.0 { (s * rb.ln()).exp() } else { 0.0 };
                let clamped = cap.is_some_and(|c| raw > c);
                let rho = if clamped { cap.unwrap() } else { raw };
                let theta = (st * bank.theta_c.get(grp, k)).clamp(0.0, PI);
                coeffs.push(Factor::Complex { rho, theta }.coeffs());
                parts.push((raw, rho, clamped));
            }
            let gc = product_backward(&coeffs, &gq);
            for l in 0..l_n {
                let (raw, mag, clamped) = parts[l];
                let mb = bank.rho_bar_r.get(grp, l);
                let sb = bank.s_bar.get(grp, l);
                let ga = -gc[l][1];
                base.s_bar.as_mut_slice()[grp * l_n + l] += ga * mag;
                if !clamped && mb > 0.0 {
                    let gm = ga * sb;
                    gs_rho[grp] += gm * raw * mb.ln();
                    base.rho_bar_r.as_mut_slice()[grp * l_n + l] += gm * raw * s / mb;
                }
            }
            for k in 0..k_n {
                let (raw, rho, clamped) = parts[l_n + k];
                let rb = bank.rho_c.get(grp, k);
                let tb = bank.theta_c.get(grp, k);
                let v = st * tb;
                let theta = v.clamp(0.0, PI);
                let gcf = &gc[l_n + k];
                let grho = gcf[1] * (-2.0 * theta.cos()) + gcf[2] * 2.0 * rho;
                let gtheta = gcf[1] * 2.0 * rho * theta.sin();
                if !clamped && rb > 0.0 {
                    gs_rho[grp] += grho * raw * rb.ln();
                    base.rho_c.as_mut_slice()[grp * k_n + k] += grho * raw * s / rb;
                }
                if v > 0.0 && v < PI {
                    gs_theta[grp] += gtheta * tb;
                    base.theta_c.as_mut_slice()[grp * k_n + k] += gtheta * st;
                }
            }
        }

        // Modulation heads.
        gpre_rho.iter_mut().for_each(|v| *v = 0.0);
        gpre_theta.iter_mut().for_each(|v| *v = 0.0);
        for grp in 0..groups {
            let row = p.heads.row_for_group(grp);
            let pr = tape.pre_rho[pos * c_rows + row];
            let pt = tape.pre_theta[pos * c_rows + row];
            gpre_rho[row] += gs_rho[grp] * sigmoid(pr) / p.heads.delta_0;
            let th = pt.tanh();
            gpre_theta[row] += gs_theta[grp] * p.heads.lambda_theta * (1.0 - th * th);
        }
        for row in 0..c_rows {
            for (w, &xv) in g.heads.w_rho.row_mut(row).iter_mut().zip(xt) {
                *w += gpre_rho[row] * xv;
            }
            g.heads.b_rho[row] += gpre_rho[row];
            for (w, &xv) in g.heads.w_theta.row_mut(row).iter_mut().zip(xt) {
                *w += gpre_theta[row] * xv;
            }
            g.heads.b_theta[row] += gpre_theta[row];
        }
    }
    (g, base)
}

fn zeroed(p: &OperatorParams) -> OperatorParams {
    let mut g = p.clone();
    let n = g.flatten().len();
    g.unflatten(&vec![0.0; n]);
    g
}

/// `∂L/∂params` given `∂L/∂o` for the mean-fused multi-route output.
pub fn backward(
    x: &TokenSequence,
    p: &OperatorParams,
    routes: &[ScanRoute],
    grad_out: &TokenSequence,
) -> Result<ParamGrads> {
    p.validate()?;
    if routes.is_empty() {
        return Err(Error::Config("at least one route is required".into()));
    }
    for route in routes {
        super::check_inputs(x, p, route)?;
    }
    if (grad_out.batch, grad_out.len, grad_out.channels) != (x.batch, x.len, x.channels) {
        return Err(Error::ShapeMismatch("upstream gradient does not match the output shape".into()));
    }
    let bank = p.bank()?;
    let weight = 1.0 / routes.len() as f64;
    let jobs: Vec<(usize, usize)> = (0..routes.len())
        .flat_map(|ri| (0..x.batch).map(move |b| (ri, b)))
        .collect();
    let parts: Vec<(OperatorParams, BaseGrads)> = jobs
        .par_iter()
        .map(|&(ri, b)| backward_row(x, p, &bank, b, &routes[ri], grad_out, weight))
        .collect();

    let cfg = p.config;
    let (groups, l_n, k_n) = (cfg.groups, cfg.real_poles, cfg.complex_pairs);
    let mut total = zeroed(p).flatten();
    let mut base = BaseGrads {
        rho_c: Mat::zeros(groups, k_n),
        theta_c: Mat::zeros(groups, k_n),
        rho_bar_r: Mat::zeros(groups, l_n),
        s_bar: Mat::zeros(groups, l_n),
    };
    for (g, bg) in &parts {
        for (t, v) in total.iter_mut().zip(g.flatten()) {
            *t += v;
        }
        for (dst, src) in [
            (&mut base.rho_c, &bg.rho_c),
            (&mut base.theta_c, &bg.theta_c),
            (&mut base.rho_bar_r, &bg.rho_bar_r),
            (&mut base.s_bar, &bg.s_bar),
        ] {
            for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d += s;
            }
        }
    }
    let mut out = zeroed(p);
    out.unflatten(&total);

    // Constraint maps back to the unconstrained trainables.
    let scale = 1.0 - cfg.epsilon;
    let dsig = |h: f64| {
        let s = sigmoid(h);
        s * (1.0 - s)
    };
    for i in 0..groups {
        for k in 0..k_n {
            out.pole.rho_hat_c.set(i, k, base.rho_c.get(i, k) * scale * dsig(p.pole.rho_hat_c.get(i, k)));
            out.pole.theta_hat.set(i, k, base.theta_c.get(i, k) * PI * dsig(p.pole.theta_hat.get(i, k)));
        }
        for l in 0..l_n {
            out.pole.rho_hat_r.set(i, l, base.rho_bar_r.get(i, l) * scale * dsig(p.pole.rho_hat_r.get(i, l)));
            let sb = p.pole.s_hat.get(i, l).tanh();
            out.pole.s_hat.set(i, l, base.s_bar.get(i, l) * (1.0 - sb * sb));
        }
    }

    let flat = out.flatten();
    if let Some(j) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(flat_name(p, j)));
    }
    Ok(out)
}

/// Loss value and its parameter gradient, f64 throughout.
pub fn loss_and_grad(
    x: &TokenSequence,
    p: &OperatorParams,
    routes: &[ScanRoute],
    loss: Loss<'_>,
) -> Result<(f64, ParamGrads)> {
    let o = forward_multi_route(x, p, routes, Precision::F64)?;
    let grad_out = loss.grad(&o)?;
    Ok((loss.value(&o)?, backward(x, p, routes, &grad_out)?))
}

/// `"W_rho[3]"`-style name of flat parameter `j`.
pub fn flat_name(p: &OperatorParams, mut j: usize) -> String {
    for (name, n) in p.param_names() {
        if j < n {
            return format!("{name}[{j}]");
        }
        j -= n;
    }
    format!("<out of range {j}>")
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` with `floor = FLOOR_REL · max(1, ‖n‖_∞)`.
pub const FLOOR_REL: f64 = 1e-4;

/// Compares [`backward`] with central differences of step `step` for every trainable.
pub fn grad_check(
    x: &TokenSequence,
    p: &OperatorParams,
    routes: &[ScanRoute],
    loss: Loss<'_>,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(x, p, routes, loss)?;
    let analytic = analytic.flatten();
    let base = p.flatten();
    let eval = |j: usize, delta: f64| -> Result<f64> {
        let mut q = p.clone();
        let mut flat = base.clone();
        flat[j] += delta;
        q.unflatten(&flat);
        loss.value(&forward_multi_route(x, &q, routes, Precision::F64)?)
    };
    let numeric: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map(|j| Ok((eval(j, step)? - eval(j, -step)?) / (2.0 * step)))
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let floor = FLOOR_REL * numeric.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut report = GradCheckReport {
        n_params: base.len(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        step,
        floor,
    };
    for (j, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel;
            report.worst_param = flat_name(p, j);
            report.analytic = a;
            report.numeric = n;
        }
    }
    debug_assert_eq!(PARAM_BLOCKS.len(), p.param_names().len());
    Ok(report)
}
