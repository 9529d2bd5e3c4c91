//! Ring-buffer scan kernel, generic over the compute float.
//!
//! Scales, modulated poles and the expanded `q` coefficients are always computed in f64 and
//! then cast; the numerator and the recurrence run in `T`.

use num_traits::Float;
use rayon::prelude::*;

use super::{check_inputs, OperatorParams, Precision, ScanRoute};
use crate::denominator::{expand_sorted_into, MAX_ORDER};
use crate::error::{Error, Result};
use crate::modulation::modulate_group_into;
use crate::numerator::LatentHistory;
use crate::pole_bank::ConstrainedPoleBank;
use crate::sequence::TokenSequence;

struct Prepared<T> {
    bank: ConstrainedPoleBank,
    u: Vec<T>,
    v: Vec<T>,
    w_alpha: Vec<T>,
    w_gamma: Vec<T>,
    d: Vec<T>,
}

fn cast<T: Float>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from(x).expect("finite parameter")).collect()
}

impl<T: Float> Prepared<T> {
    fn new(p: &OperatorParams) -> Result<Self> {
        Ok(Self {
            bank: p.bank()?,
            u: cast(p.numerator.u.as_slice()),
            v: cast(p.numerator.v.as_slice()),
            w_alpha: cast(p.numerator.w_alpha.as_slice()),
            w_gamma: cast(p.numerator.w_gamma.as_slice()),
            d: cast(&p.d),
        })
    }
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Runs one batch row along one route, writing `o` in original token order into `out`.
fn scan_row<T: Float + Default>(
    x: &TokenSequence,
    p: &OperatorParams,
    prep: &Prepared<T>,
    b: usize,
    route: &ScanRoute,
    out: &mut [f64],
) -> Result<()> {
    let cfg = p.config;
    let (e, groups, r, rf) = (cfg.channels, cfg.groups, cfg.order(), cfg.r_f);
    let eg = e / groups;
    let clamp = p.heads.clamp_radius;

    let mut s_rho = vec![0.0; groups];
    let mut s_theta = vec![0.0; groups];
    let mut factors = Vec::with_capacity(cfg.real_poles + cfg.complex_pairs);
    let mut buf = [0.0f64; MAX_ORDER + 1];
    let mut q = vec![T::zero(); groups * r];

    let mut phist = LatentHistory::<T>::new(rf, r);
    let mut yhist = LatentHistory::<T>::new(e, r);
    let mut xt = vec![T::zero(); e];
    let mut phi = vec![T::zero(); rf];
    let mut alpha = vec![T::zero(); r];
    let mut zeta = vec![T::zero(); rf];
    let mut y = vec![T::zero(); e];

    for &t in &route.order {
        let x64 = x.token(b, t);
        p.heads.token_scales(x64, &mut s_rho, &mut s_theta);
        for g in 0..groups {
            modulate_group_into(&prep.bank, g, s_rho[g], s_theta[g], clamp, &mut factors);
            expand_sorted_into(&mut factors, &mut buf);
            for i in 0..r {
                q[g * r + i] = T::from(buf[i + 1]).unwrap();
            }
        }
        for (dst, &src) in xt.iter_mut().zip(x64) {
            *dst = T::from(src).unwrap();
        }

        phi.iter_mut().for_each(|v| *v = T::zero());
        for (ch, &xv) in xt.iter().enumerate() {
            let row = &prep.v[ch * rf..(ch + 1) * rf];
            for (acc, &w) in phi.iter_mut().zip(row) {
                *acc = *acc + w * xv;
            }
        }
        for (i, a) in alpha.iter_mut().enumerate() {
            *a = dot(&prep.w_alpha[i * e..(i + 1) * e], &xt);
        }
        zeta.iter_mut().for_each(|v| *v = T::zero());
        for (i, &a) in alpha.iter().enumerate() {
            for (z, &l) in zeta.iter_mut().zip(phist.lag(i + 1)) {
                *z = *z + a * l;
            }
        }
        for (k, z) in zeta.iter_mut().enumerate() {
            *z = *z * sigmoid(dot(&prep.w_gamma[k * e..(k + 1) * e], &xt));
        }

        for (ch, yv) in y.iter_mut().enumerate() {
            *yv = dot(&prep.u[ch * rf..(ch + 1) * rf], &zeta);
        }
        for i in 1..=r {
            let lagged = yhist.lag(i);
            for (ch, (yv, &l)) in y.iter_mut().zip(lagged).enumerate() {
                *yv = *yv - q[(ch / eg) * r + i - 1] * l;
            }
        }

        let o = &mut out[t * e..(t + 1) * e];
        for ch in 0..e {
            let v = y[ch] + prep.d[ch] * xt[ch];
            if !v.is_finite() {
                return Err(Error::NonFiniteDetected { batch: b, token: t });
            }
            o[ch] = v.to_f64().unwrap();
        }
        phist.push(&phi);
        yhist.push(&y);
    }
    Ok(())
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn run_routes<T: Float + Default + Send + Sync>(
    x: &TokenSequence,
    p: &OperatorParams,
    routes: &[ScanRoute],
) -> Result<Vec<Vec<f64>>> {
    let prep = Prepared::<T>::new(p)?;
    let row = x.len * x.channels;
    let jobs: Vec<(usize, usize)> = (0..routes.len())
        .flat_map(|ri| (0..x.batch).map(move |b| (ri, b)))
        .collect();
    let results: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(ri, b)| {
            let mut out = vec![0.0; row];
            scan_row(x, p, &prep, b, &routes[ri], &mut out)?;
            Ok(out)
        })
        .collect();
    // Sequential collection keeps the reported error independent of scheduling.
    results.into_iter().collect()
}

fn validate_all(x: &TokenSequence, p: &OperatorParams, routes: &[ScanRoute]) -> Result<()> {
    if routes.is_empty() {
        return Err(Error::Config("at least one route is required".into()));
    }
    p.validate()?;
    for route in routes {
        check_inputs(x, p, route)?;
    }
    Ok(())
}

/// Applies the operator along a single route.
pub fn forward_route(
    x: &TokenSequence,
    p: &OperatorParams,
    route: &ScanRoute,
    precision: Precision,
) -> Result<TokenSequence> {
    forward_multi_route(x, p, std::slice::from_ref(route), precision)
}

/// Mean of the per-route outputs. Work is spread over (route, batch row) pairs on the
/// current rayon pool; the fusion order is fixed.
pub fn forward_multi_route(
    x: &TokenSequence,
    p: &OperatorParams,
    routes: &[ScanRoute],
    precision: Precision,
) -> Result<TokenSequence> {
    validate_all(x, p, routes)?;
    let rows = match precision {
        Precision::F32 => run_routes::<f32>(x, p, routes)?,
        Precision::F64 => run_routes::<f64>(x, p, routes)?,
    };
    let row = x.len * x.channels;
    let mut data = vec![0.0; x.batch * row];
    let n = routes.len() as f64;
    for b in 0..x.batch {
        let dst = &mut data[b * row..(b + 1) * row];
        if routes.len() == 1 {
            dst.copy_from_slice(&rows[b]);
            continue;
        }
        for ri in 0..routes.len() {
            for (d, s) in dst.iter_mut().zip(&rows[ri * x.batch + b]) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|v| *v /= n);
    }
    let mut out = TokenSequence::new(x.batch, x.len, x.channels, data)?;
    out.grid = x.grid;
    Ok(out)
}
