use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::denominator::max_root_modulus;
use crate::error::{Error, Result};

/// `H(z) = d + P(z⁻¹) / Q(z⁻¹)` with `P = Σ taps_i z⁻ⁱ` and `Q = 1 + Σ q_i z⁻ⁱ`, `i ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferFunction {
    pub taps: Vec<f64>,
    pub q: Vec<f64>,
    pub d: f64,
}

/// `|Q(z⁻¹)|` at or below this counts as evaluating on a pole.
pub const POLE_TOLERANCE: f64 = 1e-12;

impl TransferFunction {
    pub fn new(taps: Vec<f64>, q: Vec<f64>, d: f64) -> Self {
        Self { taps, q, d }
    }

    /// `1 / Q(z⁻¹)`, written as `1 + (-Σ q_i z⁻ⁱ) / Q`.
    pub fn all_pole(q: Vec<f64>) -> Self {
        let taps = q.iter().map(|v| -v).collect();
        Self { taps, q, d: 1.0 }
    }

    pub fn direct(d: f64) -> Self {
        Self {
            taps: Vec::new(),
            q: Vec::new(),
            d,
        }
    }

    /// Largest pole modulus; fails with `Unstable` unless it is below 1.
    pub fn certify(&self) -> Result<f64> {
        if self.q.is_empty() {
            return Ok(0.0);
        }
        let mut coeffs = vec![1.0];
        coeffs.extend_from_slice(&self.q);
        let m = max_root_modulus(&coeffs)?;
        if m >= 1.0 {
            return Err(Error::Unstable(m));
        }
        Ok(m)
    }
}

fn poly_in(coeffs: &[f64], w: Complex64) -> Complex64 {
    // Σ_{i≥1} c_{i-1} wⁱ by Horner.
    coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| (acc + c) * w)
}

pub fn eval_h(tf: &TransferFunction, z: Complex64) -> Result<Complex64> {
    let w = z.inv();
    let q = Complex64::new(1.0, 0.0) + poly_in(&tf.q, w);
    if q.norm() <= POLE_TOLERANCE {
        return Err(Error::PoleEvaluation(q.norm()));
    }
    Ok(tf.d + poly_in(&tf.taps, w) / q)
}

/// Response to a unit impulse at `k = 0`.
pub fn impulse_response(tf: &TransferFunction, len: usize) -> Vec<f64> {
    let r = tf.q.len();
    let mut w = vec![0.0; len];
    let mut h = vec![0.0; len];
    for k in 0..len {
        let mut acc = if k == 0 { 1.0 } else { 0.0 };
        for i in 1..=r.min(k) {
            acc -= tf.q[i - 1] * w[k - i];
        }
        w[k] = acc;
        let mut out = if k == 0 { tf.d } else { 0.0 };
        for (i, &b) in tf.taps.iter().enumerate() {
            if k > i {
                out += b * w[k - i - 1];
            }
        }
        h[k] = out;
    }
    h
}

/// `X_k = Σ_n h_n e^{-2πikn/N}`, which samples `H` at `z = e^{2πik/N}`.
pub fn dft(h: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Index of the largest-magnitude bin in `0..=N/2`; the lowest index wins ties.
pub fn dominant_bin(h: &[f64]) -> usize {
    let spectrum = dft(h);
    let mut best = 0;
    for k in 1..=h.len() / 2 {
        if spectrum[k].norm() > spectrum[best].norm() {
            best = k;
        }
    }
    best
}

/// Least-squares slope of `ln |h_k|` through the local maxima of `|h|` for `k < max_k`.
/// For a dominant pole of radius `ρ` this estimates `ln ρ`.
pub fn log_envelope_slope(h: &[f64], max_k: usize) -> Option<f64> {
    let n = h.len().min(max_k);
    let mag: Vec<f64> = h[..n].iter().map(|v| v.abs()).collect();
    let peaks: Vec<(f64, f64)> = (1..n.saturating_sub(1))
        .filter(|&k| mag[k] > 0.0 && mag[k] >= mag[k - 1] && mag[k] >= mag[k + 1])
        .map(|k| (k as f64, mag[k].ln()))
        .collect();
    if peaks.len() < 2 {
        return None;
    }
    let len = peaks.len() as f64;
    let mx = peaks.iter().map(|p| p.0).sum::<f64>() / len;
    let my = peaks.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = peaks.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = peaks.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Frequency of DFT bin `k` as a fraction of the sampling rate.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    k as f64 / n as f64
}

/// `θ / (2π)` as a fraction of the sampling rate.
pub fn angle_frequency(theta: f64) -> f64 {
    theta / (2.0 * PI)
}
