//! Grouped base pole bank.
//!
//! Each of the `G` channel groups owns `L` real poles and `K` complex-conjugate pairs
//! (order `r = L + 2K`). Unconstrained trainables are squashed into the open stability
//! region with a margin `ε`:
//!
//! ```text
//! ρ  = (1-ε) σ(ρ̂)        θ = π σ(θ̂)
//! ρ̄ᴿ = (1-ε) σ(ρ̂ᴿ)      s̄ = tanh(ŝ)      a = s̄ ρ̄ᴿ
//! ```

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::denominator::{self, MAX_ORDER};
use crate::error::{Error, Result};
use crate::mat::Mat;

pub const DEFAULT_EPSILON: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoleBankConfig {
    #[serde(rename = "G")]
    pub groups: usize,
    #[serde(rename = "L")]
    pub real_poles: usize,
    #[serde(rename = "K")]
    pub complex_pairs: usize,
    pub epsilon: f64,
}

impl PoleBankConfig {
    pub fn new(groups: usize, real_poles: usize, complex_pairs: usize, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            groups,
            real_poles,
            complex_pairs,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Denominator order `r = L + 2K`.
    pub fn order(&self) -> usize {
        self.real_poles + 2 * self.complex_pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("G must be at least 1".into()));
        }
        let r = self.order();
        if r == 0 {
            return Err(Error::Config("L + 2K must be at least 1".into()));
        }
        if r > MAX_ORDER {
            return Err(Error::Config(format!("order {r} exceeds the supported maximum {MAX_ORDER}")));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Unconstrained pole variables, each stored as a `[G, K]` or `[G, L]` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleBankParams {
    #[serde(flatten)]
    pub config: PoleBankConfig,
    pub rho_hat_c: Mat,
    pub theta_hat: Mat,
    pub rho_hat_r: Mat,
    pub s_hat: Mat,
}

impl PoleBankParams {
    pub fn zeros(config: PoleBankConfig) -> Self {
        let (g, l, k) = (config.groups, config.real_poles, config.complex_pairs);
        Self {
            config,
            rho_hat_c: Mat::zeros(g, k),
            theta_hat: Mat::zeros(g, k),
            rho_hat_r: Mat::zeros(g, l),
            s_hat: Mat::zeros(g, l),
        }
    }

    /// Spread-of-timescales initialization.
    ///
    /// Angles are equispaced over `(0, π)` across the `K` pairs, radii are log-spaced in
    /// `[0.5, 0.99(1-ε)]` across every pole slot of every group, and `ŝ = 0.5`.
    pub fn init(config: PoleBankConfig) -> Result<Self> {
        config.validate()?;
        let (g, l, k) = (config.groups, config.real_poles, config.complex_pairs);
        let eps = config.epsilon;
        let slots = g * (l + k);
        let (lo, hi) = (0.5f64, 0.99 * (1.0 - eps));
        let radius = |idx: usize| -> f64 {
            if slots <= 1 {
                return hi;
            }
            let t = idx as f64 / (slots - 1) as f64;
            (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        };
        let to_hat = |rho: f64| logit(rho / (1.0 - eps));

        let mut p = Self::zeros(config);
        for gi in 0..g {
            for li in 0..l {
                p.rho_hat_r.set(gi, li, to_hat(radius(gi * (l + k) + li)));
                p.s_hat.set(gi, li, 0.5);
            }
            for ki in 0..k {
                p.rho_hat_c.set(gi, ki, to_hat(radius(gi * (l + k) + l + ki)));
                p.theta_hat.set(gi, ki, logit((ki as f64 + 0.5) / k as f64));
            }
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (g, l, k) = (self.config.groups, self.config.real_poles, self.config.complex_pairs);
        for (name, m, cols) in [
            ("rho_hat_c", &self.rho_hat_c, k),
            ("theta_hat", &self.theta_hat, k),
            ("rho_hat_r", &self.rho_hat_r, l),
            ("s_hat", &self.s_hat, l),
        ] {
            // [G, 0] matrices serialize as G empty rows, or as [] when G rows are lost
            let ok = m.shape() == (g, cols) || (cols == 0 && m.rows() == 0);
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected ({g}, {cols})",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// Stable base poles, `[G, L]` real and `[G, K]` complex.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedPoleBank {
    pub config: PoleBankConfig,
    pub a: Mat,
    pub s_bar: Mat,
    pub rho_bar_r: Mat,
    pub rho_c: Mat,
    pub theta_c: Mat,
}

impl ConstrainedPoleBank {
    pub fn groups(&self) -> usize {
        self.config.groups
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }
}

pub fn constrain(params: &PoleBankParams) -> Result<ConstrainedPoleBank> {
    params.validate()?;
    Ok(constrain_with_margin(params, params.config.epsilon))
}

/// Same map with an arbitrary margin and no validation. Used to inject a broken margin
/// into the stability fuzz.
pub(crate) fn constrain_with_margin(params: &PoleBankParams, epsilon: f64) -> ConstrainedPoleBank {
    let cfg = PoleBankConfig {
        epsilon,
        ..params.config
    };
    let (g, l, k) = (cfg.groups, cfg.real_poles, cfg.complex_pairs);
    let scale = 1.0 - cfg.epsilon;
    let get = |m: &Mat, i, j| if m.cols() == 0 { 0.0 } else { m.get(i, j) };

    let s_bar = Mat::from_fn(g, l, |i, j| get(&params.s_hat, i, j).tanh());
    let rho_bar_r = Mat::from_fn(g, l, |i, j| scale * sigmoid(get(&params.rho_hat_r, i, j)));
    let a = Mat::from_fn(g, l, |i, j| s_bar.get(i, j) * rho_bar_r.get(i, j));
    let rho_c = Mat::from_fn(g, k, |i, j| scale * sigmoid(get(&params.rho_hat_c, i, j)));
    let theta_c = Mat::from_fn(g, k, |i, j| PI * sigmoid(get(&params.theta_hat, i, j)));

    ConstrainedPoleBank {
        config: cfg,
        a,
        s_bar,
        rho_bar_r,
        rho_c,
        theta_c,
    }
}

/// One elementary factor of a denominator, in powers of `z⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    /// `1 - a z⁻¹`
    Real { a: f64 },
    /// `1 - 2ρ cos θ z⁻¹ + ρ² z⁻²`
    Complex { rho: f64, theta: f64 },
}

impl Factor {
    pub fn coeffs(&self) -> Vec<f64> {
        match *self {
            Factor::Real { a } => vec![1.0, -a],
            Factor::Complex { rho, theta } => vec![1.0, -2.0 * rho * theta.cos(), rho * rho],
        }
    }

    pub fn degree(&self) -> usize {
        match self {
            Factor::Real { .. } => 1,
            Factor::Complex { .. } => 2,
        }
    }

    /// Largest root modulus of the factor.
    pub fn modulus(&self) -> f64 {
        match *self {
            Factor::Real { a } => a.abs(),
            Factor::Complex { rho, .. } => rho.abs(),
        }
    }

    pub fn roots(&self) -> Vec<Complex64> {
        match *self {
            Factor::Real { a } => vec![Complex64::new(a, 0.0)],
            Factor::Complex { rho, theta } => vec![
                Complex64::from_polar(rho, theta),
                Complex64::from_polar(rho, -theta),
            ],
        }
    }
}

/// The `L` real and `K` complex factors of the base denominator `Q_g`.
pub fn base_factors(bank: &ConstrainedPoleBank, g: usize) -> Result<Vec<Factor>> {
    if g >= bank.groups() {
        return Err(Error::IndexOutOfRange {
            index: g,
            limit: bank.groups(),
        });
    }
    let mut out = Vec::with_capacity(bank.config.real_poles + bank.config.complex_pairs);
    for l in 0..bank.config.real_poles {
        out.push(Factor::Real { a: bank.a.get(g, l) });
    }
    for k in 0..bank.config.complex_pairs {
        out.push(Factor::Complex {
            rho: bank.rho_c.get(g, k),
            theta: bank.theta_c.get(g, k),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Largest root modulus of each group's expanded denominator.
    pub max_modulus: Vec<f64>,
    pub bound: f64,
    pub tolerance: f64,
    pub stable: bool,
}

/// Expands each group's base denominator, finds its roots with the companion-matrix
/// oracle and checks `max |root| ≤ 1 - ε + tol`.
pub fn certify_schur(bank: &ConstrainedPoleBank, tol: f64) -> Result<StabilityReport> {
    let bound = 1.0 - bank.epsilon();
    let mut max_modulus = Vec::with_capacity(bank.groups());
    for g in 0..bank.groups() {
        max_modulus.push(denominator::factor_max_modulus(&base_factors(bank, g)?)?);
    }
    let stable = max_modulus.iter().all(|&m| m <= bound + tol);
    Ok(StabilityReport {
        max_modulus,
        bound,
        tolerance: tol,
        stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::Rng;
    use proptest::prelude::*;

    fn single(l: usize, k: usize) -> PoleBankConfig {
        PoleBankConfig::new(1, l, k, 0.01).unwrap()
    }

    #[test]
    fn sigmoid_midpoints() {
        let mut p = PoleBankParams::zeros(single(1, 1));
        let bank = constrain(&p).unwrap();
        assert!((bank.rho_c.get(0, 0) - 0.495).abs() < 1e-15);
        assert!((bank.theta_c.get(0, 0) - PI / 2.0).abs() < 1e-15);
        // s_hat = 0 gives a zero real pole whatever the magnitude
        p.rho_hat_r.set(0, 0, 3.7);
        let bank = constrain(&p).unwrap();
        assert_eq!(bank.a.get(0, 0), 0.0);
        assert!(bank.rho_bar_r.get(0, 0) > 0.9);
    }

    #[test]
    fn real_pole_is_sign_times_magnitude() {
        let mut p = PoleBankParams::zeros(PoleBankConfig::new(2, 2, 0, 0.05).unwrap());
        let mut rng = Rng::new(3);
        for v in p.rho_hat_r.as_mut_slice().iter_mut().chain(p.s_hat.as_mut_slice()) {
            *v = 2.0 * rng.normal();
        }
        let bank = constrain(&p).unwrap();
        for (i, &a) in bank.a.as_slice().iter().enumerate() {
            assert_eq!(a, bank.s_bar.as_slice()[i] * bank.rho_bar_r.as_slice()[i]);
        }
    }

    #[test]
    fn factor_coefficients() {
        assert_eq!(Factor::Real { a: 0.5 }.coeffs(), vec![1.0, -0.5]);
        let c = Factor::Complex { rho: 0.5, theta: PI / 2.0 }.coeffs();
        assert_eq!(c[0], 1.0);
        assert!(c[1].abs() < 1e-16);
        assert_eq!(c[2], 0.25);
        let c = Factor::Complex { rho: 0.9, theta: PI / 3.0 }.coeffs();
        assert!((c[1] + 0.9).abs() < 1e-15);
        assert!((c[2] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn base_factors_order_and_bounds() {
        let p = PoleBankParams::init(PoleBankConfig::new(2, 1, 2, 0.01).unwrap()).unwrap();
        let bank = constrain(&p).unwrap();
        let f = base_factors(&bank, 1).unwrap();
        assert_eq!(f.len(), 3);
        assert!(matches!(f[0], Factor::Real { .. }));
        assert!(matches!(f[2], Factor::Complex { .. }));
        assert!(matches!(
            base_factors(&bank, 2),
            Err(Error::IndexOutOfRange { index: 2, limit: 2 })
        ));
    }

    #[test]
    fn certify_single_real_pole() {
        let mut bank = constrain(&PoleBankParams::zeros(single(1, 0))).unwrap();
        bank.a.set(0, 0, 0.5);
        let rep = certify_schur(&bank, 1e-9).unwrap();
        assert!((rep.max_modulus[0] - 0.5).abs() < 1e-12);
        assert!(rep.stable);
    }

    #[test]
    fn certify_single_complex_pair() {
        let mut bank = constrain(&PoleBankParams::zeros(single(0, 1))).unwrap();
        bank.rho_c.set(0, 0, 0.9);
        bank.theta_c.set(0, 0, PI / 3.0);
        let rep = certify_schur(&bank, 1e-9).unwrap();
        assert!((rep.max_modulus[0] - 0.9).abs() < 1e-12);
        assert!(rep.stable);
    }

    #[test]
    fn certify_flags_out_of_margin_poles() {
        let mut bank = constrain(&PoleBankParams::zeros(single(0, 1))).unwrap();
        bank.rho_c.set(0, 0, 0.995);
        let rep = certify_schur(&bank, 1e-9).unwrap();
        assert!(!rep.stable);
    }

    #[test]
    fn init_spreads_timescales() {
        let cfg = PoleBankConfig::new(3, 1, 2, 0.01).unwrap();
        let bank = constrain(&PoleBankParams::init(cfg).unwrap()).unwrap();
        let mut radii: Vec<f64> = bank
            .rho_bar_r
            .as_slice()
            .iter()
            .chain(bank.rho_c.as_slice())
            .copied()
            .collect();
        radii.sort_by(f64::total_cmp);
        assert!((radii[0] - 0.5).abs() < 1e-12);
        assert!((radii[radii.len() - 1] - 0.99 * 0.99).abs() < 1e-12);
        for k in 0..2 {
            let expected = PI * (k as f64 + 0.5) / 2.0;
            assert!((bank.theta_c.get(0, k) - expected).abs() < 1e-12);
        }
        assert!((bank.s_bar.get(0, 0) - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(PoleBankConfig::new(0, 1, 0, 0.01).is_err());
        assert!(PoleBankConfig::new(1, 0, 0, 0.01).is_err());
        assert!(PoleBankConfig::new(1, 1, 0, 0.0).is_err());
        assert!(PoleBankConfig::new(1, 1, 0, 1.0).is_err());
        assert!(PoleBankConfig::new(1, 17, 0, 0.5).is_err());
        assert!(PoleBankConfig::new(1, 16, 0, 0.5).is_ok());
    }

    #[test]
    fn json_field_names() {
        let p = PoleBankParams::zeros(PoleBankConfig::new(2, 1, 1, 0.01).unwrap());
        let v = serde_json::to_value(&p).unwrap();
        for key in ["rho_hat_c", "theta_hat", "rho_hat_r", "s_hat", "epsilon", "G", "L", "K"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: PoleBankParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn constrained_ranges_hold(vals in prop::collection::vec(-30.0f64..30.0, 8), eps in 0.001f64..0.5) {
            let mut p = PoleBankParams::zeros(PoleBankConfig::new(2, 1, 1, eps).unwrap());
            p.rho_hat_c = Mat::from_vec(2, 1, vals[0..2].to_vec()).unwrap();
            p.theta_hat = Mat::from_vec(2, 1, vals[2..4].to_vec()).unwrap();
            p.rho_hat_r = Mat::from_vec(2, 1, vals[4..6].to_vec()).unwrap();
            p.s_hat = Mat::from_vec(2, 1, vals[6..8].to_vec()).unwrap();
            let b = constrain(&p).unwrap();
            for &a in b.a.as_slice() { prop_assert!(a.abs() <= 1.0 - eps); }
            for &r in b.rho_c.as_slice() { prop_assert!(r > 0.0 && r <= 1.0 - eps); }
            for &t in b.theta_c.as_slice() { prop_assert!((0.0..=PI).contains(&t)); }
        }

        #[test]
        fn radius_is_monotone_in_rho_hat(x in -20.0f64..20.0, dx in 1e-3f64..5.0) {
            let lo = 0.99 * sigmoid(x);
            let hi = 0.99 * sigmoid(x + dx);
            prop_assert!(hi > lo);
        }

        #[test]
        fn pair_roots_are_polar(rho in 0.01f64..0.99, theta in 0.01f64..3.13) {
            let f = Factor::Complex { rho, theta };
            let roots = denominator::roots(&f.coeffs()).unwrap();
            for want in f.roots() {
                let best = roots.iter().map(|z| (z - want).norm()).fold(f64::INFINITY, f64::min);
                prop_assert!(best <= 1e-9, "{want} not found in {roots:?}");
            }
        }
    }
}
