//! Token-conditioned radius and angle scales, and the modulated pole bank.
//!
//! ```text
//! s_ρ = (δ_min + softplus([W_ρ x + b_ρ]_κ(g))) / δ_0
//! s_θ = 1 + λ_θ tanh([W_θ x + b_θ]_κ(g))
//!
//! a_t = s̄ · exp(s_ρ log ρ̄ᴿ)      ρ_t = exp(s_ρ log ρ)      θ_t = clip(s_θ θ, 0, π)
//! ```
//!
//! With `s_ρ < 1` a modulated radius may exceed `1 - ε` (it always stays below 1). When
//! `clamp_radius` is set, magnitudes are capped at `1 - ε` so every local denominator keeps
//! the base stability margin.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::pole_bank::{ConstrainedPoleBank, Factor};
use crate::sequence::TokenSequence;

pub const DEFAULT_DELTA_MIN: f64 = 0.1;
pub const DEFAULT_LAMBDA_THETA: f64 = 0.5;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    /// One head row broadcast to every group.
    Shared,
    /// One head row per group.
    GroupSpecific,
}

fn default_clamp() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationHeads {
    #[serde(rename = "W_rho")]
    pub w_rho: Mat,
    pub b_rho: Vec<f64>,
    #[serde(rename = "W_theta")]
    pub w_theta: Mat,
    pub b_theta: Vec<f64>,
    pub delta_min: f64,
    pub delta_0: f64,
    pub lambda_theta: f64,
    pub mode: ModulationMode,
    #[serde(default = "default_clamp")]
    pub clamp_radius: bool,
}

impl ModulationHeads {
    /// Zero heads with `δ_0 = δ_min + ln 2`, so every token gets `s_ρ = s_θ = 1`.
    pub fn zeros(mode: ModulationMode, groups: usize, channels: usize) -> Self {
        let c = match mode {
            ModulationMode::Shared => 1,
            ModulationMode::GroupSpecific => groups,
        };
        Self {
            w_rho: Mat::zeros(c, channels),
            b_rho: vec![0.0; c],
            w_theta: Mat::zeros(c, channels),
            b_theta: vec![0.0; c],
            delta_min: DEFAULT_DELTA_MIN,
            delta_0: DEFAULT_DELTA_MIN + LN_2,
            lambda_theta: DEFAULT_LAMBDA_THETA,
            mode,
            clamp_radius: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.w_rho.rows()
    }

    #[inline]
    pub fn row_for_group(&self, g: usize) -> usize {
        match self.mode {
            ModulationMode::Shared => 0,
            ModulationMode::GroupSpecific => g,
        }
    }

    pub fn validate(&self, groups: usize, channels: usize) -> Result<()> {
        let c = match self.mode {
            ModulationMode::Shared => 1,
            ModulationMode::GroupSpecific => groups,
        };
        for (name, m) in [("W_rho", &self.w_rho), ("W_theta", &self.w_theta)] {
            if m.shape() != (c, channels) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected ({c}, {channels})",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        for (name, b) in [("b_rho", &self.b_rho), ("b_theta", &self.b_theta)] {
            if b.len() != c {
                return Err(Error::ShapeMismatch(format!("{name} has {} entries, expected {c}", b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        if !(self.delta_min >= 0.0 && self.delta_min.is_finite()) {
            return Err(Error::Config(format!("delta_min must be >= 0, got {}", self.delta_min)));
        }
        if !(self.delta_0 > 0.0 && self.delta_0.is_finite()) {
            return Err(Error::Config(format!("delta_0 must be > 0, got {}", self.delta_0)));
        }
        if !(0.0..1.0).contains(&self.lambda_theta) {
            return Err(Error::Config(format!(
                "lambda_theta must lie in [0, 1), got {}",
                self.lambda_theta
            )));
        }
        Ok(())
    }

    /// Head pre-activations for one token: `(W_ρ x + b_ρ, W_θ x + b_θ)`, one entry per row.
    pub fn preactivations(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre_rho = (0..self.rows())
            .map(|c| dot(self.w_rho.row(c), x) + self.b_rho[c])
            .collect();
        let pre_theta = (0..self.rows())
            .map(|c| dot(self.w_theta.row(c), x) + self.b_theta[c])
            .collect();
        (pre_rho, pre_theta)
    }

    #[inline]
    pub fn radius_scale(&self, pre: f64) -> f64 {
        (self.delta_min + softplus(pre)) / self.delta_0
    }

    #[inline]
    pub fn angle_scale(&self, pre: f64) -> f64 {
        1.0 + self.lambda_theta * pre.tanh()
    }

    /// Per-group `(s_ρ, s_θ)` for one token, written into the two output slices.
    pub fn token_scales(&self, x: &[f64], s_rho: &mut [f64], s_theta: &mut [f64]) {
        let (pre_rho, pre_theta) = self.preactivations(x);
        for g in 0..s_rho.len() {
            let c = self.row_for_group(g);
            s_rho[g] = self.radius_scale(pre_rho[c]);
            s_theta[g] = self.angle_scale(pre_theta[c]);
        }
    }
}

/// `[B, M, G]` radius and angle scales.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScales {
    pub batch: usize,
    pub len: usize,
    pub groups: usize,
    pub s_rho: Vec<f64>,
    pub s_theta: Vec<f64>,
}

impl TokenScales {
    #[inline]
    pub fn index(&self, b: usize, t: usize, g: usize) -> usize {
        (b * self.len + t) * self.groups + g
    }
}

pub fn compute_scales(x: &TokenSequence, heads: &ModulationHeads, groups: usize) -> Result<TokenScales> {
    heads.validate(groups, x.channels)?;
    let n = x.batch * x.len * groups;
    let mut s_rho = vec![0.0; n];
    let mut s_theta = vec![0.0; n];
    for b in 0..x.batch {
        for t in 0..x.len {
            let start = (b * x.len + t) * groups;
            heads.token_scales(
                x.token(b, t),
                &mut s_rho[start..start + groups],
                &mut s_theta[start..start + groups],
            );
        }
    }
    Ok(TokenScales {
        batch: x.batch,
        len: x.len,
        groups,
        s_rho,
        s_theta,
    })
}

/// Per-token poles: `a_t` is `[B, M, G, L]`, `rho_t` and `theta_t` are `[B, M, G, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedPoles {
    pub batch: usize,
    pub len: usize,
    pub groups: usize,
    pub real_poles: usize,
    pub complex_pairs: usize,
    pub a_t: Vec<f64>,
    pub rho_t: Vec<f64>,
    pub theta_t: Vec<f64>,
}

impl ModulatedPoles {
    pub fn order(&self) -> usize {
        self.real_poles + 2 * self.complex_pairs
    }

    #[inline]
    fn cell(&self, b: usize, t: usize, g: usize) -> usize {
        (b * self.len + t) * self.groups + g
    }

    pub fn real(&self, b: usize, t: usize, g: usize) -> &[f64] {
        let s = self.cell(b, t, g) * self.real_poles;
        &self.a_t[s..s + self.real_poles]
    }

    pub fn radii(&self, b: usize, t: usize, g: usize) -> &[f64] {
        let s = self.cell(b, t, g) * self.complex_pairs;
        &self.rho_t[s..s + self.complex_pairs]
    }

    pub fn angles(&self, b: usize, t: usize, g: usize) -> &[f64] {
        let s = self.cell(b, t, g) * self.complex_pairs;
        &self.theta_t[s..s + self.complex_pairs]
    }

    /// Real factors first, then complex pairs.
    pub fn factors(&self, b: usize, t: usize, g: usize) -> Vec<Factor> {
        let mut out: Vec<Factor> = self.real(b, t, g).iter().map(|&a| Factor::Real { a }).collect();
        out.extend(
            self.radii(b, t, g)
                .iter()
                .zip(self.angles(b, t, g))
                .map(|(&rho, &theta)| Factor::Complex { rho, theta }),
        );
        out
    }
}

/// `exp(s · ln m)`, optionally capped at `cap`. A zero magnitude stays zero.
#[inline]
pub(crate) fn scaled_magnitude(m: f64, s: f64, cap: Option<f64>) -> f64 {
    if m <= 0.0 {
        return 0.0;
    }
    let v = (s * m.ln()).exp();
    match cap {
        Some(c) => v.min(c),
        None => v,
    }
}

#[inline]
pub(crate) fn clip_angle(v: f64) -> f64 {
    v.clamp(0.0, PI)
}

/// Writes the `L + K` modulated factors of group `g` for one token into `out`.
pub(crate) fn modulate_group_into(
    bank: &ConstrainedPoleBank,
    g: usize,
    s_rho: f64,
    s_theta: f64,
    clamp: bool,
    out: &mut Vec<Factor>,
) {
    out.clear();
    let cap = clamp.then(|| 1.0 - bank.epsilon());
    for l in 0..bank.config.real_poles {
        let mag = scaled_magnitude(bank.rho_bar_r.get(g, l), s_rho, cap);
        out.push(Factor::Real {
            a: bank.s_bar.get(g, l) * mag,
        });
    }
    for k in 0..bank.config.complex_pairs {
        out.push(Factor::Complex {
            rho: scaled_magnitude(bank.rho_c.get(g, k), s_rho, cap),
            theta: clip_angle(s_theta * bank.theta_c.get(g, k)),
        });
    }
}

pub fn modulate(bank: &ConstrainedPoleBank, scales: &TokenScales, clamp: bool) -> Result<ModulatedPoles> {
    if scales.groups != bank.groups() {
        return Err(Error::ShapeMismatch(format!(
            "scales carry {} groups, pole bank has {}",
            scales.groups,
            bank.groups()
        )));
    }
    let (l, k) = (bank.config.real_poles, bank.config.complex_pairs);
    let cells = scales.batch * scales.len * scales.groups;
    let mut a_t = Vec::with_capacity(cells * l);
    let mut rho_t = Vec::with_capacity(cells * k);
    let mut theta_t = Vec::with_capacity(cells * k);
    let mut factors = Vec::with_capacity(l + k);
    for b in 0..scales.batch {
        for t in 0..scales.len {
            for g in 0..scales.groups {
                let i = scales.index(b, t, g);
                modulate_group_into(bank, g, scales.s_rho[i], scales.s_theta[i], clamp, &mut factors);
                for f in &factors {
                    match *f {
                        Factor::Real { a } => a_t.push(a),
                        Factor::Complex { rho, theta } => {
                            rho_t.push(rho);
                            theta_t.push(theta);
                        }
                    }
                }
            }
        }
    }
    Ok(ModulatedPoles {
        batch: scales.batch,
        len: scales.len,
        groups: scales.groups,
        real_poles: l,
        complex_pairs: k,
        a_t,
        rho_t,
        theta_t,
    })
}
