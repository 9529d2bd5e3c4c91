//! The token-conditioned pole operator.
//!
//! For each token `x_t` visited in route order, every group `g` gets a local denominator
//! `Q_{t,g}(z⁻¹) = 1 + Σ q_{t,g,i} z⁻ⁱ` from the modulated pole bank, the numerator produces
//! the drive `η_t`, and
//!
//! ```text
//! y_t^(g) = η_t^(g) - Σ_{i=1..r} q_{t,g,i} y_{t-i}^(g)
//! o_t     = y_t + D ⊙ x_t
//! ```
//!
//! with zero initial conditions. Multi-route output is the arithmetic mean of the routes.

mod grad;
mod kernel;
mod lti;
mod reference;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::modulation::{ModulationHeads, ModulationMode};
use crate::numerator::NumeratorParams;
use crate::pole_bank::{base_factors, constrain, ConstrainedPoleBank, Factor, PoleBankConfig, PoleBankParams};
use crate::sequence::TokenSequence;
use crate::tensor_io::Rng;

pub use grad::{backward, flat_name, grad_check, loss_and_grad, GradCheckReport, Loss, ParamGrads, FLOOR_REL};
pub use kernel::{forward_multi_route, forward_route};
pub use lti::{companion_simulate, lti_crosscheck, lti_operator, LtiReport};
pub use reference::{grouped_recurrence, reference_forward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Operator dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    #[serde(rename = "E")]
    pub channels: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    #[serde(rename = "L")]
    pub real_poles: usize,
    #[serde(rename = "K")]
    pub complex_pairs: usize,
    pub r_f: usize,
    pub epsilon: f64,
}

impl OperatorConfig {
    pub fn order(&self) -> usize {
        self.real_poles + 2 * self.complex_pairs
    }

    pub fn group_size(&self) -> usize {
        self.channels / self.groups
    }

    pub fn pole_config(&self) -> PoleBankConfig {
        PoleBankConfig {
            groups: self.groups,
            real_poles: self.real_poles,
            complex_pairs: self.complex_pairs,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pole_config().validate()?;
        if self.channels == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "E = {} must be a positive multiple of G = {}",
                self.channels, self.groups
            )));
        }
        if self.r_f == 0 {
            return Err(Error::Config("r_f must be at least 1".into()));
        }
        Ok(())
    }
}

/// Full parameter set, serialized as
/// `{"config": …, "pole": …, "heads": …, "numerator": …, "D": […]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    pub config: OperatorConfig,
    pub pole: PoleBankParams,
    pub heads: ModulationHeads,
    pub numerator: NumeratorParams,
    #[serde(rename = "D")]
    pub d: Vec<f64>,
}

impl OperatorParams {
    /// Documented starting point: spread pole bank, zero heads, silent numerator with
    /// random projections, `D = 1`. The operator is the identity map at this point.
    pub fn init(config: OperatorConfig, mode: ModulationMode, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let p = Self {
            config,
            pole: PoleBankParams::init(config.pole_config())?,
            heads: ModulationHeads::zeros(mode, config.groups, config.channels),
            numerator: NumeratorParams::init(config.channels, config.order(), config.r_f, rng),
            d: vec![1.0; config.channels],
        };
        p.validate()?;
        Ok(p)
    }

    /// Every trainable drawn at random, with scales that keep outputs O(1) for O(1) inputs.
    /// The output projection of each group is damped by its base filter's gain bound.
    pub fn random(config: OperatorConfig, mode: ModulationMode, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let e = config.channels;
        let inv = 1.0 / (e as f64).sqrt();
        let mut pole = PoleBankParams::zeros(config.pole_config());
        for m in [&mut pole.rho_hat_c, &mut pole.theta_hat, &mut pole.rho_hat_r, &mut pole.s_hat] {
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
        }
        let mut heads = ModulationHeads::zeros(mode, config.groups, e);
        let c = heads.rows();
        heads.w_rho = Mat::randn(c, e, 0.5 * inv, rng);
        heads.b_rho = (0..c).map(|_| 0.5 * rng.normal()).collect();
        heads.w_theta = Mat::randn(c, e, 0.5 * inv, rng);
        heads.b_theta = (0..c).map(|_| 0.5 * rng.normal()).collect();
        let mut u = Mat::randn(e, config.r_f, inv, rng);
        // Π(1 - |p|) bounds the inverse ℓ1 gain of each group's base all-pole filter.
        let bank = constrain(&pole)?;
        let eg = e / config.groups;
        for g in 0..config.groups {
            let damp: f64 = base_factors(&bank, g)?
                .iter()
                .map(|f| match *f {
                    Factor::Real { a } => 1.0 - a.abs(),
                    Factor::Complex { rho, .. } => (1.0 - rho).powi(2),
                })
                .product();
            for ch in g * eg..(g + 1) * eg {
                for k in 0..config.r_f {
                    u.set(ch, k, u.get(ch, k) * damp);
                }
            }
        }
        let numerator = NumeratorParams {
            u,
            v: Mat::randn(e, config.r_f, inv, rng),
            w_alpha: Mat::randn(config.order(), e, 0.5 * inv, rng),
            w_gamma: Mat::randn(config.r_f, e, inv, rng),
            r_f: config.r_f,
        };
        let d = (0..e).map(|_| 1.0 + 0.1 * rng.normal()).collect();
        let p = Self {
            config,
            pole,
            heads,
            numerator,
            d,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks shapes and ranges; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let cfg = self.config;
        cfg.validate()?;
        if self.pole.config != cfg.pole_config() {
            return Err(Error::Config(format!(
                "pole bank config {:?} disagrees with operator config",
                self.pole.config
            )));
        }
        self.pole.validate()?;
        self.heads.validate(cfg.groups, cfg.channels)?;
        if self.numerator.r_f != cfg.r_f {
            return Err(Error::Config(format!(
                "numerator r_f = {} disagrees with config r_f = {}",
                self.numerator.r_f, cfg.r_f
            )));
        }
        let mut warnings = Vec::new();
        if let Some(w) = self.numerator.validate(cfg.channels, cfg.order())? {
            warnings.push(w);
        }
        if self.d.len() != cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "D has {} entries, expected {}",
                self.d.len(),
                cfg.channels
            )));
        }
        if self.d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("D contains non-finite values".into()));
        }
        Ok(warnings)
    }

    pub fn bank(&self) -> Result<ConstrainedPoleBank> {
        constrain(&self.pole)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameters always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Trainables flattened in a fixed order (see [`OperatorParams::param_names`]).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.matrices() {
            out.extend_from_slice(m);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        debug_assert_eq!(at, flat.len());
    }

    /// `(name, length)` for every block of [`OperatorParams::flatten`].
    pub fn param_names(&self) -> Vec<(&'static str, usize)> {
        PARAM_BLOCKS.iter().copied().zip(self.matrices().iter().map(|m| m.len())).collect()
    }

    fn matrices(&self) -> [&[f64]; 13] {
        [
            self.pole.rho_hat_c.as_slice(),
            self.pole.theta_hat.as_slice(),
            self.pole.rho_hat_r.as_slice(),
            self.pole.s_hat.as_slice(),
            self.heads.w_rho.as_slice(),
            &self.heads.b_rho,
            self.heads.w_theta.as_slice(),
            &self.heads.b_theta,
            self.numerator.u.as_slice(),
            self.numerator.v.as_slice(),
            self.numerator.w_alpha.as_slice(),
            self.numerator.w_gamma.as_slice(),
            &self.d,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut [f64]; 13] {
        [
            self.pole.rho_hat_c.as_mut_slice(),
            self.pole.theta_hat.as_mut_slice(),
            self.pole.rho_hat_r.as_mut_slice(),
            self.pole.s_hat.as_mut_slice(),
            self.heads.w_rho.as_mut_slice(),
            &mut self.heads.b_rho,
            self.heads.w_theta.as_mut_slice(),
            &mut self.heads.b_theta,
            self.numerator.u.as_mut_slice(),
            self.numerator.v.as_mut_slice(),
            self.numerator.w_alpha.as_mut_slice(),
            self.numerator.w_gamma.as_mut_slice(),
            &mut self.d,
        ]
    }
}

pub const PARAM_BLOCKS: [&str; 13] = [
    "rho_hat_c", "theta_hat", "rho_hat_r", "s_hat", "W_rho", "b_rho", "W_theta", "b_theta", "U",
    "V", "W_alpha", "W_gamma", "D",
];

/// A permutation of token indices giving the order the recurrence visits them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanRoute {
    pub id: String,
    pub order: Vec<usize>,
}

impl ScanRoute {
    pub fn new(id: impl Into<String>, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &t in &order {
            if t >= order.len() || std::mem::replace(&mut seen[t], true) {
                return Err(Error::Config(format!("route order is not a permutation (token {t})")));
            }
        }
        Ok(Self {
            id: id.into(),
            order,
        })
    }

    pub fn forward(len: usize) -> Self {
        Self {
            id: "fwd".into(),
            order: (0..len).collect(),
        }
    }

    pub fn backward(len: usize) -> Self {
        Self {
            id: "bwd".into(),
            order: (0..len).rev().collect(),
        }
    }

    /// Column-major traversal of a row-major `height × width` grid.
    pub fn column_forward(height: usize, width: usize) -> Self {
        let order = (0..width)
            .flat_map(|c| (0..height).map(move |r| r * width + c))
            .collect();
        Self {
            id: "colfwd".into(),
            order,
        }
    }

    pub fn column_backward(height: usize, width: usize) -> Self {
        let mut r = Self::column_forward(height, width);
        r.order.reverse();
        r.id = "colbwd".into();
        r
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Parses a comma-separated list such as `fwd,bwd`. Column routes need a grid.
    pub fn parse_list(spec: &str, len: usize, grid: Option<(usize, usize)>) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let route = match (name, grid) {
                ("fwd", _) => Self::forward(len),
                ("bwd", _) => Self::backward(len),
                ("colfwd", Some((h, w))) => Self::column_forward(h, w),
                ("colbwd", Some((h, w))) => Self::column_backward(h, w),
                ("colfwd" | "colbwd", None) => {
                    return Err(Error::Config(format!("route {name} needs an H x W grid input")))
                }
                _ => return Err(Error::Config(format!("unknown route {name:?}"))),
            };
            out.push(route);
        }
        if out.is_empty() {
            return Err(Error::Config("at least one route is required".into()));
        }
        Ok(out)
    }
}

pub(crate) fn check_inputs(x: &TokenSequence, p: &OperatorParams, route: &ScanRoute) -> Result<()> {
    if x.channels != p.config.channels {
        return Err(Error::ShapeMismatch(format!(
            "tokens have {} channels, operator expects {}",
            x.channels, p.config.channels
        )));
    }
    if route.len() != x.len {
        return Err(Error::ShapeMismatch(format!(
            "route covers {} tokens, sequence has {}",
            route.len(),
            x.len
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OperatorConfig {
        OperatorConfig {
            channels: 8,
            groups: 2,
            real_poles: 1,
            complex_pairs: 1,
            r_f: 2,
            epsilon: 0.01,
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = OperatorParams::random(cfg(), ModulationMode::GroupSpecific, &mut Rng::new(1)).unwrap();
        let back = OperatorParams::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        for key in ["config", "pole", "heads", "numerator", "D"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for key in ["W_rho", "b_rho", "W_theta", "b_theta", "delta_min", "delta_0", "lambda_theta", "mode"] {
            assert!(v["heads"].get(key).is_some(), "{key}");
        }
        for key in ["U", "V", "W_alpha", "W_gamma", "r_f"] {
            assert!(v["numerator"].get(key).is_some(), "{key}");
        }
        assert_eq!(v["heads"]["mode"], "group_specific");
    }

    #[test]
    fn zero_epsilon_rejected_at_load() {
        let p = OperatorParams::init(cfg(), ModulationMode::Shared, &mut Rng::new(0)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        v["config"]["epsilon"] = 0.0.into();
        v["pole"]["epsilon"] = 0.0.into();
        v["pole"]["rho_hat_c"][0][0] = 40.0.into();
        let err = OperatorParams::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn groups_must_divide_channels() {
        let mut c = cfg();
        c.groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let p = OperatorParams::random(cfg(), ModulationMode::Shared, &mut Rng::new(2)).unwrap();
        let flat = p.flatten();
        let total: usize = p.param_names().iter().map(|(_, n)| n).sum();
        assert_eq!(flat.len(), total);
        let mut q = OperatorParams::init(cfg(), ModulationMode::Shared, &mut Rng::new(3)).unwrap();
        q.unflatten(&flat);
        assert_eq!(q.flatten(), flat);
    }

    #[test]
    fn routes() {
        assert_eq!(ScanRoute::backward(3).order, vec![2, 1, 0]);
        assert_eq!(ScanRoute::column_forward(2, 3).order, vec![0, 3, 1, 4, 2, 5]);
        assert!(ScanRoute::new("x", vec![0, 0, 1]).is_err());
        assert!(ScanRoute::new("x", vec![0, 3, 1]).is_err());
        let r = ScanRoute::parse_list("fwd,bwd", 4, None).unwrap();
        assert_eq!(r.len(), 2);
        assert!(ScanRoute::parse_list("colfwd", 4, None).is_err());
        assert!(ScanRoute::parse_list("diag", 4, None).is_err());
        assert_eq!(ScanRoute::parse_list("colbwd", 4, Some((2, 2))).unwrap()[0].order, vec![3, 1, 2, 0]);
    }
}

#[cfg(test)]
mod behaviour;
