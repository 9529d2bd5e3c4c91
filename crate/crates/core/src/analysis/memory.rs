use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::modulation::ModulatedPoles;

pub const TAU_FLOOR: f64 = 1e-6;
pub const RHO_CAP: f64 = 1.0 - 1e-9;

/// Dominant-pole time constant `τ = -1 / ln ρ_max`, with `ρ_max` capped at `1 - 1e-9` and
/// `τ` floored at `1e-6`.
pub fn horizon(rho_max: f64) -> f64 {
    if rho_max <= 0.0 {
        return TAU_FLOOR;
    }
    (-1.0 / rho_max.min(RHO_CAP).ln()).max(TAU_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupSelection {
    All,
    Group(usize),
}

impl std::str::FromStr for GroupSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(GroupSelection::All);
        }
        s.parse()
            .map(GroupSelection::Group)
            .map_err(|_| Error::Config(format!("group must be an index or \"all\", got {s:?}")))
    }
}

/// Per-token memory diagnostics over an `H × W` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryMap {
    pub height: usize,
    pub width: usize,
    pub tau: Vec<f64>,
    pub osc: Vec<f64>,
    pub rho_max: Vec<f64>,
    pub selection: GroupSelection,
    pub layer: usize,
}

/// Token indices of the longest memory (T1), fastest decay (T2) and strongest
/// radius-weighted oscillation (T3). Ties go to the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Markers {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
}

fn arg_best(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}

impl MemoryMap {
    pub fn markers(&self) -> Markers {
        Markers {
            t1: arg_best(&self.tau, |a, b| a > b),
            t2: arg_best(&self.tau, |a, b| a < b),
            t3: arg_best(&self.osc, |a, b| a > b),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("token_index,row,col,tau,osc,rho_max\n");
        for t in 0..self.tau.len() {
            let _ = writeln!(
                s,
                "{t},{},{},{},{},{}",
                t / self.width,
                t % self.width,
                self.tau[t],
                self.osc[t],
                self.rho_max[t]
            );
        }
        s
    }
}

/// 8-bit binary PGM (P5) with linear scaling; returns the image and the `(min, max)` used.
/// A constant field maps to 0.
pub fn to_pgm(field: &[f64], width: usize, height: usize) -> (Vec<u8>, f64, f64) {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(field.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    (out, lo, hi)
}

/// Memory map of batch row `batch` of `poles`, laid out on a `height × width` grid.
pub fn memory_horizon(
    poles: &ModulatedPoles,
    batch: usize,
    grid: (usize, usize),
    selection: GroupSelection,
    layer: usize,
) -> Result<MemoryMap> {
    let (height, width) = grid;
    if height * width != poles.len {
        return Err(Error::ShapeMismatch(format!(
            "grid {height}x{width} does not cover {} tokens",
            poles.len
        )));
    }
    if batch >= poles.batch {
        return Err(Error::IndexOutOfRange {
            index: batch,
            limit: poles.batch,
        });
    }
    let groups: Vec<usize> = match selection {
        GroupSelection::All => (0..poles.groups).collect(),
        GroupSelection::Group(g) if g < poles.groups => vec![g],
        GroupSelection::Group(g) => {
            return Err(Error::IndexOutOfRange {
                index: g,
                limit: poles.groups,
            })
        }
    };
    let n = poles.len;
    let mut map = MemoryMap {
        height,
        width,
        tau: Vec::with_capacity(n),
        osc: Vec::with_capacity(n),
        rho_max: Vec::with_capacity(n),
        selection,
        layer,
    };
    for t in 0..n {
        let mut rho_max = 0.0f64;
        let mut theta_star = 0.0;
        for &g in &groups {
            for &a in poles.real(batch, t, g) {
                if a.abs() > rho_max {
                    rho_max = a.abs();
                    theta_star = 0.0;
                }
            }
        }
        for &g in &groups {
            for (&rho, &theta) in poles.radii(batch, t, g).iter().zip(poles.angles(batch, t, g)) {
                if rho > rho_max {
                    rho_max = rho;
                    theta_star = theta;
                }
            }
        }
        map.tau.push(horizon(rho_max));
        map.osc.push(rho_max * theta_star / PI);
        map.rho_max.push(rho_max);
    }
    Ok(map)
}
