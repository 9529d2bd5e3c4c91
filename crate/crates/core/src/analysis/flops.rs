use serde::Serialize;

use crate::error::{Error, Result};

/// Dominant inference cost per token and channel: `2r + 3r_f` for the operator against
/// `7N` for a diagonal selective scan with state size `N` (its step-size projection is
/// not counted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopModel {
    pub r: u64,
    pub r_f: u64,
    pub n_state: u64,
    pub channels: u64,
    pub len: u64,
    pub routes: u64,
}

impl FlopModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.r, self.r_f, self.n_state, self.channels, self.len, self.routes];
        if all.contains(&0) {
            return Err(Error::Config("all FLOP model sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn tcp_cost(&self) -> u64 {
        2 * self.r + 3 * self.r_f
    }

    pub fn baseline_cost(&self) -> u64 {
        7 * self.n_state
    }

    fn scale(&self) -> u64 {
        self.len * self.channels * self.routes
    }

    pub fn tcp_total(&self) -> u64 {
        self.tcp_cost() * self.scale()
    }

    pub fn baseline_total(&self) -> u64 {
        self.baseline_cost() * self.scale()
    }
}

/// `1 - new / base`.
pub fn reduction(new: f64, base: f64) -> f64 {
    1.0 - new / base
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub model: FlopModel,
    pub tcp_per_token_channel: u64,
    pub baseline_per_token_channel: u64,
    /// Totals with one multiply-add counted as one FLOP.
    pub tcp_total_mac1: u64,
    pub baseline_total_mac1: u64,
    /// Totals with one multiply-add counted as two FLOPs.
    pub tcp_total_mac2: u64,
    pub baseline_total_mac2: u64,
    pub reduction: f64,
    pub baseline_excludes: &'static str,
}

pub fn flop_report(m: FlopModel) -> Result<FlopReport> {
    m.validate()?;
    Ok(FlopReport {
        model: m,
        tcp_per_token_channel: m.tcp_cost(),
        baseline_per_token_channel: m.baseline_cost(),
        tcp_total_mac1: m.tcp_total(),
        baseline_total_mac1: m.baseline_total(),
        tcp_total_mac2: 2 * m.tcp_total(),
        baseline_total_mac2: 2 * m.baseline_total(),
        reduction: reduction(m.tcp_total() as f64, m.baseline_total() as f64),
        baseline_excludes: "step-size projection",
    })
}
