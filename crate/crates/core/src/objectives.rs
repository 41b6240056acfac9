//! Spectral and energy efficiency of a power allocation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelGains, SystemParams};

/// Transmit powers `(P1, P2)` in watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub watts: [f64; 2],
}

impl PowerAllocation {
    pub const ZERO: Self = Self { watts: [0.0, 0.0] };

    pub fn new(p1: f64, p2: f64) -> Self {
        Self { watts: [p1, p2] }
    }

    pub fn total(&self) -> f64 {
        self.watts[0] + self.watts[1]
    }

    /// Both powers finite and in `[0, p_max]`.
    pub fn is_feasible(&self, p_max: f64) -> bool {
        self.watts.iter().all(|p| p.is_finite() && (0.0..=p_max).contains(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Sum of per-pair spectral efficiencies.
    #[serde(rename = "se", alias = "sum_se")]
    SumSe,
    /// Sum of per-pair `SE_i / (P_i + P_C)`.
    #[serde(rename = "ee", alias = "sum_ee")]
    SumEe,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::SumSe => "se",
            ObjectiveKind::SumEe => "ee",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "se" | "sum_se" => Ok(ObjectiveKind::SumSe),
            "ee" | "sum_ee" => Ok(ObjectiveKind::SumEe),
            other => Err(format!("unknown objective `{other}` (expected `se` or `ee`)")),
        }
    }
}

/// Spectral efficiency of pair `i` (0-based) in bits/s/Hz, treating the other
/// pair's transmission as noise.
pub fn se_pair(gains: &ChannelGains, alloc: &PowerAllocation, params: &SystemParams, i: usize) -> f64 {
    se_pair_with_noise(gains, alloc, params.noise_power(), i)
}

#[inline]
fn se_pair_with_noise(gains: &ChannelGains, alloc: &PowerAllocation, noise: f64, i: usize) -> f64 {
    let l = 1 - i;
    let h = &gains.h;
    let p = &alloc.watts;
    let sinr = h[i][i] * p[i] / (noise + h[l][i] * p[l]);
    (1.0 + sinr).log2()
}

pub fn total_se(gains: &ChannelGains, alloc: &PowerAllocation, params: &SystemParams) -> f64 {
    evaluate(ObjectiveKind::SumSe, gains, alloc, params)
}

/// Per-transmitter energy efficiency summed over both pairs, bits/s/Hz/W.
pub fn total_ee(gains: &ChannelGains, alloc: &PowerAllocation, params: &SystemParams) -> f64 {
    evaluate(ObjectiveKind::SumEe, gains, alloc, params)
}

pub fn evaluate(
    kind: ObjectiveKind,
    gains: &ChannelGains,
    alloc: &PowerAllocation,
    params: &SystemParams,
) -> f64 {
    Evaluator::new(kind, gains, params).value(alloc)
}

/// An objective bound to one channel realization, with the noise power
/// computed once. Gives bit-identical results to [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    kind: ObjectiveKind,
    gains: &'a ChannelGains,
    noise: f64,
    p_circuit: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(kind: ObjectiveKind, gains: &'a ChannelGains, params: &SystemParams) -> Self {
        Self { kind, gains, noise: params.noise_power(), p_circuit: params.p_circuit }
    }

    #[inline]
    pub fn value(&self, alloc: &PowerAllocation) -> f64 {
        let se0 = se_pair_with_noise(self.gains, alloc, self.noise, 0);
        let se1 = se_pair_with_noise(self.gains, alloc, self.noise, 1);
        match self.kind {
            ObjectiveKind::SumSe => se0 + se1,
            ObjectiveKind::SumEe => se0 / (alloc.watts[0] + self.p_circuit) + se1 / (alloc.watts[1] + self.p_circuit),
        }
    }
}
