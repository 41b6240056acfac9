//! Reference allocation strategies: exhaustive grid search, binary power
//! control and uniformly random powers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelGains, SystemParams};
use crate::objectives::{evaluate, Evaluator, ObjectiveKind, PowerAllocation};

/// Equally spaced power levels per transmitter, both endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub levels: usize,
}

impl Default for GridSpec {
    /// 101 levels, so every grid point is an integer percent of `p_max`.
    fn default() -> Self {
        Self { levels: 101 }
    }
}

impl GridSpec {
    pub fn new(levels: usize) -> Option<Self> {
        (levels >= 2).then_some(Self { levels })
    }

    /// Power of level `k`; level `levels - 1` is exactly `p_max`.
    pub fn level(&self, k: usize, p_max: f64) -> f64 {
        level_power(k, self.levels - 1, p_max)
    }

    /// Rounds `watts` to the nearest grid level.
    pub fn snap(&self, watts: f64, p_max: f64) -> f64 {
        let steps = self.levels - 1;
        let k = (watts / p_max * steps as f64).round().clamp(0.0, steps as f64) as usize;
        level_power(k, steps, p_max)
    }
}

/// `k / steps` of `p_max`. Shared by the grid and the prompt codec so that
/// decoded labels land on bit-identical grid powers.
pub(crate) fn level_power(k: usize, steps: usize, p_max: f64) -> f64 {
    (k as f64 / steps as f64) * p_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinaryOptions {
    /// Also consider both transmitters on at full power.
    pub include_both_on: bool,
}

/// Best allocation over the `levels x levels` grid.
///
/// Ties go to the lower total power, then to the lexicographically smaller
/// `(P1, P2)`.
pub fn solve_grid(
    kind: ObjectiveKind,
    gains: &ChannelGains,
    params: &SystemParams,
    grid: GridSpec,
) -> PowerAllocation {
    solve_grid_with_value(kind, gains, params, grid).0
}

/// Like [`solve_grid`], also returning the objective value at the optimum.
pub fn solve_grid_with_value(
    kind: ObjectiveKind,
    gains: &ChannelGains,
    params: &SystemParams,
    grid: GridSpec,
) -> (PowerAllocation, f64) {
    assert!(grid.levels >= 2, "grid needs at least two levels");
    let powers: Vec<f64> = (0..grid.levels).map(|k| grid.level(k, params.p_max)).collect();
    let objective = Evaluator::new(kind, gains, params);
    let mut best = PowerAllocation::ZERO;
    let mut best_value = objective.value(&best);
    // Scan order is lexicographic in (P1, P2), so a later equal value only
    // wins when it has strictly lower total power.
    for &p1 in &powers {
        for &p2 in &powers {
            let alloc = PowerAllocation::new(p1, p2);
            let value = objective.value(&alloc);
            if value > best_value || (value == best_value && alloc.total() < best.total()) {
                best = alloc;
                best_value = value;
            }
        }
    }
    (best, best_value)
}

/// Candidates for binary power control, in tie-break order.
pub fn binary_candidates(params: &SystemParams, opts: BinaryOptions) -> Vec<PowerAllocation> {
    let p = params.p_max;
    let mut out = vec![PowerAllocation::new(p, 0.0), PowerAllocation::new(0.0, p)];
    if opts.include_both_on {
        out.push(PowerAllocation::new(p, p));
    }
    out
}

/// Best binary candidate; equal values resolve to the earlier candidate,
/// so a tie returns `(p_max, 0)`.
pub fn solve_binary(
    kind: ObjectiveKind,
    gains: &ChannelGains,
    params: &SystemParams,
    opts: BinaryOptions,
) -> PowerAllocation {
    let mut best: Option<(PowerAllocation, f64)> = None;
    for alloc in binary_candidates(params, opts) {
        let value = evaluate(kind, gains, &alloc, params);
        match best {
            Some((_, v)) if value <= v => {}
            _ => best = Some((alloc, value)),
        }
    }
    best.expect("at least two candidates").0
}

/// Each power i.i.d. uniform on `[0, p_max]`.
pub fn solve_random<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> PowerAllocation {
    let p1 = rng.random::<f64>() * params.p_max;
    let p2 = rng.random::<f64>() * params.p_max;
    PowerAllocation::new(p1, p2)
}
