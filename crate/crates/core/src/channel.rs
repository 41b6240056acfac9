//! Random two-pair deployments, Rayleigh fading and the path-loss gain matrix.
//!
//! Gains follow the simplified model
//! `h[i][j] = |g_ij|^2 * 10^(-pl_coeff_log10) * d_ij^(-pl_exponent)`
//! where `g_ij` is a unit-power circularly symmetric complex Gaussian and
//! `d_ij` is the transmitter `i` to receiver `j` distance, clamped from below.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest fading power kept, so that gains stay strictly positive.
pub const MIN_FADING_POWER: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("invalid system parameter `{name}`: {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("channel gain h[{i}][{j}] = {value} is not strictly positive and finite")]
    InvalidGain { i: usize, j: usize, value: f64 },
}

/// Physical constants of the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    /// Side of the square deployment area, meters.
    pub area_side: f64,
    /// Path-loss coefficient as a base-10 exponent (coefficient is `10^x`).
    pub pl_coeff_log10: f64,
    pub pl_exponent: f64,
    /// Hz.
    pub bandwidth: f64,
    /// dBm/Hz.
    pub noise_density_dbm_hz: f64,
    /// Maximum transmit power, watts.
    pub p_max: f64,
    /// Per-transmitter circuit power, watts.
    pub p_circuit: f64,
    /// Distances are clamped below at this value, meters.
    pub min_distance: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            area_side: 30.0,
            pl_coeff_log10: 3.453,
            pl_exponent: 3.8,
            bandwidth: 1e7,
            noise_density_dbm_hz: -173.0,
            p_max: dbm_to_watt(20.0),
            p_circuit: dbm_to_watt(30.0),
            min_distance: 1.0,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let positive = [
            ("area_side", self.area_side),
            ("pl_exponent", self.pl_exponent),
            ("bandwidth", self.bandwidth),
            ("p_max", self.p_max),
            ("p_circuit", self.p_circuit),
            ("min_distance", self.min_distance),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ChannelError::InvalidParam { name, value });
            }
        }
        for (name, value) in [
            ("pl_coeff_log10", self.pl_coeff_log10),
            ("noise_density_dbm_hz", self.noise_density_dbm_hz),
        ] {
            if !value.is_finite() {
                return Err(ChannelError::InvalidParam { name, value });
            }
        }
        Ok(())
    }

    /// Thermal noise power `N0 * W` in watts.
    pub fn noise_power(&self) -> f64 {
        dbm_to_watt(self.noise_density_dbm_hz) * self.bandwidth
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watt_to_dbm(watt: f64) -> f64 {
    10.0 * watt.log10() + 30.0
}

/// Planar position in meters.
pub type Position = (f64, f64);

/// Positions of both transmitters and both receivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub tx_pos: [Position; 2],
    pub rx_pos: [Position; 2],
}

impl Deployment {
    /// Four positions drawn i.i.d. uniformly over `[0, area_side]^2`.
    pub fn sample<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> Self {
        let side = params.area_side;
        let mut point = || (rng.random::<f64>() * side, rng.random::<f64>() * side);
        let tx_pos = [point(), point()];
        let rx_pos = [point(), point()];
        Self { tx_pos, rx_pos }
    }

    /// Distance from transmitter `tx` to receiver `rx` (0-based), at least
    /// `params.min_distance`.
    pub fn effective_distance(&self, tx: usize, rx: usize, params: &SystemParams) -> f64 {
        let (ax, ay) = self.tx_pos[tx];
        let (bx, by) = self.rx_pos[rx];
        (ax - bx).hypot(ay - by).max(params.min_distance)
    }
}

/// A complex fading amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fading {
    pub re: f64,
    pub im: f64,
}

impl Fading {
    /// Unit-power CSCG sample `(x + iy) / sqrt(2)`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        Self {
            re: x * std::f64::consts::FRAC_1_SQRT_2,
            im: y * std::f64::consts::FRAC_1_SQRT_2,
        }
    }

    pub fn power(&self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Independent fading for each of the four links, indexed `[tx][rx]`.
pub fn sample_fading_matrix<R: Rng + ?Sized>(rng: &mut R) -> [[Fading; 2]; 2] {
    let mut next = || Fading::sample(rng);
    let row0 = [next(), next()];
    let row1 = [next(), next()];
    [row0, row1]
}

/// Linear power gains, `h[i][j]` from transmitter `i` to receiver `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelGains {
    pub h: [[f64; 2]; 2],
}

impl ChannelGains {
    pub fn new(h: [[f64; 2]; 2]) -> Result<Self, ChannelError> {
        for (i, row) in h.iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                if !(value.is_finite() && value > 0.0) {
                    return Err(ChannelError::InvalidGain { i, j, value });
                }
            }
        }
        Ok(Self { h })
    }

    /// Gain matrix for a deployment under the given fading realization.
    pub fn from_realization(
        deployment: &Deployment,
        fades: &[[Fading; 2]; 2],
        params: &SystemParams,
    ) -> Self {
        let mut h = [[0.0; 2]; 2];
        for (i, row) in h.iter_mut().enumerate() {
            for (j, gain) in row.iter_mut().enumerate() {
                let d = deployment.effective_distance(i, j, params);
                *gain = path_gain(fades[i][j].power(), d, params);
            }
        }
        Self { h }
    }

    /// Draws a fresh deployment and fading and returns the resulting gains.
    pub fn sample<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> Self {
        let deployment = Deployment::sample(params, rng);
        let fades = sample_fading_matrix(rng);
        Self::from_realization(&deployment, &fades, params)
    }

    /// Gains in the prompt order `h11, h12, h21, h22`.
    pub fn flat(&self) -> [f64; 4] {
        [self.h[0][0], self.h[0][1], self.h[1][0], self.h[1][1]]
    }
}

/// Power gain of a single link at distance `distance` with fading power `fading_power`.
pub fn path_gain(fading_power: f64, distance: f64, params: &SystemParams) -> f64 {
    let fading_power = fading_power.max(MIN_FADING_POWER);
    fading_power * 10f64.powf(-params.pl_coeff_log10) * distance.powf(-params.pl_exponent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn deployment_stays_in_area() {
        let params = SystemParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = Deployment::sample(&params, &mut rng);
            for (x, y) in d.tx_pos.iter().chain(d.rx_pos.iter()) {
                assert!((0.0..=30.0).contains(x) && (0.0..=30.0).contains(y));
            }
        }
    }

    #[test]
    fn degenerate_area_collapses_to_origin() {
        let params = SystemParams { area_side: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Deployment::sample(&params, &mut rng);
        assert_eq!(d.tx_pos, [(0.0, 0.0); 2]);
        assert_eq!(d.rx_pos, [(0.0, 0.0); 2]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let params = SystemParams::default();
        let a = ChannelGains::sample(&params, &mut ChaCha8Rng::seed_from_u64(42));
        let b = ChannelGains::sample(&params, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a.h.map(|r| r.map(f64::to_bits)), b.h.map(|r| r.map(f64::to_bits)));
        let fa = Fading::sample(&mut ChaCha8Rng::seed_from_u64(3));
        let fb = Fading::sample(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(fa, fb);
    }

    #[test]
    fn distances() {
        let params = SystemParams::default();
        let d = Deployment {
            tx_pos: [(0.0, 0.0), (5.0, 5.0)],
            rx_pos: [(3.0, 4.0), (30.0, 30.0)],
        };
        assert_eq!(d.effective_distance(0, 0, &params), 5.0);
        assert!(rel(d.effective_distance(0, 1, &params), 42.42640687119285) < 1e-15);
        // co-located pair
        let d = Deployment { tx_pos: [(2.0, 2.0); 2], rx_pos: [(2.0, 2.0); 2] };
        assert_eq!(d.effective_distance(1, 1, &params), 1.0);
    }

    #[test]
    fn fading_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let powers: Vec<f64> = (0..n).map(|_| Fading::sample(&mut rng).power()).collect();
        let mean = powers.iter().sum::<f64>() / n as f64;
        assert!((0.98..=1.02).contains(&mean), "mean |g|^2 = {mean}");
        let tail = powers.iter().filter(|&&p| p > 1.0).count() as f64 / n as f64;
        assert!((tail - (-1f64).exp()).abs() < 0.01, "P(|g|^2 > 1) = {tail}");
    }

    #[test]
    fn path_gain_reference_values() {
        let params = SystemParams::default();
        assert!(rel(path_gain(1.0, 1.0, &params), 3.523708710424873e-4) < 1e-12);
        assert!(rel(path_gain(1.0, 10.0, &params), 5.5847019473683065e-8) < 1e-12);
        assert!(path_gain(0.0, 10.0, &params) > 0.0);
    }

    #[test]
    fn gains_reject_non_positive() {
        assert!(ChannelGains::new([[1e-9, 0.0], [1e-9, 1e-9]]).is_err());
        assert!(ChannelGains::new([[1e-9, f64::NAN], [1e-9, 1e-9]]).is_err());
        assert!(ChannelGains::new([[1e-9, 1e-10], [1e-11, 1e-9]]).is_ok());
    }

    #[test]
    fn dbm_reference_values() {
        assert!(rel(dbm_to_watt(20.0), 0.1) < 1e-15);
        assert_eq!(dbm_to_watt(30.0), 1.0);
        let noise = SystemParams::default().noise_power();
        assert!(rel(noise, 5.0118723362727144e-14) < 1e-12);
        assert!(rel(noise, dbm_to_watt(-103.0)) < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(SystemParams::default().validate().is_ok());
        let bad = SystemParams { p_circuit: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ChannelError::InvalidParam { name: "p_circuit", .. })));
    }

    proptest! {
        #[test]
        fn dbm_round_trip(x in -200.0f64..60.0) {
            prop_assert!((watt_to_dbm(dbm_to_watt(x)) - x).abs() < 1e-9);
        }

        #[test]
        fn gain_decreases_with_distance(p in 1e-6f64..10.0, d in 1.0f64..100.0, step in 0.01f64..50.0) {
            let params = SystemParams::default();
            prop_assert!(path_gain(p, d + step, &params) < path_gain(p, d, &params));
        }
    }
}
