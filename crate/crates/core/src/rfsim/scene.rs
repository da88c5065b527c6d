use nalgebra::Vector3;
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};

use super::{Result, RfSimError, SPEED_OF_LIGHT};
use crate::geometry::DeviceLayout;
use crate::rng::stream_rng;

/// Minimum distance between a scatterer and any transceiver antenna.
pub(super) const MIN_BOUNCE_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticScatterer {
    pub position: Vector3<f64>,
    pub reflectivity: Complex64,
}

/// Static deployment: devices, furniture-like scatterers, radio and noise parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RfScene {
    pub layout: DeviceLayout,
    pub static_scatterers: Vec<StaticScatterer>,
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub n_subcarriers: usize,
    pub sample_rate: f64,
    /// Offsets of each RX antenna from its receiver position, `[rx][antenna]`.
    pub antenna_offsets: Vec<Vec<Vector3<f64>>>,
    /// Complex gain of each RX antenna, `[rx][antenna]`.
    pub antenna_gains: Vec<Vec<Complex64>>,
    /// Reflectivity shared by every body joint.
    pub joint_reflectivity: Complex64,
    /// Std of the additive complex noise per sample (`E|ε|² = σ²`).
    pub noise_std: f64,
    /// Std (rad) of the per-sample step of the shared RX phase random walk; 0 disables drift.
    pub drift_step_std: f64,
    /// Drop the direct TX→RX path.
    pub los_blocked: bool,
}

impl RfScene {
    pub const DEFAULT_CARRIER: f64 = 5.2e9;
    pub const DEFAULT_BANDWIDTH: f64 = 20e6;
    pub const DEFAULT_SUBCARRIERS: usize = 57;
    pub const DEFAULT_SAMPLE_RATE: f64 = 810.0;
    pub const DEFAULT_ANTENNAS: usize = 3;

    /// Scene with the default radio, three antennas per RX at half-wavelength
    /// spacing along the horizontal direction perpendicular to TX→RX, unit
    /// gains and no noise, drift or static scatterers.
    pub fn new(layout: DeviceLayout) -> Result<Self> {
        layout.validate()?;
        let spacing = SPEED_OF_LIGHT / Self::DEFAULT_CARRIER / 2.0;
        let antenna_offsets = (0..layout.n_receivers())
            .map(|i| {
                let axis = default_antenna_axis(&layout.offset(i));
                linear_array(&axis, spacing, Self::DEFAULT_ANTENNAS)
            })
            .collect();
        let antenna_gains =
            vec![vec![Complex64::new(1.0, 0.0); Self::DEFAULT_ANTENNAS]; layout.n_receivers()];
        let scene = Self {
            layout,
            static_scatterers: Vec::new(),
            carrier_freq: Self::DEFAULT_CARRIER,
            bandwidth: Self::DEFAULT_BANDWIDTH,
            n_subcarriers: Self::DEFAULT_SUBCARRIERS,
            sample_rate: Self::DEFAULT_SAMPLE_RATE,
            antenna_offsets,
            antenna_gains,
            joint_reflectivity: Complex64::new(0.3, 0.0),
            noise_std: 0.0,
            drift_step_std: 0.0,
            los_blocked: false,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn n_receivers(&self) -> usize {
        self.layout.n_receivers()
    }

    pub fn n_antennas(&self, rx: usize) -> usize {
        self.antenna_offsets[rx].len()
    }

    /// Places `count` antennas of receiver `rx` along `axis` with the given spacing.
    pub fn set_antenna_array(&mut self, rx: usize, axis: Vector3<f64>, spacing: f64, count: usize) -> Result<()> {
        if rx >= self.n_receivers() {
            return Err(RfSimError::IndexOutOfRange(format!("receiver {rx}")));
        }
        let n = axis.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(RfSimError::InvalidParameter("antenna axis must be non-zero".into()));
        }
        self.antenna_offsets[rx] = linear_array(&(axis / n), spacing, count);
        self.antenna_gains[rx] = vec![Complex64::new(1.0, 0.0); count];
        self.validate()
    }

    /// Uniformly spaced subcarrier frequencies spanning carrier ± bandwidth/2.
    pub fn subcarrier_freqs(&self) -> Vec<f64> {
        let m = self.n_subcarriers;
        if m == 1 {
            return vec![self.carrier_freq];
        }
        let start = self.carrier_freq - self.bandwidth / 2.0;
        let step = self.bandwidth / (m - 1) as f64;
        (0..m).map(|i| start + i as f64 * step).collect()
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        if self.n_subcarriers > 1 {
            self.bandwidth / (self.n_subcarriers - 1) as f64
        } else {
            0.0
        }
    }

    pub fn antenna_position(&self, rx: usize, antenna: usize) -> Vector3<f64> {
        self.layout.rxs[rx] + self.antenna_offsets[rx][antenna]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RfSimError::InvalidScene(msg));
        self.layout.validate()?;
        if !(self.carrier_freq > 0.0 && self.carrier_freq.is_finite()) {
            return bad(format!("carrier frequency must be positive, got {}", self.carrier_freq));
        }
        if !(self.bandwidth >= 0.0 && self.bandwidth < 2.0 * self.carrier_freq) {
            return bad(format!("bandwidth {} out of range", self.bandwidth));
        }
        if self.n_subcarriers == 0 {
            return bad("need at least one subcarrier".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample rate must be positive, got {}", self.sample_rate));
        }
        if !(self.noise_std >= 0.0) || !(self.drift_step_std >= 0.0) {
            return bad("noise and drift std must be non-negative".into());
        }
        let n_rx = self.n_receivers();
        if self.antenna_offsets.len() != n_rx || self.antenna_gains.len() != n_rx {
            return bad("antenna tables must have one entry per receiver".into());
        }
        for rx in 0..n_rx {
            if self.antenna_offsets[rx].len() < 2 {
                return bad(format!("receiver {rx} needs at least two antennas"));
            }
            if self.antenna_gains[rx].len() != self.antenna_offsets[rx].len() {
                return bad(format!("receiver {rx}: gain count differs from antenna count"));
            }
        }
        for (i, s) in self.static_scatterers.iter().enumerate() {
            if !s.position.iter().all(|v| v.is_finite()) {
                return bad(format!("scatterer {i} has non-finite position"));
            }
            if (s.position - self.layout.tx).norm() < MIN_BOUNCE_DISTANCE {
                return bad(format!("scatterer {i} coincides with the transmitter"));
            }
            for rx in 0..n_rx {
                for a in 0..self.n_antennas(rx) {
                    if (s.position - self.antenna_position(rx, a)).norm() < MIN_BOUNCE_DISTANCE {
                        return bad(format!("scatterer {i} coincides with receiver {rx} antenna {a}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn with_scatterers(mut self, scatterers: Vec<StaticScatterer>) -> Result<Self> {
        self.static_scatterers = scatterers;
        self.validate()?;
        Ok(self)
    }

    /// Same radio configuration with a different device layout; antenna
    /// arrays are re-derived for the new geometry.
    pub fn with_layout(&self, layout: DeviceLayout) -> Result<Self> {
        let mut fresh = Self::new(layout)?;
        fresh.carrier_freq = self.carrier_freq;
        fresh.bandwidth = self.bandwidth;
        fresh.n_subcarriers = self.n_subcarriers;
        fresh.sample_rate = self.sample_rate;
        fresh.joint_reflectivity = self.joint_reflectivity;
        fresh.noise_std = self.noise_std;
        fresh.drift_step_std = self.drift_step_std;
        fresh.los_blocked = self.los_blocked;
        fresh.static_scatterers = self.static_scatterers.clone();
        fresh.validate()?;
        Ok(fresh)
    }
}

fn default_antenna_axis(offset: &Vector3<f64>) -> Vector3<f64> {
    let horizontal = Vector3::new(-offset.y, offset.x, 0.0);
    let n = horizontal.norm();
    if n > 1e-9 {
        horizontal / n
    } else {
        Vector3::x()
    }
}

fn linear_array(axis: &Vector3<f64>, spacing: f64, count: usize) -> Vec<Vector3<f64>> {
    (0..count).map(|a| axis * (spacing * a as f64)).collect()
}

/// Adds isotropic Gaussian noise of std `sigma` to every TX/RX coordinate.
/// Draws that would violate the minimum device separation are repeated.
pub fn perturb_layout(layout: &DeviceLayout, sigma: f64, seed: u64) -> Result<DeviceLayout> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(RfSimError::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(layout.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for attempt in 0..1000u64 {
        let mut rng = stream_rng(seed, &[0x7e57_u64, attempt]);
        let mut jitter = |p: &Vector3<f64>| {
            Vector3::new(
                p.x + normal.sample(&mut rng),
                p.y + normal.sample(&mut rng),
                p.z + normal.sample(&mut rng),
            )
        };
        let mut out = layout.clone();
        out.tx = jitter(&layout.tx);
        for (dst, src) in out.rxs.iter_mut().zip(&layout.rxs) {
            *dst = jitter(src);
        }
        if out.validate().is_ok() {
            return Ok(out);
        }
    }
    Err(RfSimError::InvalidParameter(format!(
        "could not draw a valid layout with sigma {sigma}"
    )))
}
