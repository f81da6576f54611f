//! Closed-form sensor physics.
//!
//! Rates (`gamma1`, `gamma_phi`) are plain rates in 1/s; detunings and
//! frequencies are angular (rad/s); fluxes are in units of the flux quantum.
//! A rate quoted as "0.2 MHz" is therefore `0.2e6`.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when checking that a flux lies inside a window.
const WINDOW_SLACK: f64 = 1e-9;

/// Flux-to-detuning mapping of the sensor qubits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetuningModel {
    /// `offset + slope * (flux - operating_flux)`.
    Linear {
        slope: f64,
        operating_flux: f64,
        offset: f64,
    },
    /// Split-junction transmon, `w_q(f) = (w_max + |eta|) sqrt|cos(pi f)| - |eta|`,
    /// detuned from a fixed drive.
    Transmon {
        max_frequency: f64,
        anharmonicity: f64,
        drive_frequency: f64,
    },
}

impl DetuningModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DetuningModel::Linear {
                slope,
                operating_flux,
                offset,
            } => {
                if !(slope.is_finite() && operating_flux.is_finite() && offset.is_finite()) {
                    return Err(Error::InvalidConfig(
                        "linear detuning parameters must be finite".into(),
                    ));
                }
                if slope == 0.0 {
                    return Err(Error::DegenerateModel(
                        "linear slope is zero at the operating point".into(),
                    ));
                }
                Ok(())
            }
            DetuningModel::Transmon {
                max_frequency,
                anharmonicity,
                drive_frequency,
            } => {
                if !(max_frequency > 0.0 && anharmonicity.is_finite() && drive_frequency > 0.0) {
                    return Err(Error::InvalidConfig(
                        "transmon frequencies must be positive and finite".into(),
                    ));
                }
                self.zero_detuning_flux().map(|_| ())
            }
        }
    }

    /// Qubit transition frequency for the transmon variant (rad/s).
    pub fn qubit_frequency(&self, flux: f64) -> Result<f64> {
        match *self {
            DetuningModel::Linear { .. } => Err(Error::InvalidConfig(
                "linear model has no absolute qubit frequency".into(),
            )),
            DetuningModel::Transmon {
                max_frequency,
                anharmonicity,
                ..
            } => {
                if !(flux.abs() < 0.5) {
                    return Err(Error::Range {
                        flux,
                        lo: -0.5,
                        hi: 0.5,
                    });
                }
                let eta = anharmonicity.abs();
                Ok((max_frequency + eta) * (PI * flux).cos().abs().sqrt() - eta)
            }
        }
    }

    /// Angular detuning `w_q(flux) - w_d` (rad/s).
    pub fn detuning(&self, flux: f64) -> Result<f64> {
        match *self {
            DetuningModel::Linear {
                slope,
                operating_flux,
                offset,
            } => Ok(offset + slope * (flux - operating_flux)),
            DetuningModel::Transmon {
                drive_frequency, ..
            } => Ok(self.qubit_frequency(flux)? - drive_frequency),
        }
    }

    /// d(detuning)/d(flux) in rad/s per flux quantum.
    pub fn slope_at(&self, flux: f64) -> Result<f64> {
        match *self {
            DetuningModel::Linear { slope, .. } => Ok(slope),
            DetuningModel::Transmon {
                max_frequency,
                anharmonicity,
                ..
            } => {
                if !(flux.abs() < 0.5) {
                    return Err(Error::Range {
                        flux,
                        lo: -0.5,
                        hi: 0.5,
                    });
                }
                let c = (PI * flux).cos();
                let eta = anharmonicity.abs();
                Ok(-(max_frequency + eta) * PI * (PI * flux).sin() / (2.0 * c.sqrt()))
            }
        }
    }

    /// Flux at which the detuning vanishes; the sensing window starts here.
    pub fn zero_detuning_flux(&self) -> Result<f64> {
        match *self {
            DetuningModel::Linear {
                slope,
                operating_flux,
                offset,
            } => {
                if slope == 0.0 {
                    return Err(Error::DegenerateModel("zero linear slope".into()));
                }
                Ok(operating_flux - offset / slope)
            }
            DetuningModel::Transmon {
                max_frequency,
                anharmonicity,
                drive_frequency,
            } => {
                let eta = anharmonicity.abs();
                let s = (drive_frequency + eta) / (max_frequency + eta);
                if !(s > 0.0 && s < 1.0) {
                    return Err(Error::DegenerateModel(format!(
                        "drive frequency {drive_frequency} is not strictly below the sweet spot \
                         {max_frequency}; no operating point with nonzero slope"
                    )));
                }
                Ok((s * s).acos() / PI)
            }
        }
    }

    /// Slope at the operating point (the zero-detuning flux).
    pub fn operating_slope(&self) -> Result<f64> {
        let k = self.slope_at(self.zero_detuning_flux()?)?;
        if k == 0.0 || !k.is_finite() {
            return Err(Error::DegenerateModel(format!(
                "slope {k} at operating point"
            )));
        }
        Ok(k)
    }
}

/// A simulated sensor: `n_qubits` in a GHZ probe state (or a single qubit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub n_qubits: usize,
    /// Relaxation rate per qubit, 1/s.
    pub gamma1: f64,
    /// Pure dephasing rate per qubit, 1/s.
    pub gamma_phi: f64,
    /// Dephasing correlation exponent: 1 uncorrelated, 2 fully correlated.
    pub alpha: f64,
    pub detuning: DetuningModel,
    /// Minimal delay time, s.
    pub tau_min: f64,
    /// The window starts this many single-qubit spans `pi / (|k| tau_min)`
    /// away from zero detuning, so it covers the fringe of order
    /// `N * window_offset` at `tau_min`.
    #[serde(default)]
    pub window_offset: u32,
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_qubits < 1 {
            return Err(Error::InvalidConfig("n_qubits must be >= 1".into()));
        }
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) {
            return Err(Error::InvalidConfig(
                "gamma1 must be finite and >= 0".into(),
            ));
        }
        if !(self.gamma_phi >= 0.0 && self.gamma_phi.is_finite()) {
            return Err(Error::InvalidConfig(
                "gamma_phi must be finite and >= 0".into(),
            ));
        }
        if !(1.0..=2.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha = {} outside [1, 2]",
                self.alpha
            )));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return Err(Error::InvalidConfig("tau_min must be positive".into()));
        }
        self.detuning.validate()?;
        let (lo, hi) = self.flux_window()?;
        if let DetuningModel::Transmon { .. } = self.detuning {
            if !(lo > -0.5 && hi < 0.5) {
                return Err(Error::InvalidConfig(format!(
                    "sensing window [{lo}, {hi}] leaves the monotone branch of the transmon spectrum"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> f64 {
        self.n_qubits as f64
    }

    /// Total relaxation rate `N * gamma1`.
    pub fn total_relaxation_rate(&self) -> f64 {
        self.n() * self.gamma1
    }

    /// Total pure dephasing rate `N^alpha * gamma_phi`.
    pub fn total_dephasing_rate(&self) -> f64 {
        self.n().powf(self.alpha) * self.gamma_phi
    }

    /// Decay rate of the fringe envelope, `N gamma1 / 2 + N^alpha gamma_phi`.
    pub fn envelope_rate(&self) -> f64 {
        0.5 * self.total_relaxation_rate() + self.total_dephasing_rate()
    }

    /// Effective coherence time; infinite when every rate is zero.
    pub fn coherence_time(&self) -> f64 {
        let rate = self.envelope_rate();
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }

    /// Probability of the `|10...0>` outcome after phase accumulation for `tau`.
    pub fn ramsey_probability(&self, detuning: f64, tau: f64) -> f64 {
        let envelope = (-self.envelope_rate() * tau).exp();
        if envelope == 0.0 {
            return 0.5;
        }
        0.5 + 0.5 * envelope * (self.n() * detuning * tau).cos()
    }

    pub fn slope(&self) -> Result<f64> {
        self.detuning.operating_slope()
    }

    /// Unambiguous flux span at the minimal delay, `pi / (N |k| tau_min)`.
    pub fn dynamic_range(&self) -> Result<f64> {
        let k = self.slope()?;
        Ok(PI / (self.n() * k.abs() * self.tau_min))
    }

    /// `[lo, hi]` flux window of one dynamic range, on the side of growing
    /// detuning magnitude and `window_offset` single-qubit spans past zero
    /// detuning. Both edges sit on fringe extrema at `tau_min`.
    pub fn flux_window(&self) -> Result<(f64, f64)> {
        let zero = self.detuning.zero_detuning_flux()?;
        let span = self.dynamic_range()?;
        let k = self.slope()?;
        let shift = self.window_offset as f64 * span * self.n();
        Ok(if k > 0.0 {
            (zero + shift, zero + shift + span)
        } else {
            (zero - shift - span, zero - shift)
        })
    }

    /// Detuning at `flux`, rejecting fluxes outside the sensing window.
    pub fn detuning(&self, flux: f64) -> Result<f64> {
        let (lo, hi) = self.flux_window()?;
        let slack = WINDOW_SLACK * (hi - lo);
        if !(flux >= lo - slack && flux <= hi + slack) {
            return Err(Error::Range { flux, lo, hi });
        }
        self.detuning.detuning(flux)
    }
}

/// Equidistant flux values `start + i * step`, `i < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl FluxGrid {
    pub fn new(start: f64, step: f64, count: usize) -> Result<Self> {
        if !(step > 0.0 && step.is_finite() && start.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "grid step {step} must be > 0"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid count {count} must be >= 2"
            )));
        }
        Ok(FluxGrid { start, step, count })
    }

    /// Cell-centred grid of `count` points covering `[lo, hi]`.
    pub fn cell_centred(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::DegenerateModel(format!(
                "empty flux range [{lo}, {hi}]"
            )));
        }
        let step = (hi - lo) / count as f64;
        FluxGrid::new(lo + 0.5 * step, step, count)
    }

    pub fn value(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }

    /// Lower edge of cell `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.start + (i as f64 - 0.5) * self.step
    }

    /// Index of the grid point equal to `flux` within `rel_tol * step`.
    pub fn index_of(&self, flux: f64, rel_tol: f64) -> Option<usize> {
        let x = (flux - self.start) / self.step;
        let i = x.round();
        if i < 0.0 || i >= self.count as f64 || (x - i).abs() > rel_tol {
            return None;
        }
        Some(i as usize)
    }
}

/// Probability pattern over (flux x delay).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPattern {
    pub fluxes: Vec<f64>,
    pub taus: Vec<f64>,
    /// Row-major, `probs[i * taus.len() + j]`.
    pub probs: Vec<f64>,
}

impl CalibrationPattern {
    pub fn get(&self, flux_index: usize, tau_index: usize) -> f64 {
        self.probs[flux_index * self.taus.len() + tau_index]
    }

    /// CSV body: header row of delays, then one row per flux.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "flux_phi0")?;
        for tau in &self.taus {
            write!(out, ",{tau:.9e}")?;
        }
        writeln!(out)?;
        for (i, flux) in self.fluxes.iter().enumerate() {
            write!(out, "{flux:.15e}")?;
            for j in 0..self.taus.len() {
                write!(out, ",{:.15e}", self.get(i, j))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub fn build_calibration_pattern(
    config: &SensorConfig,
    grid: &FluxGrid,
    taus: &[f64],
) -> Result<CalibrationPattern> {
    let fluxes = grid.values();
    let mut probs = Vec::with_capacity(fluxes.len() * taus.len());
    for &flux in &fluxes {
        let dw = config.detuning(flux)?;
        probs.extend(taus.iter().map(|&tau| config.ramsey_probability(dw, tau)));
    }
    Ok(CalibrationPattern {
        fluxes,
        taus: taus.to_vec(),
        probs,
    })
}
