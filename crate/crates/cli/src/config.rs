//! Experiment description files and shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fluxsense::model::SensorConfig;
use fluxsense::pea::{DelayCap, PeaConfig};

use crate::CmdError;

/// One simulated sensor of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorEntry {
    /// Used for output file names and plot legends.
    pub label: String,
    pub sensor: SensorConfig,
    /// Overrides the pea block's cap for this sensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_cap: Option<DelayCap>,
}

impl SensorEntry {
    pub fn pea(&self, base: &PeaConfig) -> PeaConfig {
        PeaConfig {
            delay_cap: self.delay_cap.unwrap_or(base.delay_cap),
            ..*base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetKind {
    PaperFig4,
    Qec,
    Desk,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Number of test fluxes `F`.
    pub flux_count: usize,
    /// Repetitions `M` per test flux.
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default = "custom")]
    pub preset: PresetKind,
}

fn custom() -> PresetKind {
    PresetKind::Custom
}

/// Delay axis `start + i (stop - start) / (count - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let h = (self.stop - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.start + i as f64 * h).collect()
    }
}

/// Delays of a pattern: an explicit list or an evenly spaced axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSet {
    List(Vec<f64>),
    Range(Axis),
}

impl TauSet {
    pub fn values(&self) -> Vec<f64> {
        match self {
            TauSet::List(v) => v.clone(),
            TauSet::Range(a) => a.values(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub taus: TauSet,
    /// Flux samples across each sensor window (cell centres).
    pub flux_points: usize,
    /// Evaluate with the density-matrix engine instead of the closed form.
    #[serde(default)]
    pub engine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    /// Side of the (flux x delay) equivalence grid.
    pub grid_points: usize,
    /// Longest equivalence delay in units of `tau_min`.
    pub tau_span: f64,
    /// Detuning of the fit experiment, rad/s. Relaxation moves the fringe
    /// offset slowly, which biases a constant-offset fit by roughly
    /// `1/detuning^2`, so this sits well above the decay rates.
    pub fit_detuning: f64,
    /// Samples of the fitted two-qubit fringe over `[0, T2*]`.
    pub fit_samples: usize,
    /// Error added to the first entangler rotation.
    pub angle_error: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec {
            grid_points: 64,
            tau_span: 16.0,
            fit_detuning: 2.0 * std::f64::consts::PI * 4e6,
            fit_samples: 2000,
            angle_error: 0.0,
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sensors: Vec<SensorEntry>,
    #[serde(default)]
    pub pea: PeaConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PatternSpec>,
    #[serde(default)]
    pub verify: VerifySpec,
    /// Output directory; not part of the configuration hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads; not part of the configuration hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

pub const PRESETS: &[(&str, &str)] = &[
    (
        "paper-fig4",
        include_str!("../../../presets/paper-fig4.json"),
    ),
    ("desk", include_str!("../../../presets/desk.json")),
    ("qec", include_str!("../../../presets/qec.json")),
    ("fig3", include_str!("../../../presets/fig3.json")),
    ("fig2b", include_str!("../../../presets/fig2b.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CmdError> {
        let spec: ExperimentSpec = serde_json::from_str(text)
            .map_err(|e| CmdError::Validation(format!("{origin}: {e}")))?;
        spec.validate()
            .map_err(|e| CmdError::Validation(format!("{origin}: {e}")))?;
        Ok(spec)
    }

    pub fn preset(name: &str) -> Result<Self, CmdError> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            CmdError::Validation(format!(
                "unknown preset {name:?}; available: {}",
                preset_names().join(", ")
            ))
        })?;
        Self::from_json(text, &format!("preset {name}"))
    }

    pub fn load(path: &Path) -> Result<Self, CmdError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Apply flag overrides and re-validate.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self, CmdError> {
        if let Some(seed) = o.seed {
            match self.sweep.as_mut() {
                Some(s) => s.seed = seed,
                None => {
                    return Err(CmdError::Validation(
                        "--seed given but the configuration has no sweep block".into(),
                    ))
                }
            }
        }
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if o.output.is_some() {
            self.output = o.output.clone();
        }
        self.validate().map_err(CmdError::Validation)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sensors.is_empty() {
            return Err("sensors: at least one sensor is required".into());
        }
        for (i, entry) in self.sensors.iter().enumerate() {
            let at = format!("sensors[{i}] ({})", entry.label);
            if entry.label.is_empty()
                || !entry
                    .label
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(format!(
                    "{at}: label must be non-empty and use only [A-Za-z0-9_-]"
                ));
            }
            if self.sensors[..i].iter().any(|e| e.label == entry.label) {
                return Err(format!("{at}: duplicate label"));
            }
            entry
                .sensor
                .validate()
                .map_err(|e| format!("{at}.sensor: {e}"))?;
            entry
                .pea(&self.pea)
                .validate()
                .map_err(|e| format!("{at}.delay_cap: {e}"))?;
        }
        self.pea.validate().map_err(|e| format!("pea: {e}"))?;
        if let Some(s) = &self.sweep {
            if s.flux_count < 1 {
                return Err("sweep.flux_count must be >= 1".into());
            }
            if s.repetitions < 2 {
                return Err("sweep.repetitions must be >= 2 (accuracy needs M - 1 > 0)".into());
            }
        }
        if let Some(p) = &self.pattern {
            let taus = p.taus.values();
            if taus.is_empty() || !taus.iter().all(|t| *t >= 0.0 && t.is_finite()) {
                return Err("pattern.taus: need at least one finite delay >= 0".into());
            }
            if taus.windows(2).any(|w| w[1] < w[0]) {
                return Err("pattern.taus must be non-decreasing".into());
            }
            if p.flux_points < 2 {
                return Err("pattern.flux_points must be >= 2".into());
            }
        }
        let v = &self.verify;
        if v.grid_points < 2 || !(v.tau_span > 0.0) || v.fit_samples < 6 {
            return Err("verify: need grid_points >= 2, tau_span > 0, fit_samples >= 6".into());
        }
        if !(v.fit_detuning > 0.0 && v.angle_error.is_finite()) {
            return Err("verify: fit_detuning must be > 0 and angle_error finite".into());
        }
        if self.workers == Some(0) {
            return Err("workers must be >= 1".into());
        }
        Ok(())
    }

    /// The configuration as echoed into output headers and hashed: every
    /// field except the output directory and the worker count.
    pub fn resolved_json(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.workers = None;
        serde_json::to_string(&c).expect("spec serialises")
    }

    pub fn sweep(&self) -> Result<&SweepSpec, CmdError> {
        self.sweep
            .as_ref()
            .ok_or_else(|| CmdError::Validation("configuration has no sweep block".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn worker_count(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in preset_names() {
            let spec = ExperimentSpec::preset(name).unwrap();
            assert!(!spec.sensors.is_empty(), "{name}");
        }
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let text = "{\n  \"sensors\": [],\n  \"bogus\": 1\n}";
        let err = ExperimentSpec::from_json(text, "x.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn nested_unknown_keys_rejected() {
        let base = ExperimentSpec::preset("desk").unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&base.resolved_json()).unwrap();
        v["pea"]["readout"]["sigma2"] = 1.0.into();
        let err = ExperimentSpec::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("sigma2"));
    }

    #[test]
    fn invalid_sensor_names_its_location() {
        let base = ExperimentSpec::preset("desk").unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&base.resolved_json()).unwrap();
        v["sensors"][1]["sensor"]["alpha"] = 3.0.into();
        let err = ExperimentSpec::from_json(&v.to_string(), "x")
            .unwrap_err()
            .to_string();
        assert!(err.contains("sensors[1]"), "{err}");
        assert!(err.contains("alpha"), "{err}");
    }

    #[test]
    fn overrides_apply_and_stay_out_of_the_hash_input() {
        let base = ExperimentSpec::preset("desk").unwrap();
        let o = Overrides {
            seed: Some(99),
            workers: Some(3),
            output: Some(PathBuf::from("/tmp/x")),
        };
        let spec = base.clone().with_overrides(&o).unwrap();
        assert_eq!(spec.sweep().unwrap().seed, 99);
        assert_eq!(spec.worker_count(), 3);
        let only_seed = base
            .with_overrides(&Overrides {
                seed: Some(99),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(spec.resolved_json(), only_seed.resolved_json());
    }

    #[test]
    fn resolved_json_round_trips() {
        for name in preset_names() {
            let spec = ExperimentSpec::preset(name).unwrap();
            let again = ExperimentSpec::from_json(&spec.resolved_json(), name).unwrap();
            assert_eq!(spec, again);
        }
    }

    #[test]
    fn axis_endpoints() {
        let a = Axis {
            start: 0.0,
            stop: 1.0,
            count: 5,
        };
        assert_eq!(a.values(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let single = Axis {
            start: 2.0,
            stop: 2.0,
            count: 1,
        };
        assert_eq!(single.values(), vec![2.0]);
    }
}
