//! Stepped Kitaev phase estimation of an unknown flux.
//!
//! Each step fixes one delay, takes single shots and updates a grid
//! posterior until half of the surviving candidates can be discarded with
//! error probability at most `epsilon`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::ExperimentResult;
use crate::error::{Error, Result};
use crate::model::{FluxGrid, SensorConfig};
use crate::readout::{sample_shot, ReadoutModel, RngStream};

/// Grid sizes of the single-, two- and three-qubit sensors.
pub const BASE_GRID_COUNT: usize = 2048;

/// Upper bound on the delay chosen for the next step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayCap {
    /// The sensor's effective coherence time (unbounded when all rates vanish).
    CoherenceTime,
    /// Maximiser of the per-shot-time information `tau exp(-2 tau / T2*)`, i.e. `T2* / 2`.
    PerTimeSensitivity,
    Fixed {
        seconds: f64,
    },
    Unbounded,
}

impl DelayCap {
    pub fn resolve(&self, sensor: &SensorConfig) -> f64 {
        match *self {
            DelayCap::CoherenceTime => sensor.coherence_time(),
            DelayCap::PerTimeSensitivity => 0.5 * sensor.coherence_time(),
            DelayCap::Fixed { seconds } => seconds,
            DelayCap::Unbounded => f64::INFINITY,
        }
    }
}

/// Which candidates survive a decided step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Lower or upper half, split at the median candidate index.
    Median,
    /// Any contiguous block of `ceil(count / 2)` candidates.
    Window,
    /// Median halves, widened to any block once `window_patience` shots
    /// of the step have passed without a decision.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeaConfig {
    /// Tolerated probability of discarding the half holding the true flux.
    pub epsilon: f64,
    pub max_steps: usize,
    pub shot_cap: usize,
    pub delay_cap: DelayCap,
    pub split: SplitRule,
    /// Shots per step before the hybrid rule also accepts inner blocks.
    pub window_patience: usize,
    pub readout: ReadoutModel,
}

impl Default for PeaConfig {
    fn default() -> Self {
        PeaConfig {
            epsilon: 1e-4,
            max_steps: 10,
            shot_cap: 100_000,
            delay_cap: DelayCap::CoherenceTime,
            split: SplitRule::Window,
            window_patience: 1000,
            readout: ReadoutModel::default(),
        }
    }
}

impl PeaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "epsilon = {} outside (0, 0.5)",
                self.epsilon
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
        }
        if self.shot_cap < 1 {
            return Err(Error::InvalidConfig("shot_cap must be >= 1".into()));
        }
        if let DelayCap::Fixed { seconds } = self.delay_cap {
            if !(seconds > 0.0) {
                return Err(Error::InvalidConfig("fixed delay cap must be > 0".into()));
            }
        }
        self.readout.validate()
    }
}

/// Normalised weights over a contiguous block of grid candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    grid: FluxGrid,
    first: usize,
    weights: Vec<f64>,
}

impl Posterior {
    pub fn uniform(grid: FluxGrid) -> Self {
        let w = 1.0 / grid.count as f64;
        Posterior {
            grid,
            first: 0,
            weights: vec![w; grid.count],
        }
    }

    /// Posterior over `grid[first..first + weights.len()]`; weights are renormalised.
    pub fn from_weights(grid: FluxGrid, first: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || first + weights.len() > grid.count {
            return Err(Error::InvalidConfig("posterior block outside grid".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig(
                "posterior weights must be >= 0".into(),
            ));
        }
        let mut p = Posterior {
            grid,
            first,
            weights,
        };
        if !p.normalise() {
            return Err(Error::InvalidConfig("posterior weights sum to zero".into()));
        }
        Ok(p)
    }

    pub fn grid(&self) -> &FluxGrid {
        &self.grid
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn flux(&self, i: usize) -> f64 {
        self.grid.value(self.first + i)
    }

    /// Cell edges `[lo, hi]` spanned by the candidates.
    pub fn edges(&self) -> (f64, f64) {
        (
            self.grid.edge(self.first),
            self.grid.edge(self.first + self.len()),
        )
    }

    pub fn width(&self) -> f64 {
        self.len() as f64 * self.grid.step
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.flux(i))
            .sum()
    }

    pub fn contains(&self, flux: f64) -> bool {
        let (lo, hi) = self.edges();
        flux >= lo && flux < hi
    }

    fn normalise(&mut self) -> bool {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return false;
        }
        let inv = 1.0 / total;
        self.weights.iter_mut().for_each(|w| *w *= inv);
        true
    }

    fn restrict(self, start: usize, len: usize) -> Posterior {
        let mut p = Posterior {
            grid: self.grid,
            first: self.first + start,
            weights: self.weights[start..start + len].to_vec(),
        };
        if !p.normalise() {
            let w = 1.0 / len as f64;
            p.weights.iter_mut().for_each(|x| *x = w);
        }
        p
    }
}

/// Which part of the interval survived a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kept {
    Lower,
    Upper,
    /// A block strictly inside the interval (window split only).
    Inner,
    /// No decision: both halves kept.
    Both,
}

impl fmt::Display for Kept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kept::Lower => "lower",
            Kept::Upper => "upper",
            Kept::Inner => "inner",
            Kept::Both => "both",
        })
    }
}

impl FromStr for Kept {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lower" => Ok(Kept::Lower),
            "upper" => Ok(Kept::Upper),
            "inner" => Ok(Kept::Inner),
            "both" => Ok(Kept::Both),
            other => Err(format!("unknown half label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub tau: f64,
    pub shots: usize,
    pub kept: Kept,
    /// Posterior mean over the surviving candidates.
    pub phi_hat: f64,
    pub decided: bool,
    /// Surviving candidate block `[first, first + count)` in grid indices.
    pub first: usize,
    pub count: usize,
}

/// Candidate count of the calibration grid for an `n`-qubit sensor.
///
/// The grid pitch of an `n`-qubit sensor is `h1 / q` with `h1` the
/// single-qubit pitch and `q = lcm(odd part of n, 3^(n-1))` odd, so that
/// every single-qubit cell centre inside the `n`-qubit window is also an
/// `n`-qubit cell centre. This gives 2048, 3072 and 6144 for n = 1, 2, 3.
pub fn grid_count(n_qubits: usize) -> Result<usize> {
    if n_qubits == 0 {
        return Err(Error::InvalidConfig("n_qubits must be >= 1".into()));
    }
    let mut odd = n_qubits;
    while odd.is_multiple_of(2) {
        odd /= 2;
    }
    let pow3 = 3usize
        .checked_pow(n_qubits as u32 - 1)
        .ok_or_else(|| Error::InvalidConfig(format!("grid for {n_qubits} qubits too large")))?;
    let q = lcm(odd, pow3);
    let total = BASE_GRID_COUNT
        .checked_mul(q)
        .ok_or_else(|| Error::InvalidConfig(format!("grid for {n_qubits} qubits too large")))?;
    if total % n_qubits != 0 {
        return Err(Error::InvalidConfig(format!(
            "no common-lattice grid for {n_qubits} qubits"
        )));
    }
    Ok(total / n_qubits)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Cell-centred grid over the sensor window with [`grid_count`] points.
pub fn build_calibration_grid(sensor: &SensorConfig) -> Result<FluxGrid> {
    build_grid_with_count(sensor, grid_count(sensor.n_qubits)?)
}

pub fn build_grid_with_count(sensor: &SensorConfig, count: usize) -> Result<FluxGrid> {
    let (lo, hi) = sensor.flux_window()?;
    FluxGrid::cell_centred(lo, hi, count)
}

/// Points of the coarsest grid that are also points of every other grid.
pub fn common_sublattice(grids: &[FluxGrid]) -> Vec<f64> {
    let Some(coarse) = grids
        .iter()
        .max_by(|a, b| a.step.total_cmp(&b.step))
        .copied()
    else {
        return Vec::new();
    };
    coarse
        .values()
        .into_iter()
        .filter(|&f| grids.iter().all(|g| g.index_of(f, 1e-6).is_some()))
        .collect()
}

/// `count` evenly spread members of `lattice`.
pub fn select_test_fluxes(lattice: &[f64], count: usize) -> Result<Vec<f64>> {
    if count == 0 || count > lattice.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot pick {count} test fluxes from a common lattice of {}",
            lattice.len()
        )));
    }
    Ok((0..count)
        .map(|j| lattice[(2 * j + 1) * lattice.len() / (2 * count)])
        .collect())
}

/// Largest delay, at most the cap and at least `tau_min`, for which the
/// fringe `cos(N dw tau)` is monotone over the surviving interval.
///
/// With the interval's phase rates `wa <= wb` at its edges, delays free of
/// a fold are the unions of `[m pi / wa, (m + 1) pi / wb]`. When the interval
/// is a fringe-aligned block this is `pi / (N |k| W)`.
pub fn choose_delay(
    posterior: &Posterior,
    sensor: &SensorConfig,
    config: &PeaConfig,
) -> Result<f64> {
    let cap = config.delay_cap.resolve(sensor);
    let (lo, hi) = posterior.edges();
    let n = sensor.n();
    let da = n * sensor.detuning.detuning(lo)?;
    let db = n * sensor.detuning.detuning(hi)?;
    let (wa, wb) = if da.abs() <= db.abs() {
        (da.abs(), db.abs())
    } else {
        (db.abs(), da.abs())
    };
    let tau = if da * db < 0.0 {
        // interval straddles zero detuning: fold at phase zero for any delay
        sensor.tau_min
    } else {
        let spread = wb - wa;
        let ratio = wa / spread;
        let mut m = (ratio + 1e-9).floor();
        if cap.is_finite() {
            m = m.min((cap * wa / PI + 1e-9).floor());
        }
        let unambiguous = (m + 1.0) * PI / wb;
        unambiguous.min(cap)
    };
    Ok(tau.max(sensor.tau_min))
}

fn decide_halves(weights: &[f64], half: usize, threshold: f64) -> Option<(usize, usize)> {
    let lower: f64 = weights[..half].iter().sum();
    let upper: f64 = weights[half..].iter().sum();
    if lower >= threshold {
        Some((0, half))
    } else if upper >= threshold {
        Some((half, weights.len() - half))
    } else {
        None
    }
}

/// Heaviest block of `window` candidates, if it holds `threshold`.
fn decide_window(
    weights: &[f64],
    window: usize,
    threshold: f64,
    prefix: &mut [f64],
) -> Option<(usize, usize)> {
    for (i, w) in weights.iter().enumerate() {
        prefix[i + 1] = prefix[i] + w;
    }
    let (start, mass) = (0..=weights.len() - window)
        .map(|s| (s, prefix[s + window] - prefix[s]))
        .fold((0, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    (mass >= threshold).then_some((start, window))
}

/// Run one step at delay `tau`.
pub fn run_step(
    mut posterior: Posterior,
    true_flux: f64,
    tau: f64,
    sensor: &SensorConfig,
    config: &PeaConfig,
    rng: &mut RngStream,
) -> Result<(Posterior, StepRecord)> {
    let p_true = sensor.ramsey_probability(sensor.detuning(true_flux)?, tau);
    let candidate_p = (0..posterior.len())
        .map(|i| {
            sensor
                .detuning(posterior.flux(i))
                .map(|dw| sensor.ramsey_probability(dw, tau))
        })
        .collect::<Result<Vec<_>>>()?;

    let count = posterior.len();
    let threshold = 1.0 - config.epsilon;
    let half = count / 2;
    let window = count.div_ceil(2);
    let mut prefix = vec![0.0; count + 1];
    let mut shots = 0;
    let mut decision = None;

    if count >= 2 {
        while shots < config.shot_cap {
            let x = sample_shot(p_true, &config.readout, rng);
            shots += 1;
            let (d0, d1) = config.readout.relative_densities(x);
            let before = posterior.weights.clone();
            for (w, &p) in posterior.weights.iter_mut().zip(&candidate_p) {
                *w *= d0 + p * (d1 - d0);
            }
            if !posterior.normalise() {
                // outcome impossible under every surviving candidate
                posterior.weights = before;
                continue;
            }
            let halves_only = match config.split {
                SplitRule::Median => true,
                SplitRule::Window => false,
                SplitRule::Hybrid => shots < config.window_patience,
            };
            decision = decide_halves(&posterior.weights, half, threshold);
            if decision.is_none() && !halves_only {
                decision = decide_window(&posterior.weights, window, threshold, &mut prefix);
            }
            if decision.is_some() {
                break;
            }
        }
    }

    let (posterior, kept, decided) = match decision {
        Some((start, len)) => {
            let kept = if start == 0 {
                Kept::Lower
            } else if start + len == count {
                Kept::Upper
            } else {
                Kept::Inner
            };
            (posterior.restrict(start, len), kept, true)
        }
        None => (posterior, Kept::Both, false),
    };
    let record = StepRecord {
        step: 0,
        tau,
        shots,
        kept,
        phi_hat: posterior.mean(),
        decided,
        first: posterior.first(),
        count: posterior.len(),
    };
    Ok((posterior, record))
}

/// `config.max_steps` steps from a uniform prior over `grid`.
///
/// Every attempt produces one record; an undecided attempt keeps the
/// interval and is retried with the accumulated posterior.
pub fn run_algorithm(
    true_flux: f64,
    sensor: &SensorConfig,
    grid: &FluxGrid,
    config: &PeaConfig,
    rng: &mut RngStream,
) -> Result<Vec<StepRecord>> {
    let mut posterior = Posterior::uniform(*grid);
    let mut records = Vec::with_capacity(config.max_steps);
    for step in 1..=config.max_steps {
        let tau = choose_delay(&posterior, sensor, config)?;
        let (next, mut record) = run_step(posterior, true_flux, tau, sensor, config, rng)?;
        record.step = step;
        records.push(record);
        posterior = next;
    }
    Ok(records)
}

/// One `(j, k)` run of an experiment sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub flux_index: usize,
    pub repetition: usize,
    pub true_flux: f64,
    pub records: Vec<StepRecord>,
}

pub fn run_task(
    flux_index: usize,
    repetition: usize,
    true_flux: f64,
    sensor: &SensorConfig,
    grid: &FluxGrid,
    config: &PeaConfig,
    seed: u64,
) -> Result<TaskResult> {
    let mut rng = RngStream::new(seed, flux_index as u32, repetition as u32);
    let records = run_algorithm(true_flux, sensor, grid, config, &mut rng)?;
    Ok(TaskResult {
        flux_index,
        repetition,
        true_flux,
        records,
    })
}

/// Run every `(j, k)` task not in `skip` on `workers` threads, handing each
/// finished task to `sink` in completion order.
#[allow(clippy::too_many_arguments)]
pub fn run_tasks<F>(
    sensor: &SensorConfig,
    grid: &FluxGrid,
    config: &PeaConfig,
    fluxes: &[f64],
    repetitions: usize,
    seed: u64,
    workers: usize,
    skip: &dyn Fn(usize, usize) -> bool,
    sink: F,
) -> Result<()>
where
    F: Fn(TaskResult) -> Result<()> + Sync,
{
    let tasks: Vec<(usize, usize)> = (0..fluxes.len())
        .flat_map(|j| (0..repetitions).map(move |k| (j, k)))
        .filter(|&(j, k)| !skip(j, k))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| {
        tasks.par_iter().try_for_each(|&(j, k)| {
            let result = run_task(j, k, fluxes[j], sensor, grid, config, seed)?;
            sink(result)
        })
    })
}

/// Full in-memory sweep over `fluxes` x `repetitions`.
pub fn run_experiment(
    sensor: &SensorConfig,
    config: &PeaConfig,
    fluxes: &[f64],
    repetitions: usize,
    seed: u64,
    workers: usize,
) -> Result<ExperimentResult> {
    sensor.validate()?;
    config.validate()?;
    let grid = build_calibration_grid(sensor)?;
    run_experiment_on_grid(sensor, &grid, config, fluxes, repetitions, seed, workers)
}

pub fn run_experiment_on_grid(
    sensor: &SensorConfig,
    grid: &FluxGrid,
    config: &PeaConfig,
    fluxes: &[f64],
    repetitions: usize,
    seed: u64,
    workers: usize,
) -> Result<ExperimentResult> {
    let collected = std::sync::Mutex::new(Vec::with_capacity(fluxes.len() * repetitions));
    run_tasks(
        sensor,
        grid,
        config,
        fluxes,
        repetitions,
        seed,
        workers,
        &|_, _| false,
        |task| {
            collected.lock().expect("collector poisoned").push(task);
            Ok(())
        },
    )?;
    let tasks = collected.into_inner().expect("collector poisoned");
    ExperimentResult::from_tasks(fluxes.to_vec(), repetitions, config.max_steps, tasks)
}
