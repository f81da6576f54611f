//! The `pattern`, `verify`, `sense` and `analyze` subcommands.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use fluxsense::analysis::{
    accuracy_plot_script, pattern_plot_script, quantization_floor, scaling_exponent, summarize,
    write_summary_csv, ExperimentResult, StepSummary,
};
use fluxsense::engine::{entangler_fidelity, ghz_projected_series, EngineOptions};
use fluxsense::fit::fit_damped_cosine;
use fluxsense::model::{build_calibration_pattern, CalibrationPattern, FluxGrid, SensorConfig};
use fluxsense::pea::{
    build_calibration_grid, common_sublattice, run_tasks, select_test_fluxes, TaskResult,
};

use crate::config::{Axis, ExperimentSpec, SensorEntry};
use crate::header::Header;
use crate::records::{read_records, render_rows, rows_of, write_canonical, COLUMNS};
use crate::CmdError;

fn write_file(path: &Path, header: &Header, body: &str) -> Result<(), CmdError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(header.render().as_bytes())?;
    f.write_all(body.as_bytes())?;
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- pattern

fn engine_pattern(
    sensor: &SensorConfig,
    grid: &FluxGrid,
    taus: &[f64],
) -> Result<CalibrationPattern, CmdError> {
    let fluxes = grid.values();
    let mut probs = Vec::with_capacity(fluxes.len() * taus.len());
    for &flux in &fluxes {
        probs.extend(ghz_projected_series(
            sensor,
            flux,
            taus,
            &EngineOptions::default(),
        )?);
    }
    Ok(CalibrationPattern {
        fluxes,
        taus: taus.to_vec(),
        probs,
    })
}

/// Write a calibration pattern CSV and a gnuplot script per sensor.
pub fn cmd_pattern(spec: &ExperimentSpec) -> Result<Vec<PathBuf>, CmdError> {
    let p = spec
        .pattern
        .as_ref()
        .ok_or_else(|| CmdError::Validation("configuration has no pattern block".into()))?;
    let out = spec.output_dir();
    fs::create_dir_all(&out)?;
    let taus = p.taus.values();
    let mut written = Vec::new();
    for entry in &spec.sensors {
        let (lo, hi) = entry.sensor.flux_window()?;
        let grid = FluxGrid::cell_centred(lo, hi, p.flux_points)?;
        let (pattern, method) = if p.engine {
            (
                engine_pattern(&entry.sensor, &grid, &taus)?,
                "lindblad-engine",
            )
        } else {
            (
                build_calibration_pattern(&entry.sensor, &grid, &taus)?,
                "closed-form",
            )
        };
        let header = Header::new(spec)
            .with("kind", "pattern")
            .with("sensor", entry.label.as_str())
            .with("method", method);
        let csv_name = format!("pattern_{}.csv", entry.label);
        let mut body = Vec::new();
        pattern.write_csv(&mut body)?;
        let csv_path = out.join(&csv_name);
        write_file(&csv_path, &header, &String::from_utf8(body).expect("utf-8"))?;
        let gp_path = out.join(format!("pattern_{}.gp", entry.label));
        let script = pattern_plot_script(&csv_name, &format!("pattern_{}.png", entry.label));
        write_file(&gp_path, &header, &script)?;
        written.push(csv_path);
        written.push(gp_path);
    }
    Ok(written)
}

// ----------------------------------------------------------------- verify

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn push(&mut self, name: impl Into<String>, measured: f64, limit: f64) {
        self.checks.push(Check {
            name: name.into(),
            measured,
            limit,
            passed: measured <= limit,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, prefix: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name.starts_with(prefix))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {}: {:.3e} (limit {:.1e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.limit
            );
        }
        s
    }
}

/// Flux inside the (offset-free) window of `sensor` with `|detuning| = target`.
fn flux_for_detuning(sensor: &SensorConfig, target: f64) -> Result<f64, CmdError> {
    let (mut a, mut b) = sensor.flux_window()?;
    let f = |x: f64| sensor.detuning(x).map(|d| d.abs() - target);
    let (mut fa, fb) = (f(a)?, f(b)?);
    if fa * fb > 0.0 {
        return Err(CmdError::Validation(format!(
            "verify.fit_detuning {target:e} rad/s is outside the sensor window"
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fa * fm <= 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    Ok(0.5 * (a + b))
}

fn equivalence_deviation(
    sensor: &SensorConfig,
    grid_points: usize,
    tau_span: f64,
    options: &EngineOptions,
) -> Result<f64, CmdError> {
    let (lo, hi) = sensor.flux_window()?;
    let grid = FluxGrid::cell_centred(lo, hi, grid_points)?;
    let taus = Axis {
        start: 0.0,
        stop: tau_span * sensor.tau_min,
        count: grid_points,
    }
    .values();
    let mut worst: f64 = 0.0;
    for flux in grid.values() {
        let engine = ghz_projected_series(sensor, flux, &taus, options)?;
        let dw = sensor.detuning(flux)?;
        for (p, &tau) in engine.iter().zip(&taus) {
            worst = worst.max((p - sensor.ramsey_probability(dw, tau)).abs());
        }
    }
    Ok(worst)
}

/// Engine-versus-closed-form checks, the two-qubit fit and entangler fidelities.
pub fn cmd_verify(spec: &ExperimentSpec) -> Result<VerifyReport, CmdError> {
    let v = spec.verify;
    let base = spec.sensors[0].sensor;
    let options = EngineOptions {
        angle_error: v.angle_error,
        ..EngineOptions::default()
    };
    let mut report = VerifyReport::default();

    for n in 1..=options.qubit_cap.min(3) {
        let ideal = SensorConfig {
            n_qubits: n,
            gamma1: 0.0,
            gamma_phi: 0.0,
            alpha: 1.0,
            ..base
        };
        let dev = equivalence_deviation(&ideal, v.grid_points, v.tau_span, &options)?;
        report.push(
            format!("equivalence N={n}, rates 0, max |engine - closed form|"),
            dev,
            1e-6,
        );
    }

    let pair = SensorConfig {
        n_qubits: 2,
        alpha: 1.0,
        window_offset: 0,
        ..base
    };
    let dw = v.fit_detuning;
    let flux = flux_for_detuning(&pair, dw)?;
    let span = if pair.coherence_time().is_finite() {
        pair.coherence_time()
    } else {
        20.0 * std::f64::consts::PI / dw
    };
    let taus = Axis {
        start: 0.0,
        stop: span,
        count: v.fit_samples,
    }
    .values();
    let y = ghz_projected_series(&pair, flux, &taus, &options)?;
    let fit = fit_damped_cosine(&taus, &y)?;
    report.push(
        "fit N=2: |frequency / (2 dw) - 1|",
        (fit.frequency / (2.0 * dw) - 1.0).abs(),
        1e-3,
    );
    let target = pair.envelope_rate();
    let envelope_error = if target > 0.0 {
        (fit.decay_rate / target - 1.0).abs()
    } else {
        fit.decay_rate.abs() * span
    };
    report.push(
        "fit N=2: |envelope rate / (2 (gamma1/2 + gamma_phi)) - 1|",
        envelope_error,
        0.1,
    );

    for n in 2..=options.qubit_cap.min(3) {
        let fidelity = entangler_fidelity(n, &options)?;
        report.push(
            format!("entangler N={n}: 1 - GHZ fidelity"),
            1.0 - fidelity,
            1e-9,
        );
    }

    let out = spec.output_dir();
    fs::create_dir_all(&out)?;
    write_file(
        &out.join("verify.txt"),
        &Header::new(spec).with("kind", "verify"),
        &report.render(),
    )?;
    Ok(report)
}

// ------------------------------------------------------------------ sense

#[derive(Debug, Clone, Default)]
pub struct SenseOptions {
    /// Stop after this many newly finished tasks, leaving partial files as
    /// an interrupted run would.
    pub stop_after: Option<usize>,
}

/// The `F` test fluxes: evenly spread points common to every sensor grid.
pub fn test_fluxes(spec: &ExperimentSpec) -> Result<Vec<f64>, CmdError> {
    let sweep = spec.sweep()?;
    let grids = spec
        .sensors
        .iter()
        .map(|e| build_calibration_grid(&e.sensor))
        .collect::<fluxsense::Result<Vec<_>>>()?;
    let lattice = common_sublattice(&grids);
    Ok(select_test_fluxes(&lattice, sweep.flux_count)?)
}

fn record_header(spec: &ExperimentSpec, entry: &SensorEntry) -> Header {
    Header::new(spec)
        .with("kind", "records")
        .with("sensor", entry.label.as_str())
}

fn check_same_config(found: &Header, expected: &Header, path: &Path) -> Result<(), CmdError> {
    if found.hash != expected.hash || found.get("sensor") != expected.get("sensor") {
        return Err(fluxsense::Error::ResumeMismatch(format!(
            "{} was written for config {} (sensor {}), current config is {} (sensor {})",
            path.display(),
            found.hash,
            found.get("sensor").unwrap_or("?"),
            expected.hash,
            expected.get("sensor").unwrap_or("?"),
        ))
        .into());
    }
    Ok(())
}

/// Run the sweep for every sensor, checkpointing to `<label>.partial.csv`
/// and finishing with the canonical `<label>.csv`. Existing partial files
/// with the same configuration hash are resumed.
pub fn cmd_sense(spec: &ExperimentSpec, options: &SenseOptions) -> Result<Vec<PathBuf>, CmdError> {
    let sweep = spec.sweep()?;
    let out = spec.output_dir();
    fs::create_dir_all(&out)?;
    let fluxes = test_fluxes(spec)?;
    let total = fluxes.len() * sweep.repetitions;
    let steps = spec.pea.max_steps;
    let mut budget = options.stop_after;
    let mut written = Vec::new();

    for entry in &spec.sensors {
        let header = record_header(spec, entry);
        let final_path = out.join(format!("{}.csv", entry.label));
        let partial_path = out.join(format!("{}.partial.csv", entry.label));
        if final_path.exists() {
            let existing = read_records(&final_path, Some(steps))?;
            check_same_config(&existing.header, &header, &final_path)?;
            if existing.tasks.len() != total {
                return Err(CmdError::Runtime(format!(
                    "{} holds {} of {total} runs; remove it to rerun",
                    final_path.display(),
                    existing.tasks.len()
                )));
            }
            written.push(final_path);
            continue;
        }

        let done = if partial_path.exists() {
            let existing = read_records(&partial_path, Some(steps))?;
            check_same_config(&existing.header, &header, &partial_path)?;
            existing.tasks
        } else {
            Vec::new()
        };
        // rewrite without any torn tail before appending
        {
            let mut f = BufWriter::new(File::create(&partial_path)?);
            f.write_all(header.render().as_bytes())?;
            writeln!(f, "{COLUMNS}")?;
            for t in &done {
                f.write_all(render_rows(&rows_of(t))?.as_bytes())?;
            }
            f.flush()?;
        }
        let done_set: HashSet<(usize, usize)> =
            done.iter().map(|t| (t.flux_index, t.repetition)).collect();

        let file = OpenOptions::new().append(true).open(&partial_path)?;
        let state = Mutex::new((BufWriter::new(file), budget));
        let grid = build_calibration_grid(&entry.sensor)?;
        let pea = entry.pea(&spec.pea);
        let partial_name = partial_path.display().to_string();
        let outcome = run_tasks(
            &entry.sensor,
            &grid,
            &pea,
            &fluxes,
            sweep.repetitions,
            sweep.seed,
            spec.worker_count(),
            &|j, k| done_set.contains(&(j, k)),
            |task: TaskResult| {
                let mut guard = state.lock().expect("record writer poisoned");
                let (writer, left) = &mut *guard;
                if *left == Some(0) {
                    return Err(fluxsense::Error::Interrupted(format!(
                        "stopped as requested; resume from {partial_name}"
                    )));
                }
                let text = render_rows(&rows_of(&task)).map_err(|e| fluxsense::Error::Records {
                    path: partial_name.clone(),
                    reason: e.to_string(),
                })?;
                writer.write_all(text.as_bytes())?;
                writer.flush()?;
                if let Some(n) = left.as_mut() {
                    *n -= 1;
                }
                Ok(())
            },
        );
        let (mut writer, left) = state.into_inner().expect("record writer poisoned");
        writer.flush()?;
        drop(writer);
        budget = left;
        outcome?;

        let all = read_records(&partial_path, Some(steps))?;
        if all.tasks.len() != total {
            return Err(CmdError::Runtime(format!(
                "{} holds {} of {total} runs after the sweep",
                partial_path.display(),
                all.tasks.len()
            )));
        }
        let tmp = out.join(format!("{}.csv.tmp", entry.label));
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            write_canonical(&mut f, &header, &all.tasks)?;
            f.flush()?;
        }
        fs::rename(&tmp, &final_path)?;
        fs::remove_file(&partial_path)?;
        written.push(final_path);
    }
    Ok(written)
}

// ---------------------------------------------------------------- analyze

/// Step-range slopes and saturation of one summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFacts {
    pub slope_steps_1_4: f64,
    pub slope_last_3: f64,
    pub slope_above_floor: f64,
    pub floor: f64,
    pub coherence_time: f64,
    /// First step whose averaged delay reaches 75% of the coherence time.
    pub saturation_step: Option<usize>,
}

fn slope_of(rows: &[StepSummary]) -> f64 {
    let pts: Vec<_> = rows.iter().map(|r| (r.tau_bar, r.accuracy)).collect();
    scaling_exponent(&pts).unwrap_or(f64::NAN)
}

pub fn curve_facts(rows: &[StepSummary], sensor: &SensorConfig) -> Result<CurveFacts, CmdError> {
    let grid = build_calibration_grid(sensor)?;
    let floor = quantization_floor(grid.step);
    let above: Vec<StepSummary> = rows
        .iter()
        .copied()
        .filter(|r| r.accuracy > floor)
        .collect();
    let t2 = sensor.coherence_time();
    Ok(CurveFacts {
        slope_steps_1_4: slope_of(&rows[..rows.len().min(4)]),
        slope_last_3: slope_of(&rows[rows.len().saturating_sub(3)..]),
        slope_above_floor: slope_of(&above),
        floor,
        coherence_time: t2,
        saturation_step: t2
            .is_finite()
            .then(|| {
                rows.iter()
                    .position(|r| r.delay_bar >= 0.75 * t2)
                    .map(|i| i + 1)
            })
            .flatten(),
    })
}

/// Build the largest rectangular result from complete tasks: every test
/// flux whose `M` repetitions have all finished.
pub fn complete_result(
    tasks: Vec<TaskResult>,
    repetitions: usize,
    steps: usize,
    sensor: &SensorConfig,
) -> Result<Option<ExperimentResult>, CmdError> {
    let mut by_flux: BTreeMap<usize, Vec<TaskResult>> = BTreeMap::new();
    for t in tasks {
        by_flux.entry(t.flux_index).or_default().push(t);
    }
    let mut fluxes = Vec::new();
    let mut kept = Vec::new();
    for (_, group) in by_flux {
        if group.len() != repetitions {
            continue;
        }
        let j = fluxes.len();
        fluxes.push(group[0].true_flux);
        kept.extend(group.into_iter().map(|t| TaskResult { flux_index: j, ..t }));
    }
    if fluxes.is_empty() {
        return Ok(None);
    }
    let (lo, hi) = sensor.flux_window()?;
    Ok(Some(
        ExperimentResult::from_tasks(fluxes, repetitions, steps, kept)?
            .with_prior_mean(0.5 * (lo + hi)),
    ))
}

/// Per-step summary of one sensor's records.
#[derive(Debug, Clone)]
pub struct SensorCurve {
    pub label: String,
    pub sensor: SensorConfig,
    pub rows: Vec<StepSummary>,
    pub facts: CurveFacts,
    pub complete_fluxes: usize,
    /// Configuration from the record header.
    pub spec: ExperimentSpec,
}

/// Summaries of the record files in `dir`, in configuration order. A
/// finished file is preferred over a partial one of the same sensor.
pub fn load_curves(dir: &Path) -> Result<Vec<SensorCurve>, CmdError> {
    let mut sources: BTreeMap<String, PathBuf> = BTreeMap::new();
    for item in fs::read_dir(dir)? {
        let path = item?.path();
        let Some(name) = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
        else {
            continue;
        };
        let label = if let Some(l) = name.strip_suffix(".partial.csv") {
            l.to_string()
        } else if let Some(l) = name.strip_suffix(".csv") {
            l.to_string()
        } else {
            continue;
        };
        let Ok(text) = fs::read_to_string(&path) else {
            continue;
        };
        let Ok(header) = Header::parse(&text) else {
            continue;
        };
        if header.get("kind") != Some("records") || header.get("sensor") != Some(label.as_str()) {
            continue;
        }
        // a finished file wins over a partial one
        if name.ends_with(".partial.csv") && sources.contains_key(&label) {
            continue;
        }
        sources.insert(label, path);
    }
    if sources.is_empty() {
        return Err(CmdError::Validation(format!(
            "no record files found in {}",
            dir.display()
        )));
    }

    let mut curves = Vec::new();
    for (label, path) in &sources {
        let file = read_records(path, None)?;
        let spec = file.header.spec()?;
        let sweep = spec.sweep()?.clone();
        let (order, entry) = spec
            .sensors
            .iter()
            .enumerate()
            .find(|(_, e)| &e.label == label)
            .ok_or_else(|| CmdError::Runtime(format!("{label} missing from its own header")))?;
        let entry = entry.clone();
        let Some(result) = complete_result(
            file.tasks,
            sweep.repetitions,
            spec.pea.max_steps,
            &entry.sensor,
        )?
        else {
            eprintln!("{label}: no test flux has all repetitions yet, skipped");
            continue;
        };
        let rows = summarize(&result, sweep.seed)?;
        let facts = curve_facts(&rows, &entry.sensor)?;
        curves.push((
            order,
            SensorCurve {
                label: label.clone(),
                sensor: entry.sensor,
                rows,
                facts,
                complete_fluxes: result.flux_count(),
                spec,
            },
        ));
    }
    curves.sort_by_key(|(order, _)| *order);
    Ok(curves.into_iter().map(|(_, c)| c).collect())
}

/// Summarise the record files in `dir`: a summary CSV per sensor, a
/// `slopes.csv` table and a gnuplot script for accuracy and delay curves.
pub fn cmd_analyze(dir: &Path) -> Result<Vec<PathBuf>, CmdError> {
    let curves = load_curves(dir)?;
    let mut slopes = String::from(
        "label,slope_steps_1_4,slope_last_3,slope_above_floor,quantization_floor,coherence_time_s,saturation_step,complete_fluxes\n",
    );
    let mut written = Vec::new();
    let mut plot = Vec::new();
    for c in &curves {
        let sweep = c.spec.sweep()?;
        let header = Header::new(&c.spec)
            .with("kind", "summary")
            .with("sensor", c.label.as_str())
            .with(
                "complete-fluxes",
                format!("{}/{}", c.complete_fluxes, sweep.flux_count),
            );
        let mut body = Vec::new();
        write_summary_csv(&c.rows, &mut body)?;
        let summary_name = format!("{}.summary.csv", c.label);
        let summary_path = dir.join(&summary_name);
        write_file(
            &summary_path,
            &header,
            &String::from_utf8(body).expect("utf-8"),
        )?;
        written.push(summary_path);
        let f = &c.facts;
        let _ = writeln!(
            slopes,
            "{},{:.6},{:.6},{:.6},{:.9e},{:.9e},{},{}",
            c.label,
            f.slope_steps_1_4,
            f.slope_last_3,
            f.slope_above_floor,
            f.floor,
            f.coherence_time,
            f.saturation_step.map(|s| s.to_string()).unwrap_or_default(),
            c.complete_fluxes
        );
        plot.push((c.label.clone(), summary_name));
    }
    let spec = &curves
        .first()
        .ok_or_else(|| CmdError::Runtime("no record file has a complete test flux yet".into()))?
        .spec;
    let header = Header::new(spec).with("kind", "analysis");
    let slopes_path = dir.join("slopes.csv");
    write_file(&slopes_path, &header, &slopes)?;
    written.push(slopes_path);
    let gp_path = dir.join("fig4.gp");
    write_file(&gp_path, &header, &accuracy_plot_script(&plot, "fig4.png"))?;
    written.push(gp_path);
    Ok(written)
}
