//! Acceptance criteria 1-7. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use fluxsense::engine::{apply_gate, evolve, Axis, DensityMatrix, GateOp, LindbladSpec};
use fluxsense::model::{DetuningModel, FluxGrid, SensorConfig};
use fluxsense::pea::{run_algorithm, DelayCap, PeaConfig};
use fluxsense::readout::{ReadoutModel, RngStream};
use fluxsense_cli::commands::{load_curves, SensorCurve};
use fluxsense_cli::{cmd_sense, cmd_verify, ExperimentSpec, Overrides, SenseOptions};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn linear_sensor(n: usize, gamma1: f64, gamma_phi: f64, alpha: f64) -> SensorConfig {
    SensorConfig {
        n_qubits: n,
        gamma1,
        gamma_phi,
        alpha,
        detuning: DetuningModel::Linear {
            slope: 2.0 * PI * 1e9,
            operating_flux: 0.25,
            offset: 0.0,
        },
        tau_min: 20.5e-9,
        window_offset: 4,
    }
}

fn preset(name: &str, out: &Path, workers: Option<usize>) -> ExperimentSpec {
    ExperimentSpec::preset(name)
        .unwrap()
        .with_overrides(&Overrides {
            seed: None,
            workers,
            output: Some(out.to_path_buf()),
        })
        .unwrap()
}

fn closed_form() -> Outcome {
    let text = include_str!("../../core/tests/data/ramsey_oracle.csv");
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let s = linear_sensor(v[0] as usize, v[1], v[2], v[3]);
        worst = worst.max((s.ramsey_probability(v[4], v[5]) - v[6]).abs());
        rows += 1;
    }
    outcome(
        rows == 10_000 && worst <= 1e-12,
        format!("{rows} inputs, max |P - reference| = {worst:.2e} (limit 1e-12)"),
    )
}

fn engine_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_verify(&preset("desk", dir.path(), None)).unwrap();
    let wanted = [
        "equivalence N=1",
        "equivalence N=2",
        "fit N=2: |frequency",
        "fit N=2: |envelope",
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for prefix in wanted {
        match report.check(prefix) {
            Some(c) => {
                passed &= c.passed;
                parts.push(format!("{prefix} {:.2e}/{:.0e}", c.measured, c.limit));
            }
            None => {
                passed = false;
                parts.push(format!("{prefix} missing"));
            }
        }
    }
    outcome(passed, parts.join(", "))
}

fn cptp_suite() -> Outcome {
    let mut rng = RngStream::new(7, 0, 0);
    let mut pick = |n: usize| ((rng.uniform() * n as f64) as usize).min(n - 1);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut evolutions = 0;
    for _ in 0..1000 {
        let n = 1 + pick(3);
        let mut rho = DensityMatrix::ground(n);
        for _ in 0..1 + pick(6) {
            let kind = pick(3);
            rho = if kind == 0 || (kind == 1 && n == 1) {
                let axis = [Axis::X, Axis::Y, Axis::Z][pick(3)];
                let angle = (pick(1 << 20) as f64 / (1 << 20) as f64 - 0.5) * 2.0 * PI;
                apply_gate(
                    &rho,
                    &GateOp::Rotation {
                        target: pick(n),
                        axis,
                        angle,
                    },
                )
                .unwrap()
            } else if kind == 1 {
                let a = pick(n);
                let b = (a + 1 + pick(n - 1)) % n;
                apply_gate(&rho, &GateOp::cp(a, b, pick(2) as u8, pick(2) as u8)).unwrap()
            } else {
                let unit = |p: &mut dyn FnMut(usize) -> usize| p(1 << 20) as f64 / (1 << 20) as f64;
                let spec = LindbladSpec {
                    detunings: (0..n).map(|_| (unit(&mut pick) - 0.5) * 4e8).collect(),
                    gamma1: (0..n).map(|_| unit(&mut pick) * 1e6).collect(),
                    gamma_phi: (0..n).map(|_| unit(&mut pick) * 1e6).collect(),
                };
                evolutions += 1;
                evolve(&rho, &spec, unit(&mut pick) * 5e-6, 1e-10).unwrap()
            };
            let tr = rho.trace();
            worst.0 = worst.0.max((tr.re - 1.0).abs().max(tr.im.abs()));
            worst.1 = worst.1.max(rho.hermiticity_error());
            worst.2 = worst.2.min(rho.min_eigenvalue());
        }
    }
    outcome(
        worst.0 <= 1e-9 && worst.1 <= 1e-10 && worst.2 >= -1e-9,
        format!(
            "1000 sequences ({evolutions} evolutions): |tr - 1| {:.1e}, hermiticity {:.1e}, eigmin {:.1e}",
            worst.0, worst.1, worst.2
        ),
    )
}

fn estimator_soundness() -> Outcome {
    let sensor = linear_sensor(1, 0.0, 0.0, 1.0);
    let (lo, hi) = sensor.flux_window().unwrap();
    let grid = FluxGrid::cell_centred(lo, hi, 64).unwrap();
    let config = PeaConfig {
        max_steps: 6,
        delay_cap: DelayCap::Unbounded,
        readout: ReadoutModel {
            sigma0: 1e-3,
            sigma1: 1e-3,
            ..ReadoutModel::default()
        },
        ..PeaConfig::default()
    };
    let repetitions = 27;
    let (mut decided, mut wrong, mut unexplained) = (0usize, 0usize, 0usize);
    let mut localized = vec![0usize; grid.count];
    for (j, hits) in localized.iter_mut().enumerate() {
        for k in 0..repetitions {
            let mut rng = RngStream::new(4, j as u32, k as u32);
            let runs = run_algorithm(grid.value(j), &sensor, &grid, &config, &mut rng).unwrap();
            let mut held = true;
            for r in &runs {
                if r.decided && held {
                    decided += 1;
                    if !(r.first..r.first + r.count).contains(&j) {
                        wrong += 1;
                        held = false;
                    }
                }
            }
            let last = runs.last().unwrap();
            let found = last.count == 1 && last.first == j;
            if found {
                *hits += 1;
            } else if held {
                // lost without a wrong decision on record
                unexplained += 1;
            }
        }
    }
    let eps = config.epsilon;
    let n = decided as f64;
    let bound = eps * n + 3.0 * (n * eps * (1.0 - eps)).sqrt();
    let all_found = localized.iter().all(|&h| h > 0);
    outcome(
        decided >= 10_000 && unexplained == 0 && all_found && wrong as f64 <= bound,
        format!(
            "{decided} decided steps, {wrong} discarded the truth (bound {bound:.2}); \
             every flux pinned to one cell: {all_found}, losses without a wrong step: {unexplained}"
        ),
    )
}

fn curve<'a>(curves: &'a [SensorCurve], label: &str) -> &'a SensorCurve {
    curves
        .iter()
        .find(|c| c.label == label)
        .unwrap_or_else(|| panic!("no curve {label}"))
}

fn saturation_ordering(curves: &[SensorCurve]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for c in curves {
        let monotone = c.rows.windows(2).all(|w| w[1].delay_bar >= w[0].delay_bar);
        if !monotone {
            passed = false;
            parts.push(format!("{} delays decrease", c.label));
        }
    }
    let n1 = curve(curves, "N1");
    let t2 = n1.sensor.coherence_time();
    let last = n1.rows.last().unwrap().delay_bar;
    let within = (last / t2 - 1.0).abs() <= 0.25;
    passed &= within;
    parts.push(format!(
        "N1 final delay {:.3} us of T2* {:.3} us",
        last * 1e6,
        t2 * 1e6
    ));
    let step = |label: &str| curve(curves, label).facts.saturation_step;
    let order = |a: &str, b: &str| match (step(a), step(b)) {
        (Some(x), Some(y)) => y < x,
        _ => false,
    };
    for (a, b) in [
        ("N1", "N2-a1"),
        ("N2-a1", "N3-a1"),
        ("N2-a1", "N2-a2"),
        ("N3-a1", "N3-a2"),
    ] {
        passed &= order(a, b);
    }
    let steps: Vec<String> = ["N1", "N2-a1", "N2-a2", "N3-a1", "N3-a2"]
        .iter()
        .map(|l| {
            format!(
                "{l}:{}",
                step(l).map(|s| s.to_string()).unwrap_or("-".into())
            )
        })
        .collect();
    parts.push(format!("saturation steps {}", steps.join(" ")));
    outcome(passed, parts.join(", "))
}

/// log-log interpolation of accuracy and its standard error at `tau`.
fn at_tau(c: &SensorCurve, tau: f64) -> Option<(f64, f64)> {
    let rows = &c.rows;
    let i = rows
        .windows(2)
        .position(|w| w[0].tau_bar <= tau && tau <= w[1].tau_bar)?;
    let (a, b) = (&rows[i], &rows[i + 1]);
    let t = if b.tau_bar > a.tau_bar {
        (tau.ln() - a.tau_bar.ln()) / (b.tau_bar.ln() - a.tau_bar.ln())
    } else {
        0.0
    };
    let lerp = |x: f64, y: f64| (x.ln() + t * (y.ln() - x.ln())).exp();
    Some((
        lerp(a.accuracy, b.accuracy),
        lerp(a.accuracy_se, b.accuracy_se),
    ))
}

fn accuracy_scaling(curves: &[SensorCurve]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for c in curves {
        let s = c.facts.slope_steps_1_4;
        passed &= (-1.2..=-0.8).contains(&s);
        parts.push(format!("{} {s:.3}", c.label));
    }
    let late = curve(curves, "N3-a2").facts.slope_last_3;
    passed &= (-0.75..=-0.25).contains(&late);
    parts.push(format!("N3-a2 last 3 {late:.3}"));
    let qec = curve(curves, "QEC").facts.slope_above_floor;
    passed &= (-1.1..=-0.9).contains(&qec);
    parts.push(format!("QEC above floor {qec:.3}"));

    let mut compared = 0;
    let mut violations = 0;
    for (better, worse) in [("N3-a1", "N2-a1"), ("N2-a1", "N1")] {
        let (b, w) = (curve(curves, better), curve(curves, worse));
        for r in &b.rows {
            if let Some((acc, se)) = at_tau(w, r.tau_bar) {
                compared += 1;
                if r.accuracy > acc + 2.0 * (se * se + r.accuracy_se * r.accuracy_se).sqrt() {
                    violations += 1;
                }
            }
        }
    }
    passed &= compared > 0 && violations == 0;
    parts.push(format!(
        "matched-tau ordering {violations} violations of {compared}"
    ));
    outcome(passed, format!("slopes 1-4: {}", parts.join(", ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in [1, 4, 16] {
        let out = dir.path().join(format!("w{workers}"));
        let mut spec = preset("desk", &out, Some(workers));
        spec.sensors
            .retain(|s| s.label == "N1" || s.label == "N3-a2");
        let sweep = spec.sweep.as_mut().unwrap();
        sweep.flux_count = 8;
        sweep.repetitions = 4;
        let files = cmd_sense(&spec, &SenseOptions::default()).unwrap();
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        outputs.push(bytes);
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        same && outputs[0].len() == 2,
        format!(
            "{} record files identical for 1, 4 and 16 workers: {same}",
            outputs[0].len()
        ),
    )
}

/// `setup` is time already spent on shared inputs of this criterion.
fn run(number: usize, limit: Duration, setup: Duration, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = check();
    let elapsed = setup + start.elapsed();
    let passed = result.passed && elapsed <= limit;
    println!(
        "{} criterion {number}: {} ({:.1} s, limit {} s)",
        if passed { "PASS" } else { "FAIL" },
        result.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    passed
}

fn main() {
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;
    all &= run(1, Duration::from_secs(1), Duration::ZERO, closed_form);
    all &= run(2, minutes(1), Duration::ZERO, engine_equivalence);
    all &= run(3, minutes(1), Duration::ZERO, cptp_suite);
    all &= run(4, minutes(2), Duration::ZERO, estimator_soundness);

    let desk_dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    cmd_sense(
        &preset("desk", desk_dir.path(), None),
        &SenseOptions::default(),
    )
    .unwrap();
    let curves = load_curves(desk_dir.path()).unwrap();
    let sweep_time = start.elapsed();
    println!("desk sweep: {:.1} s", sweep_time.as_secs_f64());
    all &= run(5, minutes(10), sweep_time, || saturation_ordering(&curves));
    all &= run(6, minutes(30), sweep_time, || accuracy_scaling(&curves));

    all &= run(7, minutes(5), Duration::ZERO, determinism);
    if !all {
        std::process::exit(1);
    }
}
