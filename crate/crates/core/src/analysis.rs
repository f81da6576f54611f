//! Per-step aggregates of an experiment sweep.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::pea::{StepRecord, TaskResult};

/// Dense `(j, k, l)` record set of a sweep; fluxes in units of the flux quantum.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub fluxes: Vec<f64>,
    pub repetitions: usize,
    pub steps: usize,
    /// Prior mean `Phi-hat` used before the first decided step.
    pub prior_mean: Option<f64>,
    records: Vec<StepRecord>,
}

impl ExperimentResult {
    /// Assemble from task results in any order; every `(j, k)` must appear once.
    pub fn from_tasks(
        fluxes: Vec<f64>,
        repetitions: usize,
        steps: usize,
        tasks: Vec<TaskResult>,
    ) -> Result<Self> {
        let f = fluxes.len();
        let mut slots: Vec<Option<Vec<StepRecord>>> = vec![None; f * repetitions];
        for t in tasks {
            if t.flux_index >= f || t.repetition >= repetitions {
                return Err(Error::InvalidConfig(format!(
                    "task ({}, {}) outside {f} x {repetitions}",
                    t.flux_index, t.repetition
                )));
            }
            if t.records.len() != steps {
                return Err(Error::InvalidConfig(format!(
                    "task ({}, {}) has {} steps, expected {steps}",
                    t.flux_index,
                    t.repetition,
                    t.records.len()
                )));
            }
            let slot = &mut slots[t.flux_index * repetitions + t.repetition];
            if slot.is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate task ({}, {})",
                    t.flux_index, t.repetition
                )));
            }
            *slot = Some(t.records);
        }
        let mut records = Vec::with_capacity(f * repetitions * steps);
        for (i, slot) in slots.into_iter().enumerate() {
            let run = slot.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "missing task ({}, {})",
                    i / repetitions,
                    i % repetitions
                ))
            })?;
            records.extend(run);
        }
        Ok(ExperimentResult {
            fluxes,
            repetitions,
            steps,
            prior_mean: None,
            records,
        })
    }

    pub fn with_prior_mean(mut self, mean: f64) -> Self {
        self.prior_mean = Some(mean);
        self
    }

    pub fn flux_count(&self) -> usize {
        self.fluxes.len()
    }

    /// Records of run `(j, k)`, 0-based.
    pub fn run(&self, j: usize, k: usize) -> &[StepRecord] {
        let start = (j * self.repetitions + k) * self.steps;
        &self.records[start..start + self.steps]
    }

    /// Record of step `l` (1-based) of run `(j, k)`.
    pub fn record(&self, j: usize, k: usize, l: usize) -> &StepRecord {
        &self.run(j, k)[l - 1]
    }

    /// Estimate entering the accuracy at step `l`: the step's `Phi-hat` if
    /// decided, otherwise the latest decided one (or the prior mean).
    pub fn estimate(&self, j: usize, k: usize, l: usize) -> f64 {
        let run = self.run(j, k);
        run[..l]
            .iter()
            .rev()
            .find(|r| r.decided)
            .map(|r| r.phi_hat)
            .or(self.prior_mean)
            .unwrap_or(run[l - 1].phi_hat)
    }

    pub fn decided_fraction(&self, l: usize) -> f64 {
        let total = self.flux_count() * self.repetitions;
        let decided = (0..self.flux_count())
            .flat_map(|j| (0..self.repetitions).map(move |k| (j, k)))
            .filter(|&(j, k)| self.record(j, k, l).decided)
            .count();
        decided as f64 / total as f64
    }
}

/// Total phase accumulation time `sum_{i <= l} tau_i n_i` of run `(j, k)`.
pub fn phase_accumulation_time(result: &ExperimentResult, j: usize, k: usize, l: usize) -> f64 {
    result.run(j, k)[..l]
        .iter()
        .map(|r| r.tau * r.shots as f64)
        .sum()
}

fn two_stage_mean(result: &ExperimentResult, value: impl Fn(usize, usize) -> f64) -> f64 {
    let m = result.repetitions as f64;
    let per_flux: f64 = (0..result.flux_count())
        .map(|j| (0..result.repetitions).map(|k| value(j, k)).sum::<f64>() / m)
        .sum();
    per_flux / result.flux_count() as f64
}

/// Phase accumulation time averaged over repetitions, then fluxes.
pub fn averaged_phase_time(result: &ExperimentResult, l: usize) -> f64 {
    two_stage_mean(result, |j, k| phase_accumulation_time(result, j, k, l))
}

pub fn averaged_delay(result: &ExperimentResult, l: usize) -> f64 {
    two_stage_mean(result, |j, k| result.record(j, k, l).tau)
}

pub fn averaged_shots(result: &ExperimentResult, l: usize) -> f64 {
    two_stage_mean(result, |j, k| result.record(j, k, l).shots as f64)
}

/// Per-flux variance `(1 / (M - 1)) sum_k (Phi-hat - Phi_j)^2`.
fn flux_variances(result: &ExperimentResult, l: usize) -> Result<Vec<f64>> {
    if result.repetitions < 2 {
        return Err(Error::UndefinedVariance(result.repetitions));
    }
    let dof = (result.repetitions - 1) as f64;
    Ok((0..result.flux_count())
        .map(|j| {
            let truth = result.fluxes[j];
            (0..result.repetitions)
                .map(|k| (result.estimate(j, k, l) - truth).powi(2))
                .sum::<f64>()
                / dof
        })
        .collect())
}

/// `sqrt((1 / F) sum_j (1 / (M - 1)) sum_k (Phi-hat_jkl - Phi_j)^2)`.
pub fn averaged_accuracy(result: &ExperimentResult, l: usize) -> Result<f64> {
    let v = flux_variances(result, l)?;
    Ok((v.iter().sum::<f64>() / v.len() as f64).sqrt())
}

/// Standard error of [`averaged_accuracy`] from the spread of the per-flux
/// variances (delta method on the square root).
pub fn accuracy_standard_error(result: &ExperimentResult, l: usize) -> Result<f64> {
    let v = flux_variances(result, l)?;
    let f = v.len() as f64;
    let mean = v.iter().sum::<f64>() / f;
    if mean == 0.0 || v.len() < 2 {
        return Ok(0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (f - 1.0);
    Ok((var / f).sqrt() / (2.0 * mean.sqrt()))
}

/// Percentile bootstrap interval of [`averaged_accuracy`], resampling fluxes.
pub fn bootstrap_accuracy_ci(
    result: &ExperimentResult,
    l: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let v = flux_variances(result, l)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples.max(1))
        .map(|_| {
            let s: f64 = (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum();
            (s / v.len() as f64).sqrt()
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        let i = (q * (stats.len() - 1) as f64).round() as usize;
        stats[i.min(stats.len() - 1)]
    };
    let tail = 0.5 * (1.0 - level);
    Ok((pick(tail), pick(1.0 - tail)))
}

fn check_positive(points: &[(f64, f64)]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::ScalingInput(format!("{} points", points.len())));
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::ScalingInput(format!("non-positive point {p:?}")));
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn scaling_exponent(points: &[(f64, f64)]) -> Result<f64> {
    check_positive(points)?;
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::ScalingInput("all abscissae equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Log-log linear interpolation of `y(x)` through points sorted by `x`;
/// `None` outside the covered range.
pub fn loglog_interpolate(points: &[(f64, f64)], x: f64) -> Option<f64> {
    if x <= 0.0 {
        return None;
    }
    points.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x < x0.min(x1) || x > x0.max(x1) || x0 <= 0.0 || x1 <= 0.0 || y0 <= 0.0 || y1 <= 0.0 {
            return None;
        }
        if x0 == x1 {
            return Some(y0);
        }
        let t = (x.ln() - x0.ln()) / (x1.ln() - x0.ln());
        Some((y0.ln() + t * (y1.ln() - y0.ln())).exp())
    })
}

/// Accuracy floor once every estimate sits on a single grid point.
pub fn quantization_floor(grid_step: f64) -> f64 {
    grid_step / 12f64.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub tau_bar: f64,
    pub n_bar: f64,
    pub accuracy: f64,
    /// Log-log slope of accuracy against `tau_bar` around this step.
    pub slope_local: f64,
    pub delay_bar: f64,
    pub accuracy_se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub decided_fraction: f64,
}

pub fn summarize(result: &ExperimentResult, bootstrap_seed: u64) -> Result<Vec<StepSummary>> {
    let mut rows = Vec::with_capacity(result.steps);
    for l in 1..=result.steps {
        let (ci_lo, ci_hi) =
            bootstrap_accuracy_ci(result, l, 1000, 0.95, bootstrap_seed ^ l as u64)?;
        rows.push(StepSummary {
            step: l,
            tau_bar: averaged_phase_time(result, l),
            n_bar: averaged_shots(result, l),
            accuracy: averaged_accuracy(result, l)?,
            slope_local: f64::NAN,
            delay_bar: averaged_delay(result, l),
            accuracy_se: accuracy_standard_error(result, l)?,
            ci_lo,
            ci_hi,
            decided_fraction: result.decided_fraction(l),
        });
    }
    for i in 0..rows.len() {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(rows.len() - 1);
        let pts: Vec<_> = rows[lo..=hi]
            .iter()
            .map(|r| (r.tau_bar, r.accuracy))
            .collect();
        rows[i].slope_local = scaling_exponent(&pts).unwrap_or(f64::NAN);
    }
    Ok(rows)
}

pub const SUMMARY_HEADER: &str =
    "l,tau_bar_s,n_bar,delta_phi_over_phi0,slope_local,delay_bar_s,se_delta_phi_extra,ci95_lo_extra,ci95_hi_extra,decided_fraction";

pub fn write_summary_csv<W: Write>(rows: &[StepSummary], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.9e},{:.6e},{:.9e},{:.6},{:.9e},{:.6e},{:.9e},{:.9e},{:.6}",
            r.step,
            r.tau_bar,
            r.n_bar,
            r.accuracy,
            r.slope_local,
            r.delay_bar,
            r.accuracy_se,
            r.ci_lo,
            r.ci_hi,
            r.decided_fraction
        )?;
    }
    Ok(())
}

/// Gnuplot script drawing accuracy against phase time and delay against step
/// for the given `(label, summary csv)` curves.
pub fn accuracy_plot_script(curves: &[(String, String)], output_png: &str) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset datafile commentschars '#'\n");
    s.push_str("set datafile columnheaders\n");
    s.push_str("set terminal pngcairo size 1400,600\n");
    s.push_str(&format!("set output '{output_png}'\n"));
    s.push_str("set multiplot layout 1,2\n");
    s.push_str("set logscale xy\nset xlabel 'averaged phase accumulation time (s)'\nset ylabel 'flux accuracy / flux quantum'\n");
    let plots: Vec<String> = curves
        .iter()
        .map(|(label, csv)| format!("'{csv}' using 2:4 with linespoints title '{label}'"))
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s.push_str(
        "unset logscale\nset logscale y\nset xlabel 'step'\nset ylabel 'averaged delay (s)'\n",
    );
    let plots: Vec<String> = curves
        .iter()
        .map(|(label, csv)| format!("'{csv}' using 1:6 with linespoints title '{label}'"))
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s.push_str("unset multiplot\n");
    s
}

/// Gnuplot heat map of a calibration pattern CSV (flux rows, delay columns).
pub fn pattern_plot_script(csv: &str, output_png: &str) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset datafile commentschars '#'\n");
    s.push_str("set terminal pngcairo size 900,700\n");
    s.push_str(&format!("set output '{output_png}'\n"));
    s.push_str("set xlabel 'delay (s)'\nset ylabel 'flux / flux quantum'\nset cblabel 'P'\n");
    s.push_str("set view map\nset pm3d map corners2color c1\n");
    s.push_str(&format!(
        "splot '{csv}' matrix nonuniform using 1:2:3 with pm3d notitle\n"
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pea::Kept;
    use proptest::prelude::*;

    fn rec(step: usize, tau: f64, shots: usize, phi_hat: f64, decided: bool) -> StepRecord {
        StepRecord {
            step,
            tau,
            shots,
            kept: if decided { Kept::Lower } else { Kept::Both },
            phi_hat,
            decided,
            first: 0,
            count: 1,
        }
    }

    fn result(fluxes: Vec<f64>, m: usize, runs: Vec<Vec<StepRecord>>) -> ExperimentResult {
        let steps = runs[0].len();
        let tasks = runs
            .into_iter()
            .enumerate()
            .map(|(i, records)| TaskResult {
                flux_index: i / m,
                repetition: i % m,
                true_flux: 0.0,
                records,
            })
            .collect();
        ExperimentResult::from_tasks(fluxes, m, steps, tasks).unwrap()
    }

    #[test]
    fn phase_time_examples() {
        let r = result(
            vec![0.0],
            1,
            vec![vec![
                rec(1, 1e-6, 10, 0.0, true),
                rec(2, 2e-6, 5, 0.0, true),
            ]],
        );
        assert!((phase_accumulation_time(&r, 0, 0, 1) - 10e-6).abs() < 1e-18);
        assert!((phase_accumulation_time(&r, 0, 0, 2) - 20e-6).abs() < 1e-18);
    }

    #[test]
    fn accuracy_examples() {
        let d = 0.01;
        let r = result(
            vec![0.3],
            2,
            vec![
                vec![rec(1, 1e-6, 1, 0.3 + d, true)],
                vec![rec(1, 1e-6, 1, 0.3 + d, true)],
            ],
        );
        let a = averaged_accuracy(&r, 1).unwrap();
        assert!((a - d * 2f64.sqrt()).abs() < 1e-15);
        let exact = result(
            vec![0.3, 0.4],
            2,
            vec![
                vec![rec(1, 1e-6, 1, 0.3, true)],
                vec![rec(1, 1e-6, 1, 0.3, true)],
                vec![rec(1, 1e-6, 1, 0.4, true)],
                vec![rec(1, 1e-6, 1, 0.4, true)],
            ],
        );
        assert_eq!(averaged_accuracy(&exact, 1).unwrap(), 0.0);
        let single = result(vec![0.3], 1, vec![vec![rec(1, 1e-6, 1, 0.3, true)]]);
        assert!(matches!(
            averaged_accuracy(&single, 1),
            Err(Error::UndefinedVariance(1))
        ));
    }

    #[test]
    fn undecided_steps_carry_the_last_decided_estimate() {
        let r = result(
            vec![0.5],
            1,
            vec![vec![
                rec(1, 1e-6, 3, 0.40, true),
                rec(2, 2e-6, 9, 0.47, false),
                rec(3, 2e-6, 4, 0.52, true),
            ]],
        );
        assert_eq!(r.estimate(0, 0, 2), 0.40);
        assert_eq!(r.estimate(0, 0, 3), 0.52);
        let first_undecided = result(vec![0.5], 1, vec![vec![rec(1, 1e-6, 3, 0.45, false)]]);
        assert_eq!(
            first_undecided
                .clone()
                .with_prior_mean(0.5)
                .estimate(0, 0, 1),
            0.5
        );
        assert_eq!(first_undecided.estimate(0, 0, 1), 0.45);
    }

    #[test]
    fn two_stage_means_brute_force() {
        // unequal values per (j, k); compare against explicit nested loops
        let (f, m, l) = (3, 4, 3);
        let mut runs = Vec::new();
        for j in 0..f {
            for k in 0..m {
                runs.push(
                    (1..=l)
                        .map(|s| {
                            let tau = 1e-7 * (1 + s + j * k) as f64;
                            rec(
                                s,
                                tau,
                                1 + (j + 2 * k + s) % 5,
                                0.1 * j as f64 + 0.01 * k as f64,
                                true,
                            )
                        })
                        .collect::<Vec<_>>(),
                );
            }
        }
        let r = result(vec![0.0, 0.1, 0.2], m, runs.clone());
        for step in 1..=l {
            let mut outer = 0.0;
            let mut outer_delay = 0.0;
            for j in 0..f {
                let mut inner = 0.0;
                let mut inner_delay = 0.0;
                for k in 0..m {
                    let run = &runs[j * m + k];
                    inner += run[..step]
                        .iter()
                        .map(|x| x.tau * x.shots as f64)
                        .sum::<f64>();
                    inner_delay += run[step - 1].tau;
                }
                outer += inner / m as f64;
                outer_delay += inner_delay / m as f64;
            }
            assert!((averaged_phase_time(&r, step) - outer / f as f64).abs() < 1e-20);
            assert!((averaged_delay(&r, step) - outer_delay / f as f64).abs() < 1e-20);
        }
    }

    #[test]
    fn from_tasks_rejects_incomplete_sets() {
        let t = TaskResult {
            flux_index: 0,
            repetition: 0,
            true_flux: 0.0,
            records: vec![rec(1, 1e-6, 1, 0.0, true)],
        };
        assert!(ExperimentResult::from_tasks(vec![0.0], 2, 1, vec![t.clone()]).is_err());
        assert!(ExperimentResult::from_tasks(vec![0.0], 1, 1, vec![t.clone(), t.clone()]).is_err());
        assert!(ExperimentResult::from_tasks(vec![0.0], 1, 2, vec![t]).is_err());
    }

    #[test]
    fn scaling_examples() {
        let hl: Vec<_> = (1..8).map(|i| (i as f64, 1.0 / i as f64)).collect();
        assert!((scaling_exponent(&hl).unwrap() + 1.0).abs() < 1e-12);
        let sql: Vec<_> = (1..8)
            .map(|i| (i as f64, 1.0 / (i as f64).sqrt()))
            .collect();
        assert!((scaling_exponent(&sql).unwrap() + 0.5).abs() < 1e-12);
        assert!(scaling_exponent(&[(1.0, 1.0)]).is_err());
        assert!(scaling_exponent(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
        assert!(scaling_exponent(&[(2.0, 1.0), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn interpolation() {
        let pts = [(1.0, 1.0), (4.0, 0.25), (16.0, 0.1)];
        assert!((loglog_interpolate(&pts, 2.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(loglog_interpolate(&pts, 0.5), None);
        assert_eq!(loglog_interpolate(&pts, 17.0), None);
    }

    #[test]
    fn summary_csv_layout() {
        let r = result(
            vec![0.3],
            2,
            vec![
                vec![rec(1, 1e-6, 3, 0.31, true), rec(2, 2e-6, 3, 0.305, true)],
                vec![rec(1, 1e-6, 5, 0.29, true), rec(2, 2e-6, 2, 0.298, true)],
            ],
        );
        let rows = summarize(&r, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].ci_lo <= rows[0].accuracy && rows[0].accuracy <= rows[0].ci_hi);
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert!(lines[1].starts_with("1,4.000000000e-6,"));
        assert_eq!(lines.len(), 3);
    }

    proptest! {
        #[test]
        fn accuracy_is_invariant_under_repetition_order(
            devs in proptest::collection::vec(-0.1f64..0.1, 6),
            shift in 0usize..6,
        ) {
            let build = |d: &[f64]| {
                let runs = d.iter().map(|x| vec![rec(1, 1e-6, 1, 0.5 + x, true)]).collect();
                result(vec![0.5, 0.5], 3, runs)
            };
            let mut rotated = devs.clone();
            rotated[..3].rotate_left(shift % 3);
            rotated[3..].rotate_left(shift % 3);
            let a = averaged_accuracy(&build(&devs), 1).unwrap();
            let b = averaged_accuracy(&build(&rotated), 1).unwrap();
            prop_assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
        }

        #[test]
        fn scaling_recovers_power_laws(p in -2.0f64..2.0, c in 0.01f64..100.0) {
            let pts: Vec<_> = (1..10).map(|i| (i as f64 * 1e-6, c * (i as f64 * 1e-6).powf(p))).collect();
            prop_assert!((scaling_exponent(&pts).unwrap() - p).abs() < 1e-9);
        }
    }
}
