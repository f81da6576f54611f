//! Least-squares fit of a damped cosine `c + a e^(-g t) cos(w t + p)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampedCosine {
    pub offset: f64,
    pub amplitude: f64,
    pub decay_rate: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl DampedCosine {
    pub fn eval(&self, t: f64) -> f64 {
        self.offset
            + self.amplitude
                * (-self.decay_rate * t).exp()
                * (self.frequency * t + self.phase).cos()
    }

    fn from_params(p: &DVector<f64>) -> Self {
        DampedCosine {
            offset: p[0],
            amplitude: p[1],
            decay_rate: p[2],
            frequency: p[3],
            phase: p[4],
        }
    }

    /// Residual sum of squares against samples.
    pub fn sse(&self, t: &[f64], y: &[f64]) -> f64 {
        t.iter()
            .zip(y)
            .map(|(t, y)| (self.eval(*t) - y).powi(2))
            .sum()
    }
}

fn jacobian_row(p: &DVector<f64>, t: f64) -> [f64; 5] {
    let env = (-p[2] * t).exp();
    let arg = p[3] * t + p[4];
    let (s, c) = arg.sin_cos();
    [
        1.0,
        env * c,
        -t * p[1] * env * c,
        -t * p[1] * env * s,
        -p[1] * env * s,
    ]
}

fn levenberg_marquardt(t: &[f64], y: &[f64], start: DampedCosine) -> DampedCosine {
    let mut p = DVector::from_vec(vec![
        start.offset,
        start.amplitude,
        start.decay_rate,
        start.frequency,
        start.phase,
    ]);
    let mut cost = DampedCosine::from_params(&p).sse(t, y);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let model = DampedCosine::from_params(&p);
        let mut jtj = DMatrix::<f64>::zeros(5, 5);
        let mut jtr = DVector::<f64>::zeros(5);
        for (&ti, &yi) in t.iter().zip(y) {
            let row = jacobian_row(&p, ti);
            let r = yi - model.eval(ti);
            for a in 0..5 {
                jtr[a] += row[a] * r;
                for b in 0..5 {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for a in 0..5 {
                damped[(a, a)] += lambda * jtj[(a, a)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let trial_cost = DampedCosine::from_params(&trial).sse(t, y);
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost.max(1e-300);
                p = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    DampedCosine::from_params(&p)
}

/// Fit equally weighted samples. The frequency guess comes from the number
/// of crossings of the sample mean; several phase and decay guesses are
/// refined and the best fit is kept.
pub fn fit_damped_cosine(t: &[f64], y: &[f64]) -> Result<DampedCosine> {
    if t.len() != y.len() || t.len() < 6 {
        return Err(Error::InvalidConfig(format!(
            "damped-cosine fit needs at least 6 paired samples, got {} and {}",
            t.len(),
            y.len()
        )));
    }
    let span = t[t.len() - 1] - t[0];
    if !(span > 0.0) {
        return Err(Error::InvalidConfig("fit abscissae must increase".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let crossings = y
        .windows(2)
        .filter(|w| (w[0] - mean) * (w[1] - mean) < 0.0)
        .count();
    let omega = std::f64::consts::PI * crossings.max(1) as f64 / span;
    let mut best: Option<(f64, DampedCosine)> = None;
    for g in [0.0, 1.0 / span, 3.0 / span] {
        for k in 0..8 {
            let start = DampedCosine {
                offset: mean,
                amplitude: 0.5 * (hi - lo),
                decay_rate: g,
                frequency: omega,
                phase: std::f64::consts::PI * k as f64 / 4.0 - t[0] * omega,
            };
            let fit = levenberg_marquardt(t, y, start);
            let cost = fit.sse(t, y);
            if cost.is_finite() && best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, fit));
            }
        }
    }
    let (_, mut fit) = best.ok_or_else(|| Error::InvalidConfig("fit diverged".into()))?;
    if fit.amplitude < 0.0 {
        fit.amplitude = -fit.amplitude;
        fit.phase += std::f64::consts::PI;
    }
    if fit.frequency < 0.0 {
        fit.frequency = -fit.frequency;
        fit.phase = -fit.phase;
    }
    fit.phase = fit.phase.rem_euclid(2.0 * std::f64::consts::PI);
    Ok(fit)
}
