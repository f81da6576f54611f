//! Single-shot readout as a two-component Gaussian mixture.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Normal outcome distributions for the two qubit states, in units where
/// the default state separation `mu1 - mu0` is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutModel {
    pub mu0: f64,
    pub mu1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
}

impl Default for ReadoutModel {
    fn default() -> Self {
        ReadoutModel {
            mu0: 0.0,
            mu1: 1.0,
            sigma0: 1.5,
            sigma1: 1.5,
        }
    }
}

fn ln_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

impl ReadoutModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma1 > 0.0) {
            return Err(Error::InvalidConfig("readout widths must be > 0".into()));
        }
        if !(self.mu0.is_finite() && self.mu1.is_finite()) || self.mu0 == self.mu1 {
            return Err(Error::InvalidConfig(
                "readout means must be finite and distinct".into(),
            ));
        }
        Ok(())
    }

    /// Log densities `(ln N(x; mu0, sigma0), ln N(x; mu1, sigma1))`.
    pub fn component_ln_densities(&self, x: f64) -> (f64, f64) {
        (
            ln_normal(x, self.mu0, self.sigma0),
            ln_normal(x, self.mu1, self.sigma1),
        )
    }

    /// Component densities rescaled so the larger one is 1. Mixture
    /// likelihoods built from these differ from the true ones by a factor
    /// shared across all candidates.
    pub fn relative_densities(&self, x: f64) -> (f64, f64) {
        let (l0, l1) = self.component_ln_densities(x);
        let top = l0.max(l1);
        ((l0 - top).exp(), (l1 - top).exp())
    }
}

/// Counter-based random stream for task `(j, k)` under a root seed.
///
/// The ChaCha key comes from the root seed and the stream id from the task
/// label, so every task's sequence is fixed regardless of scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    flux_index: u32,
    repetition: u32,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, flux_index: u32, repetition: u32) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(((flux_index as u64) << 32) | repetition as u64);
        RngStream {
            seed,
            flux_index,
            repetition,
            rng,
        }
    }

    pub fn label(&self) -> (u64, u32, u32) {
        (self.seed, self.flux_index, self.repetition)
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draw one readout outcome for excited-state probability `p1`.
pub fn sample_shot(p1: f64, readout: &ReadoutModel, rng: &mut RngStream) -> f64 {
    let excited = rng.uniform() < p1;
    let z = rng.standard_normal();
    if excited {
        readout.mu1 + readout.sigma1 * z
    } else {
        readout.mu0 + readout.sigma0 * z
    }
}

/// `ln[p1 N(x; mu1, sigma1) + (1 - p1) N(x; mu0, sigma0)]`.
pub fn shot_loglikelihood(x: f64, p1: f64, readout: &ReadoutModel) -> f64 {
    let (l0, l1) = readout.component_ln_densities(x);
    let top = l0.max(l1);
    let mix = p1 * (l1 - top).exp() + (1.0 - p1) * (l0 - top).exp();
    top + mix.ln()
}
