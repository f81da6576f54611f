//! Dense density-matrix simulation of the entangle, evolve, project sequence.
//!
//! Basis states are indexed with qubit 1 as the most significant bit, so
//! `|q1 q2 ... qN>` has index `sum q_i 2^(N - i)`. The free Hamiltonian is
//! `sum_i dw_i sigma_z^(i) / 2` with `sigma_z = diag(1, -1)`, which gives
//! `rho_10(t) = rho_10(0) e^(+i dw t)` for a single qubit.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SensorConfig;

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Default register size limit (dimension 8).
pub const DEFAULT_QUBIT_CAP: usize = 3;
pub const DEFAULT_TOL: f64 = 1e-8;

pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    data: CMatrix,
}

impl DensityMatrix {
    /// `|0...0><0...0|`.
    pub fn ground(n_qubits: usize) -> Self {
        let d = 1 << n_qubits;
        let mut data = CMatrix::zeros(d, d);
        data[(0, 0)] = ONE;
        DensityMatrix { n_qubits, data }
    }

    /// `|psi><psi|` for a normalised amplitude vector of length `2^n`.
    pub fn from_pure(n_qubits: usize, amplitudes: &[Complex64]) -> Result<Self> {
        let d = 1 << n_qubits;
        if amplitudes.len() != d {
            return Err(Error::InvalidConfig(format!(
                "{} amplitudes for dimension {d}",
                amplitudes.len()
            )));
        }
        let data = CMatrix::from_fn(d, d, |r, c| amplitudes[r] * amplitudes[c].conj());
        Ok(DensityMatrix { n_qubits, data })
    }

    pub fn from_matrix(n_qubits: usize, data: CMatrix) -> Result<Self> {
        let d = 1 << n_qubits;
        if data.nrows() != d || data.ncols() != d {
            return Err(Error::InvalidConfig(format!(
                "matrix {}x{} for dimension {d}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(DensityMatrix { n_qubits, data })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[(row, col)]
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn trace(&self) -> Complex64 {
        self.data.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for r in 0..d {
            for c in r..d {
                worst = worst.max((self.data[(r, c)] - self.data[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.data + self.data.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Check Hermiticity, unit trace and positivity.
    pub fn validate(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > HERMITICITY_TOL {
            return Err(Error::Integrator(format!("hermiticity error {herm:e}")));
        }
        let tr = self.trace();
        if (tr - ONE).norm() > TRACE_TOL {
            return Err(Error::Integrator(format!("trace {tr}")));
        }
        let eig = self.min_eigenvalue();
        if eig < -POSITIVITY_TOL {
            return Err(Error::Integrator(format!("negative eigenvalue {eig:e}")));
        }
        Ok(())
    }

    /// Computational-basis populations.
    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.data[(i, i)].re).collect()
    }

    /// Rows `row,col,re,im`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "row,col,re,im")?;
        for r in 0..self.dim() {
            for c in 0..self.dim() {
                let z = self.data[(r, c)];
                writeln!(out, "{r},{c},{:.17e},{:.17e}", z.re, z.im)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Instantaneous gate; qubit indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateOp {
    /// `exp(-i angle sigma_axis / 2)` on `target`.
    Rotation {
        target: usize,
        axis: Axis,
        angle: f64,
    },
    /// Sign flip of the basis states with `(first, second) = (i, j)`.
    ConditionalPhase {
        first: usize,
        second: usize,
        i: u8,
        j: u8,
    },
}

impl GateOp {
    pub fn ry(target: usize, angle: f64) -> Self {
        GateOp::Rotation {
            target,
            axis: Axis::Y,
            angle,
        }
    }

    pub fn cp(first: usize, second: usize, i: u8, j: u8) -> Self {
        GateOp::ConditionalPhase {
            first,
            second,
            i,
            j,
        }
    }

    fn check(&self, n_qubits: usize) -> Result<()> {
        let bad = |index| Err(Error::QubitIndex { index, n_qubits });
        match *self {
            GateOp::Rotation { target, .. } if target >= n_qubits => bad(target),
            GateOp::ConditionalPhase { first, .. } if first >= n_qubits => bad(first),
            GateOp::ConditionalPhase { second, .. } if second >= n_qubits => bad(second),
            GateOp::ConditionalPhase { first, second, .. } if first == second => Err(
                Error::InvalidConfig(format!("conditional phase on a single qubit {first}")),
            ),
            GateOp::ConditionalPhase { i, j, .. } if i > 1 || j > 1 => Err(Error::InvalidConfig(
                "conditional-phase pattern bits must be 0 or 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Full `2^n x 2^n` unitary.
    pub fn unitary(&self, n_qubits: usize) -> Result<CMatrix> {
        self.check(n_qubits)?;
        let d = 1 << n_qubits;
        let bit = |state: usize, q: usize| (state >> (n_qubits - 1 - q)) & 1;
        Ok(match *self {
            GateOp::Rotation {
                target,
                axis,
                angle,
            } => {
                let u = single_qubit(axis, angle);
                CMatrix::from_fn(d, d, |r, c| {
                    let mask = 1 << (n_qubits - 1 - target);
                    if r & !mask != c & !mask {
                        ZERO
                    } else {
                        u[(bit(r, target), bit(c, target))]
                    }
                })
            }
            GateOp::ConditionalPhase {
                first,
                second,
                i,
                j,
            } => CMatrix::from_fn(d, d, |r, c| {
                if r != c {
                    ZERO
                } else if bit(r, first) == i as usize && bit(r, second) == j as usize {
                    -ONE
                } else {
                    ONE
                }
            }),
        })
    }
}

fn single_qubit(axis: Axis, angle: f64) -> nalgebra::Matrix2<Complex64> {
    let (c, s) = ((0.5 * angle).cos(), (0.5 * angle).sin());
    let re = |x: f64| Complex64::new(x, 0.0);
    let im = |x: f64| Complex64::new(0.0, x);
    match axis {
        Axis::X => nalgebra::Matrix2::new(re(c), im(-s), im(-s), re(c)),
        Axis::Y => nalgebra::Matrix2::new(re(c), re(-s), re(s), re(c)),
        Axis::Z => nalgebra::Matrix2::new(
            Complex64::from_polar(1.0, -0.5 * angle),
            ZERO,
            ZERO,
            Complex64::from_polar(1.0, 0.5 * angle),
        ),
    }
}

/// `rho' = U rho U^dagger`.
pub fn apply_gate(rho: &DensityMatrix, gate: &GateOp) -> Result<DensityMatrix> {
    let u = gate.unitary(rho.n_qubits)?;
    Ok(DensityMatrix {
        n_qubits: rho.n_qubits,
        data: &u * &rho.data * u.adjoint(),
    })
}

/// Per-qubit detunings (rad/s) and decoherence rates (1/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LindbladSpec {
    pub detunings: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma_phi: Vec<f64>,
}

impl LindbladSpec {
    pub fn uniform(n_qubits: usize, detuning: f64, gamma1: f64, gamma_phi: f64) -> Self {
        LindbladSpec {
            detunings: vec![detuning; n_qubits],
            gamma1: vec![gamma1; n_qubits],
            gamma_phi: vec![gamma_phi; n_qubits],
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.detunings.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_qubits();
        if self.gamma1.len() != n || self.gamma_phi.len() != n {
            return Err(Error::InvalidConfig(
                "per-qubit rate lists differ in length".into(),
            ));
        }
        if self
            .gamma1
            .iter()
            .chain(&self.gamma_phi)
            .any(|r| !(*r >= 0.0 && r.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "decoherence rates must be finite and >= 0".into(),
            ));
        }
        if self.detunings.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidConfig("detunings must be finite".into()));
        }
        Ok(())
    }

    /// Largest rate in the generator, used to pick the first step count.
    fn frequency_scale(&self) -> f64 {
        let h: f64 = self.detunings.iter().map(|d| d.abs()).sum();
        let g: f64 = self.gamma1.iter().chain(&self.gamma_phi).sum();
        h + g
    }
}

/// `drho/dt = K rho + rho K^dagger + sum_c c rho c^dagger`, with
/// `K = -i H - (1/2) sum_c c^dagger c`, as a superoperator on the
/// column-stacked `vec(rho)`.
///
/// For this linear, time-independent generator one RK4 step of size `h`
/// is exactly `vec(rho) -> P(h L) vec(rho)` with `P` the degree-4 Taylor
/// polynomial, so `n` fixed steps are `P(h L)^n`, formed by squaring.
struct Generator {
    dim: usize,
    superop: CMatrix,
    cache: Vec<Refinement>,
}

impl Generator {
    fn new(spec: &LindbladSpec) -> Self {
        let n = spec.n_qubits();
        let d = 1 << n;
        let bit = |state: usize, q: usize| (state >> (n - 1 - q)) & 1;
        let mut k = CMatrix::zeros(d, d);
        for s in 0..d {
            let energy: f64 = (0..n)
                .map(|q| {
                    let z = if bit(s, q) == 0 { 1.0 } else { -1.0 };
                    0.5 * spec.detunings[q] * z
                })
                .sum();
            k[(s, s)] = Complex64::new(0.0, -energy);
        }
        let mut jumps = Vec::new();
        for q in 0..n {
            let mask = 1 << (n - 1 - q);
            if spec.gamma1[q] > 0.0 {
                // lowering operator |1> -> |0> on qubit q
                let amp = Complex64::new(spec.gamma1[q].sqrt(), 0.0);
                let c = CMatrix::from_fn(d, d, |r, col| {
                    if bit(col, q) == 1 && r == col & !mask {
                        amp
                    } else {
                        ZERO
                    }
                });
                jumps.push(c);
            }
            if spec.gamma_phi[q] > 0.0 {
                let amp = (0.5 * spec.gamma_phi[q]).sqrt();
                let c = CMatrix::from_fn(d, d, |r, col| {
                    if r != col {
                        ZERO
                    } else if bit(r, q) == 0 {
                        Complex64::new(amp, 0.0)
                    } else {
                        Complex64::new(-amp, 0.0)
                    }
                });
                jumps.push(c);
            }
        }
        for c in &jumps {
            k -= c.adjoint() * c * Complex64::new(0.5, 0.0);
        }
        // vec(A X B) = (B^T kron A) vec(X)
        let id = CMatrix::identity(d, d);
        let mut superop = id.kronecker(&k) + k.conjugate().kronecker(&id);
        for c in &jumps {
            superop += c.conjugate().kronecker(c);
        }
        Generator {
            dim: d,
            superop,
            cache: Vec::new(),
        }
    }

    /// `P(h L)^steps`.
    fn rk4_propagator(&self, h: f64, steps: usize) -> CMatrix {
        let m = &self.superop * Complex64::new(h, 0.0);
        let size = m.nrows();
        let mut step = CMatrix::identity(size, size);
        let mut term = CMatrix::identity(size, size);
        for order in 1..=4 {
            term = &term * &m * Complex64::new(1.0 / order as f64, 0.0);
            step += &term;
        }
        let mut result = CMatrix::identity(size, size);
        let mut base = step;
        let mut e = steps;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        result
    }

    /// `rho` evolved over `dt`. The step count doubles until the two finest
    /// propagators move every entry of this state by less than `tol`; the
    /// propagator pair is kept for later states with the same `dt`.
    fn integrate(&mut self, rho: &CMatrix, dt: f64, scale: f64, tol: f64) -> Result<CMatrix> {
        if dt == 0.0 {
            return Ok(rho.clone());
        }
        let d = self.dim;
        let key = dt.to_bits();
        let i = match self.cache.iter().position(|r| r.key == key) {
            Some(i) => i,
            None => {
                let steps = ((dt * scale / 0.5).ceil() as usize).max(1);
                let coarse = self.rk4_propagator(dt / steps as f64, steps);
                let fine = self.rk4_propagator(dt / (2 * steps) as f64, 2 * steps);
                self.cache.push(Refinement {
                    key,
                    steps: 2 * steps,
                    coarse,
                    fine,
                });
                self.cache.len() - 1
            }
        };
        let v = DVector::from_column_slice(rho.as_slice());
        loop {
            let r = &self.cache[i];
            let fine = &r.fine * &v;
            let change = (&r.coarse * &v - &fine)
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            if change < tol {
                return Ok(CMatrix::from_column_slice(d, d, fine.as_slice()));
            }
            let steps = 2 * r.steps;
            if steps > MAX_STEPS {
                return Err(Error::Integrator(format!(
                    "no convergence to {tol:e} with {steps} steps over {dt:e} s"
                )));
            }
            let finer = self.rk4_propagator(dt / steps as f64, steps);
            let r = &mut self.cache[i];
            r.coarse = std::mem::replace(&mut r.fine, finer);
            r.steps = steps;
        }
    }
}

/// RK4 propagators over one interval with `steps / 2` and `steps` steps.
struct Refinement {
    /// Bit pattern of the interval length.
    key: u64,
    steps: usize,
    coarse: CMatrix,
    fine: CMatrix,
}

const MAX_STEPS: usize = 1 << 32;

/// Free evolution over `tau` with fixed-step RK4 and step halving.
///
/// Trace and Hermiticity are not re-imposed; each Taylor term of a
/// trace-preserving generator is traceless, so RK4 keeps both up to rounding.
pub fn evolve(
    rho: &DensityMatrix,
    spec: &LindbladSpec,
    tau: f64,
    tol: f64,
) -> Result<DensityMatrix> {
    Ok(evolve_times(rho, spec, &[tau], tol)?
        .pop()
        .expect("one time"))
}

/// States at each of the non-decreasing `times`, integrating once from 0.
pub fn evolve_times(
    rho: &DensityMatrix,
    spec: &LindbladSpec,
    times: &[f64],
    tol: f64,
) -> Result<Vec<DensityMatrix>> {
    spec.validate()?;
    if spec.n_qubits() != rho.n_qubits {
        return Err(Error::InvalidConfig(format!(
            "Lindblad spec for {} qubits applied to {} qubits",
            spec.n_qubits(),
            rho.n_qubits
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(
            "integrator tolerance must be > 0".into(),
        ));
    }
    let mut gen = Generator::new(spec);
    let scale = spec.frequency_scale();
    let mut current = rho.data.clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        if !(target >= t && target.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "evolution times must be finite, >= 0 and non-decreasing (got {target} after {t})"
            )));
        }
        current = gen.integrate(&current, target - t, scale, tol)?;
        t = target;
        out.push(DensityMatrix {
            n_qubits: rho.n_qubits,
            data: current.clone(),
        });
    }
    Ok(out)
}

/// CNOT from `control` to `target` built from y rotations and `CP_10`.
fn controlled_not(control: usize, target: usize) -> [GateOp; 3] {
    let q = std::f64::consts::FRAC_PI_2;
    [
        GateOp::ry(target, q),
        GateOp::cp(control, target, 1, 0),
        GateOp::ry(target, -q),
    ]
}

/// Gates taking `|0...0>` to `(|0...0> + |1...1>) / sqrt 2`.
pub fn entangler(n_qubits: usize) -> Vec<GateOp> {
    let q = std::f64::consts::FRAC_PI_2;
    let mut gates = vec![GateOp::ry(0, q)];
    if n_qubits == 1 {
        return gates;
    }
    for i in 0..n_qubits - 1 {
        gates.extend(controlled_not(i, i + 1));
    }
    gates
}

/// Gates mapping `(|0...0> + e^(i phi) |1...1>) / sqrt 2` to
/// `((-1 + e^(i phi)) |0> + (-1 - e^(i phi)) |1>) / 2 (x) |0...0>`.
pub fn projector(n_qubits: usize) -> Vec<GateOp> {
    let q = std::f64::consts::FRAC_PI_2;
    if n_qubits == 1 {
        return vec![GateOp::ry(0, q)];
    }
    let mut gates = Vec::new();
    for i in (1..n_qubits - 1).rev() {
        gates.extend(controlled_not(i, i + 1));
    }
    gates.extend([
        GateOp::ry(1, q),
        GateOp::cp(0, 1, 0, 0),
        GateOp::ry(1, q),
        GateOp::ry(0, q),
    ]);
    gates
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineOptions {
    pub qubit_cap: usize,
    pub tol: f64,
    /// Duration of each gate, s; the register evolves under the full
    /// Lindblad generator for this long after every gate. Zero disables it.
    pub gate_time: f64,
    /// Added to the angle of the first entangler rotation (negative control).
    pub angle_error: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            qubit_cap: DEFAULT_QUBIT_CAP,
            tol: DEFAULT_TOL,
            gate_time: 0.0,
            angle_error: 0.0,
        }
    }
}

/// The per-qubit Lindblad spec realised by a sensor at `flux`.
pub fn sensor_lindblad(config: &SensorConfig, flux: f64) -> Result<LindbladSpec> {
    let dw = config.detuning(flux)?;
    Ok(LindbladSpec::uniform(
        config.n_qubits,
        dw,
        config.gamma1,
        config.gamma_phi,
    ))
}

fn run_gates(
    mut rho: DensityMatrix,
    gates: &[GateOp],
    spec: &LindbladSpec,
    options: &EngineOptions,
) -> Result<DensityMatrix> {
    for g in gates {
        rho = apply_gate(&rho, g)?;
        if options.gate_time > 0.0 {
            rho = evolve(&rho, spec, options.gate_time, options.tol)?;
        }
    }
    Ok(rho)
}

fn corrupted_entangler(n_qubits: usize, options: &EngineOptions) -> Vec<GateOp> {
    let mut gates = entangler(n_qubits);
    if let GateOp::Rotation { angle, .. } = &mut gates[0] {
        *angle += options.angle_error;
    }
    gates
}

fn check_cap(n_qubits: usize, options: &EngineOptions) -> Result<()> {
    if n_qubits == 0 {
        return Err(Error::InvalidConfig("n_qubits must be >= 1".into()));
    }
    if n_qubits > options.qubit_cap {
        return Err(Error::EngineCap {
            n_qubits,
            cap: options.qubit_cap,
        });
    }
    Ok(())
}

/// Register states after entangling, evolving to each of `taus` and projecting.
pub fn projected_states(
    config: &SensorConfig,
    flux: f64,
    taus: &[f64],
    options: &EngineOptions,
) -> Result<Vec<DensityMatrix>> {
    check_cap(config.n_qubits, options)?;
    let spec = sensor_lindblad(config, flux)?;
    let n = config.n_qubits;
    let entangled = run_gates(
        DensityMatrix::ground(n),
        &corrupted_entangler(n, options),
        &spec,
        options,
    )?;
    let project = projector(n);
    evolve_times(&entangled, &spec, taus, options.tol)?
        .into_iter()
        .map(|rho| run_gates(rho, &project, &spec, options))
        .collect()
}

/// Index of `|1 0 ... 0>`.
fn readout_index(n_qubits: usize) -> usize {
    1 << (n_qubits - 1)
}

/// `[P00, P01, P10, P11]` of the two-qubit sequence at each delay.
pub fn sequence_fig2a_series(
    config: &SensorConfig,
    flux: f64,
    taus: &[f64],
    options: &EngineOptions,
) -> Result<Vec<[f64; 4]>> {
    if config.n_qubits != 2 {
        return Err(Error::InvalidConfig(format!(
            "two-qubit sequence needs n_qubits = 2, got {}",
            config.n_qubits
        )));
    }
    Ok(projected_states(config, flux, taus, options)?
        .iter()
        .map(|rho| {
            let p = rho.probabilities();
            [p[0], p[1], p[2], p[3]]
        })
        .collect())
}

pub fn sequence_fig2a(config: &SensorConfig, flux: f64, tau: f64) -> Result<[f64; 4]> {
    Ok(sequence_fig2a_series(config, flux, &[tau], &EngineOptions::default())?[0])
}

/// Engine probability of `|10...0>` at each delay.
pub fn ghz_projected_series(
    config: &SensorConfig,
    flux: f64,
    taus: &[f64],
    options: &EngineOptions,
) -> Result<Vec<f64>> {
    let idx = readout_index(config.n_qubits.max(1));
    Ok(projected_states(config, flux, taus, options)?
        .iter()
        .map(|rho| rho.get(idx, idx).re)
        .collect())
}

pub fn ghz_projected_pattern(config: &SensorConfig, flux: f64, tau: f64) -> Result<f64> {
    Ok(ghz_projected_series(config, flux, &[tau], &EngineOptions::default())?[0])
}

/// Overlap with `(|0...0> + e^(i theta) |1...1>) / sqrt 2`, maximised over `theta`.
pub fn ghz_fidelity(rho: &DensityMatrix) -> f64 {
    let last = rho.dim() - 1;
    0.5 * (rho.get(0, 0).re + rho.get(last, last).re) + rho.get(0, last).norm()
}

/// Fidelity of the (possibly corrupted) entangler output with rates zero.
pub fn entangler_fidelity(n_qubits: usize, options: &EngineOptions) -> Result<f64> {
    check_cap(n_qubits, options)?;
    let mut rho = DensityMatrix::ground(n_qubits);
    for g in corrupted_entangler(n_qubits, options) {
        rho = apply_gate(&rho, &g)?;
    }
    Ok(ghz_fidelity(&rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DetuningModel;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sensor(n: usize, gamma1: f64, gamma_phi: f64) -> SensorConfig {
        SensorConfig {
            n_qubits: n,
            gamma1,
            gamma_phi,
            alpha: 1.0,
            detuning: DetuningModel::Linear {
                slope: 2.0 * PI * 1e9,
                operating_flux: 0.25,
                offset: 0.0,
            },
            tau_min: 25e-9,
            window_offset: 0,
        }
    }

    fn close(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
        (a - b).iter().all(|z| z.norm() < tol)
    }

    #[test]
    fn cp10_examples() {
        let pop = DensityMatrix::from_pure(2, &[ZERO, ZERO, ONE, ZERO]).unwrap();
        let out = apply_gate(&pop, &GateOp::cp(0, 1, 1, 0)).unwrap();
        assert!(close(out.matrix(), pop.matrix(), 1e-15));

        let s = FRAC_1_SQRT_2;
        let plus = DensityMatrix::from_pure(2, &[c(s, 0.0), ZERO, c(s, 0.0), ZERO]).unwrap();
        let minus = DensityMatrix::from_pure(2, &[c(s, 0.0), ZERO, c(-s, 0.0), ZERO]).unwrap();
        let out = apply_gate(&plus, &GateOp::cp(0, 1, 1, 0)).unwrap();
        assert!(close(out.matrix(), minus.matrix(), 1e-15));
    }

    #[test]
    fn ry_pi_flips_ground_state() {
        let out = apply_gate(&DensityMatrix::ground(1), &GateOp::ry(0, PI)).unwrap();
        let one = DensityMatrix::from_pure(1, &[ZERO, ONE]).unwrap();
        assert!(close(out.matrix(), one.matrix(), 1e-15));
    }

    #[test]
    fn gates_are_unitary() {
        let mut gates = vec![GateOp::cp(2, 0, 0, 1), GateOp::cp(1, 2, 1, 1)];
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            for q in 0..3 {
                gates.push(GateOp::Rotation {
                    target: q,
                    axis,
                    angle: 0.7 + q as f64,
                });
            }
        }
        for g in gates {
            let u = g.unitary(3).unwrap();
            assert!(
                close(&(u.adjoint() * &u), &CMatrix::identity(8, 8), 1e-12),
                "{g:?}"
            );
        }
    }

    #[test]
    fn index_errors() {
        let rho = DensityMatrix::ground(2);
        assert!(matches!(
            apply_gate(&rho, &GateOp::ry(2, 1.0)),
            Err(Error::QubitIndex {
                index: 2,
                n_qubits: 2
            })
        ));
        assert!(apply_gate(&rho, &GateOp::cp(0, 3, 1, 1)).is_err());
        assert!(apply_gate(&rho, &GateOp::cp(1, 1, 1, 1)).is_err());
    }

    fn plus_state() -> DensityMatrix {
        let mut m = CMatrix::from_element(2, 2, c(0.5, 0.0));
        m[(0, 1)] = c(0.5, 0.0);
        DensityMatrix::from_matrix(1, m).unwrap()
    }

    #[test]
    fn pure_dephasing_analytic() {
        let g = 0.034e6;
        let spec = LindbladSpec::uniform(1, 0.0, 0.0, g);
        let taus = [1e-6, 5e-6, 20e-6];
        let out = evolve_times(&plus_state(), &spec, &taus, 1e-10).unwrap();
        for (t, rho) in taus.iter().zip(&out) {
            let expect = 0.5 * (-g * t).exp();
            assert!((rho.get(0, 1) - c(expect, 0.0)).norm() < 1e-9);
            assert!((rho.get(0, 0).re - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxation_analytic() {
        let g = 0.2e6;
        let spec = LindbladSpec::uniform(1, 0.0, g, 0.0);
        let excited = DensityMatrix::from_pure(1, &[ZERO, ONE]).unwrap();
        for t in [0.5e-6, 3e-6, 10e-6] {
            let rho = evolve(&excited, &spec, t, 1e-10).unwrap();
            assert!((rho.get(1, 1).re - (-g * t).exp()).abs() < 1e-9);
            rho.validate().unwrap();
        }
    }

    #[test]
    fn free_evolution_phase_convention() {
        let dw = 2.0 * PI * 3e6;
        let spec = LindbladSpec::uniform(1, dw, 0.0, 0.0);
        for t in [0.1e-6, 0.37e-6, 1e-6] {
            let rho = evolve(&plus_state(), &spec, t, 1e-10).unwrap();
            let expect = Complex64::from_polar(0.5, dw * t);
            assert!((rho.get(1, 0) - expect).norm() < 1e-8);
            assert!((rho.get(0, 1) - expect.conj()).norm() < 1e-8);
        }
    }

    #[test]
    fn entangler_reaches_bell_state_and_projector_matches_amplitudes() {
        for n in 1..=3 {
            let mut psi = vec![ZERO; 1 << n];
            psi[0] = ONE;
            let mut rho = DensityMatrix::ground(n);
            for g in entangler(n) {
                rho = apply_gate(&rho, &g).unwrap();
            }
            if n > 1 {
                let s = FRAC_1_SQRT_2;
                let mut target = vec![ZERO; 1 << n];
                target[0] = c(s, 0.0);
                target[(1 << n) - 1] = c(s, 0.0);
                let bell = DensityMatrix::from_pure(n, &target).unwrap();
                assert!(close(rho.matrix(), bell.matrix(), 1e-14));
                assert!(ghz_fidelity(&rho) > 1.0 - 1e-12);
            }

            // amplitudes of the projected phase-rotated state
            let phi: f64 = 0.83;
            let e = Complex64::from_polar(1.0, phi);
            let s = FRAC_1_SQRT_2;
            let mut amps = vec![ZERO; 1 << n];
            amps[0] = c(s, 0.0);
            amps[(1 << n) - 1] = e * s;
            let mut state = nalgebra::DVector::from_vec(amps);
            for g in projector(n) {
                state = g.unitary(n).unwrap() * state;
            }
            if n > 1 {
                let top = 1 << (n - 1);
                assert!((state[0] - (e - 1.0) * 0.5).norm() < 1e-14);
                assert!((state[top] - (-e - 1.0) * 0.5).norm() < 1e-14);
                let rest: f64 = (0..1 << n)
                    .filter(|&i| i != 0 && i != top)
                    .map(|i| state[i].norm_sqr())
                    .sum();
                assert!(rest < 1e-28);
            }
        }
    }

    #[test]
    fn two_qubit_sequence_without_decay() {
        let s = sensor(2, 0.0, 0.0);
        let flux = s.flux_window().unwrap().0 + 0.0011;
        let dw = s.detuning(flux).unwrap();
        let p = sequence_fig2a(&s, flux, 0.0).unwrap();
        assert!((p[2] - 1.0).abs() < 1e-12);
        let taus: Vec<f64> = (0..40).map(|i| i as f64 * 3.1e-9).collect();
        let series = sequence_fig2a_series(&s, flux, &taus, &EngineOptions::default()).unwrap();
        for (t, p) in taus.iter().zip(&series) {
            let expect = 0.5 * (1.0 + (2.0 * dw * t).cos());
            assert!((p[2] - expect).abs() < 1e-7, "{t}: {} vs {expect}", p[2]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn three_qubit_pattern_without_decay() {
        let s = sensor(3, 0.0, 0.0);
        let flux = s.flux_window().unwrap().0 + 0.0004;
        let dw = s.detuning(flux).unwrap();
        let taus: Vec<f64> = (0..30).map(|i| i as f64 * 2.3e-9).collect();
        let series = ghz_projected_series(&s, flux, &taus, &EngineOptions::default()).unwrap();
        for (t, p) in taus.iter().zip(&series) {
            assert!((p - 0.5 * (1.0 + (3.0 * dw * t).cos())).abs() < 1e-7);
        }
        let four = sensor(4, 0.0, 0.0);
        assert!(matches!(
            ghz_projected_pattern(&four, 0.251, 1e-8),
            Err(Error::EngineCap {
                n_qubits: 4,
                cap: 3
            })
        ));
    }

    #[test]
    fn single_qubit_engine_equals_closed_form_with_decay() {
        let s = sensor(1, 0.2e6, 0.034e6);
        let flux = s.flux_window().unwrap().0 + 0.0005;
        let dw = s.detuning(flux).unwrap();
        let taus: Vec<f64> = (0..20).map(|i| i as f64 * 0.41e-6).collect();
        let series = ghz_projected_series(&s, flux, &taus, &EngineOptions::default()).unwrap();
        for (t, p) in taus.iter().zip(&series) {
            assert!((p - s.ramsey_probability(dw, *t)).abs() < 1e-7);
        }
    }

    #[test]
    fn corrupted_rotation_lowers_fidelity() {
        let opts = EngineOptions {
            angle_error: 0.1,
            ..EngineOptions::default()
        };
        let f = entangler_fidelity(2, &opts).unwrap();
        assert!(f < 1.0 - 1e-3, "{f}");
        assert!(entangler_fidelity(2, &EngineOptions::default()).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn finite_gate_time_adds_decay() {
        let s = sensor(2, 0.2e6, 0.034e6);
        let flux = s.flux_window().unwrap().0 + 0.0005;
        let ideal = ghz_projected_series(&s, flux, &[0.0], &EngineOptions::default()).unwrap()[0];
        let slow = EngineOptions {
            gate_time: 50e-9,
            ..EngineOptions::default()
        };
        let p = ghz_projected_series(&s, flux, &[0.0], &slow).unwrap()[0];
        assert!(p < ideal);
    }

    #[test]
    fn csv_dump() {
        let mut buf = Vec::new();
        plus_state().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("row,col,re,im\n0,0,5.00000000000000000e-1,"));
    }

    #[test]
    fn invalid_times_rejected() {
        let spec = LindbladSpec::uniform(1, 0.0, 0.0, 0.0);
        assert!(evolve_times(&plus_state(), &spec, &[1e-6, 0.5e-6], 1e-8).is_err());
        assert!(evolve(&plus_state(), &spec, -1.0, 1e-8).is_err());
        let neg = LindbladSpec::uniform(1, 0.0, -1.0, 0.0);
        assert!(evolve(&plus_state(), &neg, 1e-6, 1e-8).is_err());
    }
}
