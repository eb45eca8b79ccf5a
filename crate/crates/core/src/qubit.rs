//! Two- and three-level drive simulation in the rotating frame.
//!
//! The drive envelope is held constant over each sample and the exact matrix
//! exponential of that interval is applied, so propagation error comes only
//! from the sampled waveform itself.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::architectures::{synth_qubit_pulse, TxChain};
use crate::error::{Error, Result};
use crate::export::{csv_writer, fmt_f64};
use crate::modulation::{gate_envelope, GateEnvelopeSpec};
use crate::par::*;
use crate::signal::{wrap_phase, ComplexEnvelope};

pub type Unitary = DMatrix<Complex64>;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Transmon-like system in the frame of the drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct QubitModel {
    pub levels: usize,
    /// Drive minus qubit frequency, rad/s.
    #[serde(default)]
    pub detuning: f64,
    /// Shift of the 1-2 transition from the 0-1 transition, rad/s.
    #[serde(default)]
    pub anharmonicity: f64,
    /// Rabi rate per unit envelope amplitude, rad/s.
    pub drive_gain: f64,
}

impl QubitModel {
    pub fn two_level(drive_gain: f64) -> Self {
        Self {
            levels: 2,
            detuning: 0.0,
            anharmonicity: 0.0,
            drive_gain,
        }
    }

    pub fn transmon(drive_gain: f64, anharmonicity: f64) -> Self {
        Self {
            levels: 3,
            detuning: 0.0,
            anharmonicity,
            drive_gain,
        }
    }

    pub fn with_detuning(mut self, detuning: f64) -> Self {
        self.detuning = detuning;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.levels == 2 || self.levels == 3) {
            return Err(Error::param("levels", format!("must be 2 or 3, got {}", self.levels)));
        }
        if self.levels == 3 && !(self.anharmonicity < 0.0) {
            return Err(Error::param("anharmonicity", "must be negative for a three-level model"));
        }
        if !(self.drive_gain > 0.0 && self.drive_gain.is_finite()) {
            return Err(Error::param("drive_gain", "must be positive"));
        }
        if !self.detuning.is_finite() {
            return Err(Error::param("detuning", "must be finite"));
        }
        Ok(())
    }

    /// Hamiltonian for a constant envelope sample `x`.
    fn hamiltonian(&self, x: Complex64) -> Unitary {
        let d = self.detuning;
        let half = x * (self.drive_gain / 2.0);
        let n = self.levels;
        let mut h = Unitary::zeros(n, n);
        h[(0, 0)] = Complex64::new(d / 2.0, 0.0);
        h[(1, 1)] = Complex64::new(-d / 2.0, 0.0);
        h[(1, 0)] = half;
        h[(0, 1)] = half.conj();
        if n == 3 {
            h[(2, 2)] = Complex64::new(-1.5 * d + self.anharmonicity, 0.0);
            h[(2, 1)] = half * SQRT_2;
            h[(1, 2)] = (half * SQRT_2).conj();
        }
        h
    }
}

/// Complex Rabi drive and the carrier phase it was synthesized with.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveWaveform {
    pub envelope: ComplexEnvelope,
    pub carrier_phase: f64,
}

impl DriveWaveform {
    pub fn new(envelope: ComplexEnvelope) -> Self {
        Self {
            envelope,
            carrier_phase: 0.0,
        }
    }

    /// This drive followed by `next`.
    pub fn then(&self, next: &DriveWaveform) -> Result<DriveWaveform> {
        Ok(DriveWaveform {
            envelope: self.envelope.concat(&next.envelope)?,
            carrier_phase: self.carrier_phase,
        })
    }
}

/// Target rotation: angle `theta` about the XY-plane axis at `axis_phase`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub theta: f64,
    #[serde(default)]
    pub axis_phase: f64,
    pub duration: f64,
}

impl GateSpec {
    pub fn new(theta: f64, axis_phase: f64, duration: f64) -> Result<Self> {
        let g = Self {
            theta,
            axis_phase,
            duration,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 2.0 * PI) {
            return Err(Error::param("theta", format!("must lie in (0, 2pi], got {}", self.theta)));
        }
        if !(self.duration > 0.0) {
            return Err(Error::param("duration", "must be positive"));
        }
        Ok(())
    }

    pub fn target(&self) -> Unitary {
        rotation(self.theta, self.axis_phase)
    }
}

/// `exp(-i theta/2 (cos(phi) X + sin(phi) Y))`.
pub fn rotation(theta: f64, phi: f64) -> Unitary {
    let c = Complex64::new((theta / 2.0).cos(), 0.0);
    let s = (theta / 2.0).sin();
    let off = -I * s;
    Unitary::from_row_slice(
        2,
        2,
        &[
            c,
            off * Complex64::from_polar(1.0, -phi),
            off * Complex64::from_polar(1.0, phi),
            c,
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FidelityReport {
    pub f_avg: f64,
    pub infidelity: f64,
    /// Fitted rotation angle over the target angle, minus one.
    pub eps_a: f64,
    /// Fitted axis azimuth minus the target azimuth, radians.
    pub eps_phi: f64,
    /// Population leaving the qubit subspace, averaged over |0> and |1>.
    pub leakage_pop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseArea {
    /// Rotation angle `g |int x dt|`.
    pub theta: f64,
    /// Argument of the integrated envelope.
    pub phase: f64,
}

pub fn pulse_area(model: &QubitModel, drive: &DriveWaveform) -> PulseArea {
    let env = &drive.envelope;
    let integral: Complex64 = env.samples().iter().sum::<Complex64>() * env.dt();
    PulseArea {
        theta: model.drive_gain * integral.norm(),
        phase: if integral.norm() > 0.0 { integral.arg() } else { 0.0 },
    }
}

/// `exp(-i H dt)` for a 2x2 traceless-plus-diagonal Hamiltonian via Pauli
/// decomposition.
fn expm_qubit(h: &Unitary, dt: f64) -> Unitary {
    let nz = (h[(0, 0)].re - h[(1, 1)].re) / 2.0;
    let shift = (h[(0, 0)].re + h[(1, 1)].re) / 2.0;
    let nx = h[(1, 0)].re;
    let ny = h[(1, 0)].im;
    let w = (nx * nx + ny * ny + nz * nz).sqrt();
    let phase = Complex64::from_polar(1.0, -shift * dt);
    if w == 0.0 {
        return Unitary::identity(2, 2) * phase;
    }
    let (s, c) = (w * dt).sin_cos();
    let k = -I * (s / w);
    let u = Unitary::from_row_slice(
        2,
        2,
        &[
            c + k * nz,
            k * Complex64::new(nx, -ny),
            k * Complex64::new(nx, ny),
            c - k * nz,
        ],
    );
    u * phase
}

/// `exp(-i H dt)` for a Hermitian `H` by eigendecomposition.
fn expm_hermitian(h: &Unitary, dt: f64) -> Unitary {
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let d = Unitary::from_diagonal(&eig.eigenvalues.map(|l| Complex64::from_polar(1.0, -l * dt)));
    v * d * v.adjoint()
}

fn interval_propagator(model: &QubitModel, x: Complex64, dt: f64) -> Unitary {
    let h = model.hamiltonian(x);
    if model.levels == 2 {
        expm_qubit(&h, dt)
    } else {
        expm_hermitian(&h, dt)
    }
}

/// Largest entry of `U^dagger U - I`.
pub fn unitarity_error(u: &Unitary) -> f64 {
    let n = u.nrows();
    (u.adjoint() * u - Unitary::identity(n, n))
        .iter()
        .fold(0.0, |m, z| m.max(z.norm()))
}

/// Time-ordered product of per-sample propagators, each sample split into
/// `substeps` equal holds.
pub fn propagate(model: &QubitModel, drive: &DriveWaveform, substeps: usize) -> Result<Unitary> {
    model.validate()?;
    if substeps == 0 {
        return Err(Error::param("substeps", "must be at least 1"));
    }
    let n = model.levels;
    let dt = drive.envelope.dt() / substeps as f64;
    let mut u = Unitary::identity(n, n);
    for &x in drive.envelope.samples() {
        let step = interval_propagator(model, x, dt);
        for _ in 0..substeps {
            u = &step * u;
        }
    }
    let err = unitarity_error(&u);
    if err > 1e-9 {
        return Err(Error::NonUnitary(err));
    }
    Ok(u)
}

/// State after each sample starting from `|0>`.
pub fn trajectory(model: &QubitModel, drive: &DriveWaveform) -> Result<Vec<Vec<Complex64>>> {
    model.validate()?;
    let dt = drive.envelope.dt();
    let mut psi = vec![C0; model.levels];
    psi[0] = C1;
    let mut out = vec![psi.clone()];
    for &x in drive.envelope.samples() {
        let step = interval_propagator(model, x, dt);
        psi = (0..model.levels)
            .map(|r| (0..model.levels).map(|c| step[(r, c)] * psi[c]).sum())
            .collect();
        out.push(psi.clone());
    }
    Ok(out)
}

/// Bloch vector of the qubit subspace for each trajectory point.
pub fn bloch_trajectory(model: &QubitModel, drive: &DriveWaveform) -> Result<Vec<[f64; 4]>> {
    let states = trajectory(model, drive)?;
    let dt = drive.envelope.dt();
    Ok(states
        .iter()
        .enumerate()
        .map(|(k, psi)| {
            let rho01 = psi[0].conj() * psi[1];
            [
                k as f64 * dt,
                2.0 * rho01.re,
                2.0 * rho01.im,
                psi[0].norm_sqr() - psi[1].norm_sqr(),
            ]
        })
        .collect())
}

pub fn write_bloch_csv<W: Write>(points: &[[f64; 4]], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["t", "x", "y", "z"])?;
    for p in points {
        w.write_record(p.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Axis-angle of the SU(2) part of a 2x2 block, on the branch whose axis
/// points toward `reference_axis`.
fn axis_angle(u: &Unitary, reference_axis: [f64; 3]) -> (f64, [f64; 3]) {
    let det = u[(0, 0)] * u[(1, 1)] - u[(0, 1)] * u[(1, 0)];
    let su = u / det.sqrt();
    let c = ((su[(0, 0)] + su[(1, 1)]) / 2.0).re;
    // su = c I - i (v . sigma)
    let vx = -((su[(0, 1)] + su[(1, 0)]) / 2.0).im;
    let vy = -((su[(0, 1)] - su[(1, 0)]) / 2.0).re;
    let vz = -((su[(0, 0)] - su[(1, 1)]) / 2.0).im;
    let (mut v, mut c) = ([vx, vy, vz], c);
    let dot: f64 = v.iter().zip(&reference_axis).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        v = [-v[0], -v[1], -v[2]];
        c = -c;
    }
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let theta = 2.0 * s.atan2(c);
    let axis = if s > 0.0 { [v[0] / s, v[1] / s, v[2] / s] } else { reference_axis };
    (theta, axis)
}

pub fn average_gate_fidelity(u: &Unitary, gate: &GateSpec) -> Result<FidelityReport> {
    gate.validate()?;
    let n = u.nrows();
    if !(n == 2 || n == 3) || u.ncols() != n {
        return Err(Error::param("unitary", format!("expected 2x2 or 3x3, got {}x{}", n, u.ncols())));
    }
    let err = unitarity_error(u);
    if err > 1e-9 {
        return Err(Error::NonUnitary(err));
    }
    let target = gate.target();
    let block = u.view((0, 0), (2, 2)).into_owned();
    let m = target.adjoint() * &block;
    let tr = m.trace();
    let f_avg = if n == 2 {
        (tr.norm_sqr() + 2.0) / 6.0
    } else {
        ((m.adjoint() * &m).trace().re + tr.norm_sqr()) / 6.0
    };
    let leakage_pop = if n == 3 {
        (u[(2, 0)].norm_sqr() + u[(2, 1)].norm_sqr()) / 2.0
    } else {
        0.0
    };
    let reference = [gate.axis_phase.cos(), gate.axis_phase.sin(), 0.0];
    let (theta, axis) = axis_angle(&block, reference);
    let f_avg = f_avg.clamp(0.0, 1.0);
    Ok(FidelityReport {
        f_avg,
        infidelity: 1.0 - f_avg,
        eps_a: theta / gate.theta - 1.0,
        eps_phi: wrap_phase(axis[1].atan2(axis[0]) - gate.axis_phase),
        leakage_pop,
    })
}

/// Coherent infidelity predicted from area and axis errors.
pub fn infidelity_model(theta: f64, eps_a: f64, eps_phi: f64) -> f64 {
    theta * theta / 6.0 * eps_a * eps_a + 2.0 / 3.0 * (theta / 2.0).sin().powi(2) * eps_phi * eps_phi
}

/// `|<2|U|0>|^2` after the drive.
pub fn leakage_population(model: &QubitModel, drive: &DriveWaveform) -> Result<f64> {
    if model.levels != 3 {
        return Err(Error::param("levels", "leakage needs a three-level model"));
    }
    let u = propagate(model, drive, 1)?;
    Ok(u[(2, 0)].norm_sqr())
}

/// Peak amplitude that gives `genv` a rotation angle `theta` under `model`.
pub fn peak_for_angle(model: &QubitModel, genv: &GateEnvelopeSpec, sample_rate: f64, theta: f64) -> Result<f64> {
    let unit = gate_envelope(&genv.with_peak(1.0).without_drag(), sample_rate)?;
    let area = unit.samples().iter().map(|x| x.re).sum::<f64>() * unit.dt();
    if !(area > 0.0) {
        return Err(Error::param("genv", "envelope has no area"));
    }
    Ok(theta / (model.drive_gain * area))
}

fn drive_for(
    chain: &TxChain,
    genv: &GateEnvelopeSpec,
    sample_rate: f64,
    peak: f64,
    axis_phase: f64,
) -> Result<DriveWaveform> {
    // the rotation target does not affect synthesis, only the axis does
    let gate = GateSpec::new(PI, axis_phase, genv.duration)?;
    synth_qubit_pulse(chain, &gate, &genv.with_peak(peak), sample_rate)
}

/// Excited-state population after one pulse per amplitude in `amplitudes`.
pub fn rabi_protocol(
    model: &QubitModel,
    chain: &TxChain,
    genv: &GateEnvelopeSpec,
    sample_rate: f64,
    amplitudes: &[f64],
) -> Result<Vec<f64>> {
    if amplitudes.is_empty() {
        return Err(Error::param("amplitudes", "grid is empty"));
    }
    model.validate()?;
    amplitudes
        .par_iter()
        .map(|&a| {
            let drive = drive_for(chain, genv, sample_rate, a, 0.0)?;
            let u = propagate(model, &drive, 1)?;
            Ok(u[(1, 0)].norm_sqr())
        })
        .collect()
}

/// Ground-state population after an X rotation by `theta_a` followed by a
/// pi pulse about axis `phi_b`, for every grid pair. Rows follow `theta_a`.
pub fn phase_coherency_protocol(
    model: &QubitModel,
    chain: &TxChain,
    genv: &GateEnvelopeSpec,
    sample_rate: f64,
    theta_a: &[f64],
    phi_b: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if theta_a.is_empty() || phi_b.is_empty() {
        return Err(Error::param("grid", "theta and phase grids must be nonempty"));
    }
    model.validate()?;
    let pi_peak = peak_for_angle(model, genv, sample_rate, PI)?;
    let points: Vec<(usize, usize)> = (0..theta_a.len())
        .flat_map(|i| (0..phi_b.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = points
        .par_iter()
        .map(|&(i, j)| {
            let peak_a = peak_for_angle(model, genv, sample_rate, theta_a[i].max(0.0))?;
            let a = drive_for(chain, genv, sample_rate, peak_a, 0.0)?;
            let b = drive_for(chain, genv, sample_rate, pi_peak, phi_b[j])?;
            let u = propagate(model, &a.then(&b)?, 1)?;
            Ok(u[(0, 0)].norm_sqr())
        })
        .collect::<Result<_>>()?;
    Ok(values.chunks(phi_b.len()).map(<[f64]>::to_vec).collect())
}
