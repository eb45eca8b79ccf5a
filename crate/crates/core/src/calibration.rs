//! Estimate-then-correct passes over a chain: Rabi amplitude lookup, I/Q
//! gain/phase/offset predistortion, polar path delay alignment, memoryless
//! DPD and off-state leakage cancellation.
//!
//! Each procedure measures the chain with its own kind of correction
//! removed and returns the full correction for the raw chain, so running a
//! procedure again on the corrected chain reproduces the same correction.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::architectures::{run_chain, StageSpec, TxChain};
use crate::error::{Error, Result};
use crate::impairments::threshold_mask;
use crate::metrics::{run_link, CommLink};
use crate::modulation::GateEnvelopeSpec;
use crate::par::*;
use crate::qubit::{rabi_protocol, QubitModel};
use crate::signal::{fft_windowed, ComplexEnvelope, Window};

/// Largest pointwise change isotonic smoothing may make before the code map
/// is declared unresolvable, radians.
pub const MAX_ISOTONIC_RESIDUAL: f64 = 0.2;
/// Points in the local grid used to refine the pi anchor.
const ANCHOR_POINTS: usize = 9;

/// Measured rotation angle against drive code, smoothed to be nondecreasing
/// and cut at the first pi rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AmplitudeLut {
    pub codes: Vec<f64>,
    /// Angles inverted from the measured excited population.
    pub theta_raw: Vec<f64>,
    /// Nondecreasing fit to `theta_raw`.
    pub theta: Vec<f64>,
    /// Code producing a pi rotation; the last entry of `codes`.
    pub pi_code: f64,
}

impl AmplitudeLut {
    /// Rotation angle the drive produces at `code`, by linear interpolation.
    pub fn theta_at(&self, code: f64) -> f64 {
        interp(&self.codes, &self.theta, code)
    }

    /// Smallest code reaching `theta` on the fitted curve, for `theta` in `[0, pi]`.
    pub fn code_for(&self, theta: f64) -> Result<f64> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::param("theta", format!("must lie in [0, pi], got {theta}")));
        }
        let (c, t) = (&self.codes, &self.theta);
        if theta <= t[0] {
            return Ok(if t[0] > 0.0 { c[0] * theta / t[0] } else { c[0] });
        }
        for i in 0..c.len() - 1 {
            if t[i + 1] >= theta && t[i + 1] > t[i] {
                let f = (theta - t[i]) / (t[i + 1] - t[i]);
                return Ok(c[i] + f * (c[i + 1] - c[i]));
            }
        }
        Ok(self.pi_code)
    }
}

fn interp(x: &[f64], y: &[f64], at: f64) -> f64 {
    if at <= x[0] {
        return y[0];
    }
    for i in 0..x.len() - 1 {
        if at <= x[i + 1] {
            let f = (at - x[i]) / (x[i + 1] - x[i]);
            return y[i] + f * (y[i + 1] - y[i]);
        }
    }
    *y.last().unwrap()
}

/// Pool-adjacent-violators fit: the nondecreasing sequence closest to `y`
/// in least squares.
pub fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64, n1 + n2));
        }
    }
    blocks.iter().flat_map(|&(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Vertex of the parabola through three points, clamped to their span.
fn parabola_peak(x: [f64; 3], y: [f64; 3]) -> f64 {
    let d1 = (y[1] - y[0]) / (x[1] - x[0]);
    let d2 = (y[2] - y[1]) / (x[2] - x[1]);
    let curv = (d2 - d1) / (x[2] - x[0]);
    if !(curv < 0.0) {
        return x[1];
    }
    let v = 0.5 * (x[0] + x[1]) - d1 / (2.0 * curv);
    v.clamp(x[0], x[2])
}

/// First local maximum of the excited population that is a near-full flip.
fn first_flip(p: &[f64]) -> Option<usize> {
    (1..p.len() - 1).find(|&i| p[i] >= 0.9 && p[i] >= p[i - 1] && p[i] >= p[i + 1])
}

/// Rabi sweep over `code_grid` drive peaks, inverted on the first branch of
/// `P1 = sin^2(theta / 2)` and smoothed to a monotone lookup table.
pub fn rabi_amplitude_cal(
    model: &QubitModel,
    chain: &TxChain,
    genv: &GateEnvelopeSpec,
    sample_rate: f64,
    code_grid: &[f64],
) -> Result<AmplitudeLut> {
    if code_grid.len() < 4 {
        return Err(Error::param("code_grid", "needs at least four codes"));
    }
    if code_grid[0] < 0.0 || code_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("code_grid", "codes must be nonnegative and strictly increasing"));
    }
    let p = rabi_protocol(model, chain, genv, sample_rate, code_grid)?;
    let peak = first_flip(&p).ok_or_else(|| Error::Calibration("code grid never reaches a pi rotation".into()))?;

    // Refine the pi code on a local grid around the coarse peak.
    let (lo, hi) = (code_grid[peak - 1], code_grid[peak + 1]);
    let fine: Vec<f64> = (0..ANCHOR_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (ANCHOR_POINTS - 1) as f64)
        .collect();
    let pf = rabi_protocol(model, chain, genv, sample_rate, &fine)?;
    let j = (1..ANCHOR_POINTS - 1)
        .max_by(|&a, &b| pf[a].total_cmp(&pf[b]))
        .unwrap();
    let pi_code = parabola_peak([fine[j - 1], fine[j], fine[j + 1]], [pf[j - 1], pf[j], pf[j + 1]]);

    let mut codes = Vec::new();
    let mut theta_raw = Vec::new();
    for (&c, &pk) in code_grid.iter().zip(&p) {
        if c >= pi_code {
            break;
        }
        codes.push(c);
        theta_raw.push(2.0 * pk.clamp(0.0, 1.0).sqrt().asin());
    }
    codes.push(pi_code);
    theta_raw.push(PI);
    let theta = isotonic(&theta_raw);
    let residual = theta.iter().zip(&theta_raw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if residual > MAX_ISOTONIC_RESIDUAL {
        return Err(Error::Calibration(format!(
            "code map too non-monotone to correct (isotonic residual {residual:.3} rad)"
        )));
    }
    Ok(AmplitudeLut {
        codes,
        theta_raw,
        theta,
        pi_code,
    })
}

/// Real 2x2 matrix and offset applied ahead of the chain:
/// `[I'; Q'] = matrix [I; Q] + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct IqCorrection {
    pub matrix: [[f64; 2]; 2],
    #[schemars(with = "[f64; 2]")]
    pub offset: Complex64,
}

impl IqCorrection {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            offset: Complex64::new(0.0, 0.0),
        }
    }

    /// Same map written as `a x + b conj(x) + offset`.
    fn from_widely_linear(a: Complex64, b: Complex64, offset: Complex64) -> Self {
        Self {
            matrix: [[a.re + b.re, b.im - a.im], [a.im + b.im, a.re - b.re]],
            offset,
        }
    }

    pub fn stage(&self) -> StageSpec {
        StageSpec::IqCorrection {
            matrix: self.matrix,
            offset: self.offset,
        }
    }

    /// `chain` with this correction as its first stage, replacing any earlier one.
    pub fn apply(&self, chain: &TxChain) -> TxChain {
        let mut stages = strip_leading_iq(chain).stages;
        stages.insert(0, self.stage());
        chain.with_stages(stages)
    }

    pub fn determinant(&self) -> f64 {
        let m = self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

fn strip_leading_iq(chain: &TxChain) -> TxChain {
    let mut stages = chain.stages.clone();
    if matches!(stages.first(), Some(StageSpec::IqCorrection { .. })) {
        stages.remove(0);
    }
    chain.with_stages(stages)
}

/// Largest image-to-wanted amplitude ratio the predistorter will invert.
const MAX_IMAGE_RATIO: f64 = 0.5;

/// Fits `y = mu x + nu conj(x) + c` at `f_test` from one settled tone and
/// returns the inverse map placed ahead of the chain.
pub fn iq_cal(chain: &TxChain, sample_rate: f64, f_test: f64, n: usize) -> Result<IqCorrection> {
    let raw = strip_leading_iq(chain);
    let (mu, nu, c) = widely_linear_response(&raw, sample_rate, f_test, n)?;
    let det = mu.norm_sqr() - nu.norm_sqr();
    if !(mu.norm() > 0.0) || nu.norm() > MAX_IMAGE_RATIO * mu.norm() || !(det > 0.0) {
        return Err(Error::Calibration(format!(
            "image ratio {:.3} is beyond the correctable range",
            nu.norm() / mu.norm()
        )));
    }
    let a = mu.conj() / det;
    let b = -nu / det;
    let d = -(a * c + b * c.conj());
    Ok(IqCorrection::from_widely_linear(a, b, d))
}

fn widely_linear_response(
    chain: &TxChain,
    sample_rate: f64,
    f_test: f64,
    n: usize,
) -> Result<(Complex64, Complex64, Complex64)> {
    if n < 64 {
        return Err(Error::param("n", format!("analysis length must be >= 64, got {n}")));
    }
    let k = (f_test / sample_rate * n as f64).round();
    if k < 3.0 || k > (n / 2 - 2) as f64 {
        return Err(Error::param("f_test", format!("test tone bin {k} collides with DC or its image")));
    }
    let k = k as usize;
    let x: Vec<Complex64> = (0..2 * n)
        .map(|t| Complex64::from_polar(1.0, 2.0 * PI * (k * t % n) as f64 / n as f64))
        .collect();
    let y = run_chain(chain, &ComplexEnvelope::new(x, sample_rate)?)?;
    let spec = fft_windowed(&y.samples()[n..], &Window::Rect.coefficients(n));
    let scale = 1.0 / n as f64;
    Ok((spec[k] * scale, spec[n - k] * scale, spec[0] * scale))
}

/// Outcome of a delay search: the compensating amplitude-path delay and the
/// EVM seen at every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DelayAlignment {
    pub best_delay: f64,
    pub grid: Vec<f64>,
    pub evm_db: Vec<f64>,
}

fn polar_index(chain: &TxChain) -> Result<usize> {
    chain
        .stages
        .iter()
        .position(|s| matches!(s, StageSpec::Polar { .. }))
        .ok_or_else(|| Error::Calibration("chain has no polar stage".into()))
}

/// `chain` with the polar stage's amplitude-path delay set to `delay`.
pub fn with_amp_delay(chain: &TxChain, delay: f64) -> Result<TxChain> {
    let idx = polar_index(chain)?;
    let mut stages = chain.stages.clone();
    if let StageSpec::Polar { amp_delay, .. } = &mut stages[idx] {
        *amp_delay = delay;
    }
    Ok(chain.with_stages(stages))
}

/// Exhaustive search over amplitude-path delays `k * resolution` within
/// `+-search_range`, minimizing EVM on `probe`.
pub fn polar_delay_align(chain: &TxChain, probe: &CommLink, resolution: f64, search_range: f64) -> Result<DelayAlignment> {
    if !(resolution > 0.0) {
        return Err(Error::param("resolution", "must be positive"));
    }
    if !(search_range >= resolution) {
        return Err(Error::param("search_range", "must cover at least one step"));
    }
    polar_index(chain)?;
    let steps = (search_range / resolution + 1e-9).floor() as i64;
    let grid: Vec<f64> = (-steps..=steps).map(|k| k as f64 * resolution).collect();
    let evm_db: Vec<f64> = grid
        .par_iter()
        .map(|&d| Ok(run_link(probe, &with_amp_delay(chain, d)?)?.evm.evm_db))
        .collect::<Result<_>>()?;
    let best = (0..grid.len())
        .min_by(|&a, &b| evm_db[a].total_cmp(&evm_db[b]).then(grid[a].abs().total_cmp(&grid[b].abs())))
        .unwrap();
    if best == 0 || best == grid.len() - 1 {
        return Err(Error::Calibration(format!(
            "EVM minimum sits on the search boundary ({:e} s); widen the range",
            grid[best]
        )));
    }
    Ok(DelayAlignment {
        best_delay: grid[best],
        grid,
        evm_db,
    })
}

/// Inverse AM-AM / AM-PM polynomials for a `Predistort` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DpdPolynomial {
    /// Odd-power coefficients `[p1, p3, p5, ...]`.
    pub gain_poly: Vec<f64>,
    /// Power-series phase coefficients `[q0, q1, q2, ...]`, radians.
    pub phase_poly: Vec<f64>,
}

impl DpdPolynomial {
    pub fn stage(&self) -> StageSpec {
        StageSpec::Predistort {
            gain_poly: self.gain_poly.clone(),
            phase_poly: self.phase_poly.clone(),
        }
    }

    /// `chain` with this predistorter as its first stage, replacing any earlier one.
    pub fn apply(&self, chain: &TxChain) -> TxChain {
        let mut stages = strip_leading_dpd(chain).stages;
        stages.insert(0, self.stage());
        chain.with_stages(stages)
    }
}

fn strip_leading_dpd(chain: &TxChain) -> TxChain {
    let mut stages = chain.stages.clone();
    if matches!(stages.first(), Some(StageSpec::Predistort { .. })) {
        stages.remove(0);
    }
    chain.with_stages(stages)
}

/// Samples per amplitude step of the staircase probe; only the last is read.
const STAIR_HOLD: usize = 16;

/// Amplitude and phase the chain gives a held real input of each amplitude.
pub fn am_response(chain: &TxChain, amplitudes: &[f64], sample_rate: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let x: Vec<Complex64> = amplitudes
        .iter()
        .flat_map(|&a| std::iter::repeat_n(Complex64::new(a, 0.0), STAIR_HOLD))
        .collect();
    let y = run_chain(chain, &ComplexEnvelope::new(x, sample_rate)?)?;
    let read: Vec<Complex64> = (0..amplitudes.len())
        .map(|i| y.samples()[(i + 1) * STAIR_HOLD - 1])
        .collect();
    Ok((read.iter().map(|v| v.norm()).collect(), read.iter().map(|v| v.arg()).collect()))
}

fn least_squares(design: DMatrix<f64>, target: DVector<f64>) -> Result<Vec<f64>> {
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&target, 1e-12)
        .map_err(|e| Error::Calibration(format!("least-squares fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

/// Probes the chain with an amplitude staircase and fits, by least squares,
/// the predistorter that makes the cascade linear at the chain's small-signal
/// gain and removes its AM-PM.
pub fn dpd_fit(chain: &TxChain, amplitude_grid: &[f64], order: usize, sample_rate: f64) -> Result<DpdPolynomial> {
    if order.is_multiple_of(2) || order > 7 {
        return Err(Error::param("order", format!("must be odd and <= 7, got {order}")));
    }
    let n_odd = order.div_ceil(2);
    if amplitude_grid.len() < n_odd + 1 {
        return Err(Error::param("amplitude_grid", "too few probe amplitudes for the order"));
    }
    if amplitude_grid[0] <= 0.0 || amplitude_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("amplitude_grid", "amplitudes must be positive and increasing"));
    }
    let raw = strip_leading_dpd(chain);
    let (gain, phase) = am_response(&raw, amplitude_grid, sample_rate)?;
    if gain.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Calibration("AM-AM response is not monotone on the probe grid".into()));
    }
    let m = amplitude_grid.len();
    // Forward odd fit gives the small-signal gain the cascade should keep.
    let fwd = DMatrix::from_fn(m, n_odd, |i, j| amplitude_grid[i].powi(2 * j as i32 + 1));
    let k = least_squares(fwd, DVector::from_vec(gain.clone()))?[0];
    if !(k > 0.0) {
        return Err(Error::Calibration("chain has no positive small-signal gain".into()));
    }
    let u: Vec<f64> = gain.iter().map(|g| g / k).collect();
    let inv = DMatrix::from_fn(m, n_odd, |i, j| u[i].powi(2 * j as i32 + 1));
    let mut gain_poly = least_squares(inv, DVector::from_vec(amplitude_grid.to_vec()))?;
    let phase0 = phase[0];
    let unwrapped: Vec<f64> = phase.iter().map(|p| -(phase0 + crate::signal::wrap_phase(p - phase0))).collect();
    let ph = DMatrix::from_fn(m, order, |i, j| u[i].powi(j as i32));
    let mut phase_poly = least_squares(ph, DVector::from_vec(unwrapped))?;
    for c in gain_poly.iter_mut().skip(1).chain(phase_poly.iter_mut()) {
        if c.abs() < 1e-12 {
            *c = 0.0;
        }
    }
    if (gain_poly[0] - 1.0).abs() < 1e-12 {
        gain_poly[0] = 1.0;
    }
    Ok(DpdPolynomial { gain_poly, phase_poly })
}

/// Maximum relative spread of OFF-window residuals accepted as static leakage.
pub const MAX_LEAK_SPREAD: f64 = 0.1;

fn leakage_index(chain: &TxChain) -> Result<usize> {
    chain
        .stages
        .iter()
        .rposition(|s| matches!(s, StageSpec::OnOffLeakage { .. }))
        .ok_or_else(|| Error::Calibration("chain has no on/off leakage stage".into()))
}

/// `chain` with the last leakage stage's cancellation tone set to `cancel`.
pub fn with_cancel(chain: &TxChain, cancel: Complex64) -> Result<TxChain> {
    let idx = leakage_index(chain)?;
    let mut stages = chain.stages.clone();
    if let StageSpec::OnOffLeakage { cancel: c, .. } = &mut stages[idx] {
        *c = cancel;
    }
    Ok(chain.with_stages(stages))
}

/// ON/OFF split of `probe` used by the chain's leakage stage.
fn probe_mask(chain: &TxChain, probe: &ComplexEnvelope) -> Result<Vec<bool>> {
    let idx = leakage_index(chain)?;
    let StageSpec::OnOffLeakage { threshold, .. } = chain.stages[idx] else {
        unreachable!()
    };
    Ok(threshold_mask(probe, threshold))
}

/// Mean ON power over mean OFF power at the chain output, dB. Capped at 300 dB
/// when the OFF window is silent.
pub fn on_off_ratio_db(chain: &TxChain, probe: &ComplexEnvelope) -> Result<f64> {
    let mask = probe_mask(chain, probe)?;
    let y = run_chain(chain, probe)?;
    let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0usize, 0usize);
    for (v, &m) in y.samples().iter().zip(&mask) {
        if m {
            on += v.norm_sqr();
            n_on += 1;
        } else {
            off += v.norm_sqr();
            n_off += 1;
        }
    }
    if n_on == 0 || n_off == 0 {
        return Err(Error::param("probe", "needs both ON and OFF samples"));
    }
    let (on, off) = (on / n_on as f64, off / n_off as f64);
    Ok(10.0 * (on / off.max(on * 1e-30)).log10())
}

/// Square burst probe: `period`-sample cycles, ON at unit amplitude for the
/// first half.
pub fn burst_probe(cycles: usize, period: usize, sample_rate: f64) -> Result<ComplexEnvelope> {
    let x = (0..cycles * period)
        .map(|k| Complex64::new(if k % period < period / 2 { 1.0 } else { 0.0 }, 0.0))
        .collect();
    ComplexEnvelope::new(x, sample_rate)
}

/// Cancellation tone that nulls the mean OFF-window residual of the chain's
/// last leakage stage.
pub fn leakage_cancel(chain: &TxChain, probe: &ComplexEnvelope) -> Result<Complex64> {
    let raw = with_cancel(chain, Complex64::new(0.0, 0.0))?;
    let mask = probe_mask(&raw, probe)?;
    let y = run_chain(&raw, probe)?;
    let off: Vec<Complex64> = y.samples().iter().zip(&mask).filter(|(_, &m)| !m).map(|(v, _)| *v).collect();
    if off.is_empty() {
        return Err(Error::param("probe", "has no OFF samples"));
    }
    let mean = off.iter().sum::<Complex64>() / off.len() as f64;
    if mean.norm() == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let spread = off.iter().map(|v| (v - mean).norm()).fold(0.0, f64::max) / mean.norm();
    if spread > MAX_LEAK_SPREAD {
        return Err(Error::Calibration(format!(
            "OFF-window leakage is not static (spread {:.1}% of mean)",
            100.0 * spread
        )));
    }
    Ok(-mean)
}
