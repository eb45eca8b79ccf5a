//! Sampled complex envelopes and the elementary transforms built on them.
//!
//! A [`ComplexEnvelope`] holds `x[k] = I[k] + jQ[k]` on a uniform grid. Every
//! impairment, architecture stage and metric consumes and produces this type.

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-length of the band-limited interpolation kernel. Samples closer than
/// this to either end of a delayed record see zero padding.
pub const INTERP_HALF_TAPS: usize = 8;

/// Uniformly sampled complex baseband signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexEnvelope {
    samples: Vec<Complex64>,
    sample_rate: f64,
    t0: f64,
}

impl ComplexEnvelope {
    /// Wraps samples without a length check; empty records are allowed here so
    /// that empty symbol streams flow through a chain.
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::param("sample_rate", format!("must be positive, got {sample_rate}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            t0: 0.0,
        })
    }

    pub fn with_start_time(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    /// All-zero record of `len` samples.
    pub fn zeros(len: usize, sample_rate: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Time of sample `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.sample_rate
    }

    pub fn in_phase(&self) -> Vec<f64> {
        self.samples.iter().map(|x| x.re).collect()
    }

    pub fn quadrature(&self) -> Vec<f64> {
        self.samples.iter().map(|x| x.im).collect()
    }

    /// Mean of `|x|^2`; zero for an empty record.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// Same grid, new samples.
    pub fn with_samples(&self, samples: Vec<Complex64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            t0: self.t0,
        }
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        self.with_samples(self.samples.iter().map(|&x| f(x)).collect())
    }

    /// Appends `other` after this record. Both must share the sample rate.
    pub fn concat(&self, other: &ComplexEnvelope) -> Result<Self> {
        self.check_compatible_rate(other)?;
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(self.with_samples(samples))
    }

    /// Elementwise combination of two records with equal rate and length.
    pub fn zip_with(
        &self,
        other: &ComplexEnvelope,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Self> {
        self.check_compatible_rate(other)?;
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(self.with_samples(
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    fn check_compatible_rate(&self, other: &ComplexEnvelope) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch {
                left: self.sample_rate,
                right: other.sample_rate,
            });
        }
        Ok(())
    }
}

/// Builds `x[k] = i[k] + j q[k]`.
pub fn make_envelope(i: &[f64], q: &[f64], sample_rate: f64) -> Result<ComplexEnvelope> {
    if i.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: i.len(),
            right: q.len(),
        });
    }
    if i.is_empty() {
        return Err(Error::TooShort("an envelope needs at least one sample".into()));
    }
    let samples = i.iter().zip(q).map(|(&a, &b)| Complex64::new(a, b)).collect();
    ComplexEnvelope::new(samples, sample_rate)
}

/// Amplitude and unwrapped phase tracks of an envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarTracks {
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub sample_rate: f64,
}

/// Splits an envelope into amplitude and continuous phase.
///
/// Where the amplitude is exactly zero the previous phase is held (zero at the
/// start of the record), so the phase track never jumps at nulls.
pub fn to_polar(env: &ComplexEnvelope) -> PolarTracks {
    let mut amplitude = Vec::with_capacity(env.len());
    let mut phase = Vec::with_capacity(env.len());
    let mut last = 0.0_f64;
    for (k, x) in env.samples().iter().enumerate() {
        let a = x.norm();
        amplitude.push(a);
        if a > 0.0 {
            let raw = x.arg();
            last = if k == 0 || phase.is_empty() {
                raw
            } else {
                last + wrap_phase(raw - last)
            };
        }
        phase.push(last);
    }
    PolarTracks {
        amplitude,
        phase,
        sample_rate: env.sample_rate(),
    }
}

/// Recombines polar tracks as `A[k] exp(j phi[k])`.
pub fn from_polar(tracks: &PolarTracks) -> Result<ComplexEnvelope> {
    if tracks.amplitude.len() != tracks.phase.len() {
        return Err(Error::LengthMismatch {
            left: tracks.amplitude.len(),
            right: tracks.phase.len(),
        });
    }
    if let Some(a) = tracks.amplitude.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::param("amplitude", format!("must be nonnegative, got {a}")));
    }
    let samples = tracks
        .amplitude
        .iter()
        .zip(&tracks.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    ComplexEnvelope::new(samples, tracks.sample_rate)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Polynomial orders the interpolation kernel reproduces exactly.
const KERNEL_MOMENTS: usize = 4;
/// Half-width of the Blackman window in samples. Slightly wider than the
/// kernel so the outermost taps keep useful weight.
const WINDOW_HALF: f64 = 8.5;

/// Blackman-windowed sinc taps for a fractional offset `mu` in `[0, 1)`.
/// Tap `m` (index `m + 7`) weights the input sample at integer lag `m`.
///
/// The truncated window biases the low-order moments of the kernel, which
/// shows up as passband error growing with the square of frequency. A
/// window-weighted least-change correction restores `sum h t^p = [p == 0]`
/// for `p < KERNEL_MOMENTS`, so polynomials up to that order are delayed
/// exactly and the passband error falls off much faster.
fn interp_kernel(mu: f64) -> [f64; 2 * INTERP_HALF_TAPS] {
    const N: usize = 2 * INTERP_HALF_TAPS;
    let half = INTERP_HALF_TAPS as f64;
    let mut taps = [0.0; N];
    let mut offsets = [0.0; N];
    let mut weights = [0.0; N];
    for idx in 0..N {
        let t = idx as f64 - (half - 1.0) - mu;
        let w = 0.42 + 0.5 * (PI * t / WINDOW_HALF).cos() + 0.08 * (2.0 * PI * t / WINDOW_HALF).cos();
        offsets[idx] = t;
        weights[idx] = w.max(0.0);
        taps[idx] = sinc(t) * w;
    }
    let a = SMatrix::<f64, KERNEL_MOMENTS, N>::from_fn(|p, idx| offsets[idx].powi(p as i32));
    let h = SVector::<f64, N>::from_column_slice(&taps);
    let mut target = SVector::<f64, KERNEL_MOMENTS>::zeros();
    target[0] = 1.0;
    let wat = SMatrix::<f64, N, KERNEL_MOMENTS>::from_fn(|idx, p| weights[idx] * a[(p, idx)]);
    let Some(inv) = (a * wat).try_inverse() else {
        let sum: f64 = taps.iter().sum();
        return taps.map(|t| t / sum);
    };
    let corrected = h - wat * (inv * (a * h - target));
    taps.copy_from_slice(corrected.as_slice());
    taps
}

/// Normalized sinc, `sin(pi x)/(pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited value of `samples` at fractional index `pos`; samples outside
/// the record count as zero.
pub(crate) fn interpolate_at(samples: &[Complex64], pos: f64) -> Complex64 {
    let base = pos.floor();
    let mu = pos - base;
    if mu < 1e-12 {
        return fetch(samples, base as i64);
    }
    apply_kernel(samples, base as i64, &interp_kernel(mu))
}

fn fetch(samples: &[Complex64], idx: i64) -> Complex64 {
    if idx >= 0 && (idx as usize) < samples.len() {
        samples[idx as usize]
    } else {
        Complex64::new(0.0, 0.0)
    }
}

fn apply_kernel(samples: &[Complex64], base: i64, taps: &[f64]) -> Complex64 {
    taps.iter()
        .enumerate()
        .map(|(idx, &h)| fetch(samples, base + idx as i64 - (INTERP_HALF_TAPS as i64 - 1)) * h)
        .sum()
}

/// Delays an envelope by `tau` seconds: `y(t) = x(t - tau)`.
///
/// Whole-sample delays are exact shifts with zero fill; the fractional part
/// uses a 16-tap Blackman-windowed sinc.
pub fn fractional_delay(env: &ComplexEnvelope, tau: f64) -> Result<ComplexEnvelope> {
    if tau == 0.0 {
        return Ok(env.clone());
    }
    if !tau.is_finite() || tau.abs() >= env.duration() / 4.0 {
        return Err(Error::DelayTooLarge {
            delay: tau,
            duration: env.duration(),
        });
    }
    let d = tau * env.sample_rate();
    let samples = env.samples();
    let n = samples.len();
    let rounded = d.round();
    let out = if (d - rounded).abs() < 1e-9 {
        let shift = rounded as i64;
        (0..n as i64)
            .map(|k| {
                let src = k - shift;
                if src >= 0 && src < n as i64 {
                    samples[src as usize]
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect()
    } else {
        // Every output sample sits at the same fractional offset.
        let whole = (-d).floor();
        let taps = interp_kernel(-d - whole);
        (0..n as i64).map(|k| apply_kernel(samples, k + whole as i64, &taps)).collect()
    };
    Ok(env.with_samples(out))
}

/// Analysis window for [`windowed_fft`] and the PSD estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rect,
    Hann,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rect => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// DFT of the windowed record. Bin `k` sits at `k fs / N`, wrapped two-sided.
pub fn windowed_fft(env: &ComplexEnvelope, window: Window) -> Result<Vec<Complex64>> {
    if env.len() < 8 {
        return Err(Error::TooShort(format!("FFT needs at least 8 samples, got {}", env.len())));
    }
    Ok(fft_windowed(env.samples(), &window.coefficients(env.len())))
}

pub(crate) fn fft_windowed(samples: &[Complex64], window: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = samples.iter().zip(window).map(|(&x, &w)| x * w).collect();
    let fft = FftPlanner::new().plan_fft_forward(buf.len());
    fft.process(&mut buf);
    buf
}

/// Frequency of DFT bin `k` for an `n`-point transform, in `[-fs/2, fs/2)`.
pub fn bin_frequency(k: usize, n: usize, sample_rate: f64) -> f64 {
    let k = if k >= n.div_ceil(2) { k as f64 - n as f64 } else { k as f64 };
    k * sample_rate / n as f64
}

/// Two-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Strictly increasing, Hz.
    pub freqs: Vec<f64>,
    /// Linear power per Hz.
    pub psd: Vec<f64>,
    pub resolution_bw: f64,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        if self.freqs.len() < 2 {
            0.0
        } else {
            self.freqs[1] - self.freqs[0]
        }
    }

    /// Integrated power over all bins.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.bin_width()
    }

    /// Index of the bin nearest `freq`.
    pub fn nearest_bin(&self, freq: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, &f) in self.freqs.iter().enumerate() {
            let d = (f - freq).abs();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    pub fn psd_db(&self) -> Vec<f64> {
        self.psd.iter().map(|&p| 10.0 * p.max(1e-300).log10()).collect()
    }
}
