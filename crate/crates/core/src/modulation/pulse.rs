use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::SymbolStream;
use crate::error::{Error, Result};
use crate::signal::{sinc, ComplexEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    Rect,
    Sinc,
    RaisedCosine,
    RootRaisedCosine,
    /// `rolloff` is read as the bandwidth-time product.
    Gaussian,
}

/// Symbol pulse: kind, roll-off, span and oversampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PulseShape {
    pub kind: PulseKind,
    #[serde(default)]
    pub rolloff: f64,
    pub span_symbols: usize,
    pub samples_per_symbol: usize,
}

impl PulseShape {
    pub fn new(kind: PulseKind, rolloff: f64, span_symbols: usize, samples_per_symbol: usize) -> Result<Self> {
        let p = Self {
            kind,
            rolloff,
            span_symbols,
            samples_per_symbol,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rolloff) {
            return Err(Error::param("rolloff", format!("must lie in [0, 1], got {}", self.rolloff)));
        }
        if self.kind == PulseKind::Gaussian && self.rolloff <= 0.0 {
            return Err(Error::param("rolloff", "gaussian bandwidth-time product must be positive"));
        }
        if self.span_symbols < 4 {
            return Err(Error::param("span_symbols", format!("must be >= 4, got {}", self.span_symbols)));
        }
        if self.samples_per_symbol < 4 {
            return Err(Error::param(
                "samples_per_symbol",
                format!("must be >= 4, got {}", self.samples_per_symbol),
            ));
        }
        Ok(())
    }

    /// Samples from a symbol's impulse to its decision instant in the shaped envelope.
    pub fn delay_samples(&self) -> usize {
        match self.kind {
            PulseKind::Rect => self.samples_per_symbol / 2,
            _ => self.span_symbols * self.samples_per_symbol / 2,
        }
    }

    /// Symbols excluded from each end of a record before scoring.
    pub fn guard_symbols(&self) -> usize {
        self.span_symbols / 2
    }

    pub fn tap_count(&self) -> usize {
        match self.kind {
            PulseKind::Rect => self.samples_per_symbol,
            _ => self.span_symbols * self.samples_per_symbol + 1,
        }
    }

    /// Impulse response at `t` symbol periods from the pulse centre.
    pub fn impulse(&self, t: f64) -> f64 {
        let beta = self.rolloff;
        match self.kind {
            PulseKind::Rect => {
                if (-0.5..0.5).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
            PulseKind::Sinc => sinc(t),
            PulseKind::RaisedCosine => raised_cosine(t, beta),
            PulseKind::RootRaisedCosine => root_raised_cosine(t, beta),
            PulseKind::Gaussian => (-2.0 * PI * PI * beta * beta * t * t / LN_2).exp(),
        }
    }
}

fn raised_cosine(t: f64, beta: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    // exact zeros at nonzero integers
    if t.fract() == 0.0 {
        return 0.0;
    }
    let denom = 1.0 - (2.0 * beta * t).powi(2);
    if denom.abs() < 1e-10 {
        return PI / 4.0 * sinc(1.0 / (2.0 * beta));
    }
    sinc(t) * (PI * beta * t).cos() / denom
}

fn root_raised_cosine(t: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        return sinc(t);
    }
    if t == 0.0 {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    let x = 4.0 * beta * t;
    if (x.abs() - 1.0).abs() < 1e-10 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    ((PI * t * (1.0 - beta)).sin() + x * (PI * t * (1.0 + beta)).cos()) / (PI * t * (1.0 - x * x))
}

/// Real, symmetric filter taps sampled at `samples_per_symbol`.
pub fn shape_filter(p: &PulseShape) -> Vec<f64> {
    let sps = p.samples_per_symbol as f64;
    match p.kind {
        PulseKind::Rect => vec![1.0; p.samples_per_symbol],
        _ => {
            let n = p.tap_count();
            let centre = (n - 1) / 2;
            (0..n)
                .map(|k| {
                    let offset = k as i64 - centre as i64;
                    // integer-symbol offsets evaluated on the exact grid
                    let t = if offset % p.samples_per_symbol as i64 == 0 {
                        (offset / p.samples_per_symbol as i64) as f64
                    } else {
                        offset as f64 / sps
                    };
                    p.impulse(t)
                })
                .collect()
        }
    }
}

/// Upsamples by `samples_per_symbol` and convolves with the pulse taps.
///
/// The output keeps the full convolution tails, so symbol `k` peaks at sample
/// `k * sps + p.delay_samples()`.
pub fn shape_symbols(s: &SymbolStream, p: &PulseShape) -> Result<ComplexEnvelope> {
    p.validate()?;
    let sps = p.samples_per_symbol;
    let fs = sps as f64 / s.symbol_period;
    if s.is_empty() {
        return ComplexEnvelope::new(Vec::new(), fs);
    }
    let taps = shape_filter(p);
    let len = (s.len() - 1) * sps + taps.len();
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for (k, &sym) in s.symbols.iter().enumerate() {
        if sym == Complex64::new(0.0, 0.0) {
            continue;
        }
        let base = k * sps;
        for (m, &h) in taps.iter().enumerate() {
            out[base + m] += sym * h;
        }
    }
    ComplexEnvelope::new(out, fs)
}

/// Highest frequency, in units of the symbol rate, at which the tap spectrum
/// is still within `level_db` of its DC value.
pub fn occupied_bandwidth(taps: &[f64], samples_per_symbol: usize, level_db: f64) -> f64 {
    let nfft = (taps.len() * 16).next_power_of_two();
    let mut buf: Vec<Complex64> = taps.iter().map(|&t| Complex64::new(t, 0.0)).collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    let fft = rustfft::FftPlanner::new().plan_fft_forward(nfft);
    fft.process(&mut buf);
    let dc = buf[0].norm();
    let threshold = dc * 10f64.powf(-level_db.abs() / 20.0);
    let last = (0..=nfft / 2).rev().find(|&k| buf[k].norm() >= threshold).unwrap_or(0);
    last as f64 / nfft as f64 * samples_per_symbol as f64
}
