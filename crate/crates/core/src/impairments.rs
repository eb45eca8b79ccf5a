//! Hardware impairments as pure envelope transforms.
//!
//! Each transform is the identity at its zero parameter (returned as a clone,
//! so bit-exact), and stochastic transforms are fully determined by their seed.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{fractional_delay, interpolate_at, ComplexEnvelope};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x' = (1 + eps) x`.
pub fn amplitude_error(env: &ComplexEnvelope, eps: f64) -> Result<ComplexEnvelope> {
    if !(eps > -1.0) {
        return Err(Error::param("eps", format!("must exceed -1, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(env.clone());
    }
    let g = 1.0 + eps;
    Ok(env.map(|x| x * g))
}

/// `x' = x exp(j phi)`.
pub fn static_phase_error(env: &ComplexEnvelope, phi: f64) -> ComplexEnvelope {
    if phi == 0.0 {
        return env.clone();
    }
    let rot = Complex64::from_polar(1.0, phi);
    env.map(|x| x * rot)
}

/// Wiener phase noise: `theta[0] = 0`, increments of variance `rate / fs`.
pub fn phase_noise(env: &ComplexEnvelope, rate: f64, seed: u64) -> Result<ComplexEnvelope> {
    if !(rate >= 0.0) {
        return Err(Error::param("rate", format!("must be nonnegative, got {rate}")));
    }
    if rate == 0.0 {
        return Ok(env.clone());
    }
    let walk = random_walk(env.len(), rate / env.sample_rate(), seed);
    Ok(env.with_samples(
        env.samples()
            .iter()
            .zip(&walk)
            .map(|(&x, &t)| x * Complex64::from_polar(1.0, t))
            .collect(),
    ))
}

/// Zero-start Gaussian random walk with the given per-step variance.
pub fn random_walk(len: usize, step_variance: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, step_variance.sqrt()).expect("finite variance");
    let mut theta = 0.0;
    (0..len)
        .map(|k| {
            if k > 0 {
                theta += normal.sample(&mut r);
            }
            theta
        })
        .collect()
}

/// Widely-linear coefficients of the I/Q imbalance: `x' = mu x + nu conj(x)`.
pub fn iq_coefficients(gain: f64, skew: f64) -> (Complex64, Complex64) {
    let a = 1.0 + gain / 2.0;
    let b = 1.0 - gain / 2.0;
    let mu = (Complex64::new(a, 0.0) + Complex64::from_polar(b, skew)) / 2.0;
    let nu = (Complex64::new(a, 0.0) - Complex64::from_polar(b, -skew)) / 2.0;
    (mu, nu)
}

/// Gain split as `+-gain/2` between I and Q, with the quadrature skew on Q:
/// `I' = (1 + g/2) I`, `Q' = (1 - g/2) (Q cos phi + I sin phi)`.
pub fn iq_imbalance(env: &ComplexEnvelope, gain: f64, skew: f64) -> Result<ComplexEnvelope> {
    if !(gain.abs() < 1.0) {
        return Err(Error::param("gain", format!("|g| must be below 1, got {gain}")));
    }
    if gain == 0.0 && skew == 0.0 {
        return Ok(env.clone());
    }
    let (s, c) = skew.sin_cos();
    let gi = 1.0 + gain / 2.0;
    let gq = 1.0 - gain / 2.0;
    Ok(env.map(|x| Complex64::new(gi * x.re, gq * (x.im * c + x.re * s))))
}

/// `x' = x + c`.
pub fn lo_feedthrough(env: &ComplexEnvelope, c: Complex64) -> ComplexEnvelope {
    if c == Complex64::new(0.0, 0.0) {
        return env.clone();
    }
    env.map(|x| x + c)
}

/// First-order low-pass on I and Q (bilinear transform with prewarped corner).
///
/// The filter state starts at the steady state of the first sample, so a
/// constant input passes unchanged and DC gain is one.
pub fn bandwidth_limit(env: &ComplexEnvelope, cutoff: f64) -> Result<ComplexEnvelope> {
    let fs = env.sample_rate();
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::param(
            "cutoff",
            format!("must lie in (0, {}), got {cutoff}", fs / 2.0),
        ));
    }
    let k = (PI * cutoff / fs).tan();
    let b0 = k / (1.0 + k);
    let a1 = (k - 1.0) / (k + 1.0);
    let Some(&first) = env.samples().first() else {
        return Ok(env.clone());
    };
    let mut x_prev = first;
    let mut y_prev = first;
    let out = env
        .samples()
        .iter()
        .map(|&x| {
            let y = (x + x_prev) * b0 - y_prev * a1;
            x_prev = x;
            y_prev = y;
            y
        })
        .collect();
    Ok(env.with_samples(out))
}

/// Symmetric mid-tread quantizer with `2^(bits-1) - 1` positive codes, so the
/// extreme codes sit exactly at `+-full_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub step: f64,
    pub max_code: i64,
}

impl Quantizer {
    pub fn new(bits: u32, full_scale: f64) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::param("bits", format!("must lie in [2, 16], got {bits}")));
        }
        if !(full_scale > 0.0) {
            return Err(Error::param("full_scale", "must be positive"));
        }
        let max_code = (1i64 << (bits - 1)) - 1;
        Ok(Self {
            step: full_scale / max_code as f64,
            max_code,
        })
    }

    pub fn code(&self, x: f64) -> i64 {
        ((x / self.step).round() as i64).clamp(-self.max_code, self.max_code)
    }

    pub fn level(&self, code: i64) -> f64 {
        code as f64 * self.step
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.level(self.code(x))
    }
}

/// Quantizes I and Q independently.
pub fn quantize(env: &ComplexEnvelope, bits: u32, full_scale: f64) -> Result<ComplexEnvelope> {
    let q = Quantizer::new(bits, full_scale)?;
    Ok(env.map(|x| Complex64::new(q.apply(x.re), q.apply(x.im))))
}

/// Re-evaluates sample `k` at `t_k + delta_k`, `delta_k ~ N(0, sigma^2)`.
pub fn sample_jitter(env: &ComplexEnvelope, sigma: f64, seed: u64) -> Result<ComplexEnvelope> {
    let fs = env.sample_rate();
    if !(sigma >= 0.0 && sigma < 0.1 / fs) {
        return Err(Error::param(
            "sigma",
            format!("must lie in [0, {:e}) s, got {sigma:e}", 0.1 / fs),
        ));
    }
    if sigma == 0.0 {
        return Ok(env.clone());
    }
    let mut r = rng(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let samples = env.samples();
    let out = (0..samples.len())
        .map(|k| interpolate_at(samples, k as f64 + normal.sample(&mut r) * fs))
        .collect();
    Ok(env.with_samples(out))
}

/// Odd gain polynomial `G(A) = c[0] A + c[1] A^3 + ...`.
pub fn eval_odd(coeffs: &[f64], a: f64) -> f64 {
    let a2 = a * a;
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * a2 + c) * a
}

/// Power series `p[0] + p[1] A + p[2] A^2 + ...`.
pub fn eval_poly(coeffs: &[f64], a: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * a + c)
}

/// Whether `G` is nondecreasing on `[0, max_amp]`, checked on a fine grid.
pub fn is_monotone_odd(coeffs: &[f64], max_amp: f64) -> bool {
    let n = 1024;
    let mut prev = eval_odd(coeffs, 0.0);
    (1..=n).all(|k| {
        let g = eval_odd(coeffs, max_amp * k as f64 / n as f64);
        let ok = g >= prev - 1e-12;
        prev = g;
        ok
    })
}

fn is_identity_am(gain_poly: &[f64], phase_poly: &[f64]) -> bool {
    let gain_id = gain_poly.first() == Some(&1.0) && gain_poly[1..].iter().all(|c| *c == 0.0);
    gain_id && phase_poly.iter().all(|c| *c == 0.0)
}

/// Memoryless AM-AM / AM-PM: `A' = G(A)`, `phi' = phi + Phi(A)`.
pub fn am_ampm(env: &ComplexEnvelope, gain_poly: &[f64], phase_poly: &[f64]) -> Result<ComplexEnvelope> {
    if gain_poly.is_empty() {
        return Err(Error::param("gain_poly", "needs at least the linear coefficient"));
    }
    if is_identity_am(gain_poly, phase_poly) {
        return Ok(env.clone());
    }
    let peak = env.samples().iter().fold(0.0_f64, |m, x| m.max(x.norm()));
    if !is_monotone_odd(gain_poly, peak) {
        log::warn!("AM-AM curve is not monotone on [0, {peak}]");
    }
    Ok(env.map(|x| {
        let a = x.norm();
        if a == 0.0 {
            return Complex64::new(eval_odd(gain_poly, 0.0), 0.0);
        }
        let g = eval_odd(gain_poly, a) / a;
        x * Complex64::from_polar(g, eval_poly(phase_poly, a))
    }))
}

/// Off-state carrier leakage.
///
/// ON samples pass unchanged. OFF samples become the most recent ON sample
/// scaled by `10^(-off_ratio_db/20)` (zero before the first ON sample).
/// `off_ratio_db = None` means perfect isolation.
pub fn onoff_leakage(env: &ComplexEnvelope, off_ratio_db: Option<f64>, mask: &[bool]) -> Result<ComplexEnvelope> {
    if mask.len() != env.len() {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: env.len(),
        });
    }
    if let Some(r) = off_ratio_db {
        if !(r > 0.0) {
            return Err(Error::param("off_ratio_db", format!("must be positive, got {r}")));
        }
    }
    if mask.iter().all(|m| *m) {
        return Ok(env.clone());
    }
    let scale = off_ratio_db.map_or(0.0, |r| 10f64.powf(-r / 20.0));
    let mut template = Complex64::new(0.0, 0.0);
    let out = env
        .samples()
        .iter()
        .zip(mask)
        .map(|(&x, &on)| {
            if on {
                template = x;
                x
            } else {
                template * scale
            }
        })
        .collect();
    Ok(env.with_samples(out))
}

/// ON wherever `|x| > threshold`.
pub fn threshold_mask(env: &ComplexEnvelope, threshold: f64) -> Vec<bool> {
    env.samples().iter().map(|x| x.norm() > threshold).collect()
}

/// Delays I by `tau_i` and Q by `tau_q` independently.
pub fn path_skew(env: &ComplexEnvelope, tau_i: f64, tau_q: f64) -> Result<ComplexEnvelope> {
    if tau_i == 0.0 && tau_q == 0.0 {
        return Ok(env.clone());
    }
    let i = fractional_delay(&env.map(|x| Complex64::new(x.re, 0.0)), tau_i)?;
    let q = fractional_delay(&env.map(|x| Complex64::new(x.im, 0.0)), tau_q)?;
    i.zip_with(&q, |a, b| Complex64::new(a.re, b.re))
}

/// Error-budget bucket an impairment contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum BudgetTerm {
    Bw,
    Amp,
    Phase,
    Pn,
    IqLo,
}

impl BudgetTerm {
    pub const ALL: [BudgetTerm; 5] = [
        BudgetTerm::Bw,
        BudgetTerm::Amp,
        BudgetTerm::Phase,
        BudgetTerm::Pn,
        BudgetTerm::IqLo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BudgetTerm::Bw => "bw",
            BudgetTerm::Amp => "amp",
            BudgetTerm::Phase => "phase",
            BudgetTerm::Pn => "pn",
            BudgetTerm::IqLo => "iq_lo",
        }
    }
}
