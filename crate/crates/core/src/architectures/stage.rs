use std::f64::consts::PI;

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impairments::{self as imp, BudgetTerm, Quantizer};
use crate::signal::{fractional_delay, to_polar, ComplexEnvelope};

fn default_full_scale() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    1e-9
}

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

fn default_true() -> bool {
    true
}

/// Per-cell trim of a DAC: corrections quantized to `bits` over `+-range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Trim {
    pub bits: u32,
    /// Fractional correction range, e.g. 0.2 for +-20%.
    pub range: f64,
}

/// Additive spur tone relative to the output RMS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Spur {
    pub offset_hz: f64,
    pub level_dbc: f64,
}

/// Gain and phase perturbation of one amplitude state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StateError {
    /// Nominal envelope amplitude identifying the state.
    pub level: f64,
    #[serde(default)]
    pub gain: f64,
    #[serde(default)]
    pub phase: f64,
}

/// One stage of a transmit chain.
///
/// Impairment variants wrap the operations in [`crate::impairments`]; the
/// remaining variants are the structural blocks of the four architectures and
/// the correction stages inserted by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSpec {
    AmplitudeError {
        eps: f64,
    },
    StaticPhaseError {
        phi: f64,
    },
    PhaseNoise {
        rate: f64,
        seed: u64,
    },
    IqImbalance {
        gain: f64,
        skew: f64,
    },
    LoFeedthrough {
        #[schemars(with = "[f64; 2]")]
        offset: Complex64,
    },
    BandwidthLimit {
        cutoff: f64,
    },
    Quantize {
        bits: u32,
        #[serde(default = "default_full_scale")]
        full_scale: f64,
    },
    SampleJitter {
        sigma: f64,
        seed: u64,
    },
    AmAmPm {
        gain_poly: Vec<f64>,
        #[serde(default)]
        phase_poly: Vec<f64>,
    },
    /// Leaks a scaled carrier into samples whose input magnitude is at or
    /// below `threshold`. `off_ratio_db` absent means perfect isolation;
    /// `cancel` is a feed-forward tone summed into the same OFF samples.
    OnOffLeakage {
        #[serde(default)]
        off_ratio_db: Option<f64>,
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "zero")]
        #[schemars(with = "[f64; 2]")]
        cancel: Complex64,
    },
    PathSkew {
        tau_i: f64,
        tau_q: f64,
    },
    /// Fractional gain error on each path: `I' = (1 + gain_i) I`.
    PathGain {
        gain_i: f64,
        gain_q: f64,
    },
    /// Piecewise-linear code-to-amplitude map; input magnitude is read as a
    /// code in `[0, full_code]` over equally spaced table entries.
    AmplitudeTable {
        table: Vec<f64>,
        #[serde(default = "default_full_scale")]
        full_code: f64,
    },
    /// Amplitude and phase paths with independent resolution, bandwidth and
    /// delay, recombined as `A exp(j phi)`.
    Polar {
        #[serde(default)]
        amp_bits: Option<u32>,
        #[serde(default = "default_full_scale")]
        amp_full_scale: f64,
        #[serde(default)]
        phase_step: Option<f64>,
        #[serde(default)]
        amp_cutoff: Option<f64>,
        #[serde(default)]
        phase_cutoff: Option<f64>,
        #[serde(default)]
        phase_delay: f64,
        #[serde(default)]
        amp_delay: f64,
    },
    /// Quantize with frozen per-code gain error, hold for `hold` samples, then
    /// reconstruction low-pass.
    Dac {
        bits: u32,
        #[serde(default = "default_full_scale")]
        full_scale: f64,
        #[serde(default = "one")]
        hold: usize,
        #[serde(default)]
        mismatch_sigma: f64,
        seed: u64,
        #[serde(default)]
        trim: Option<Trim>,
        #[serde(default)]
        recon_cutoff: Option<f64>,
    },
    /// Frequency multiplication by `multiplier` applied to the phase track.
    ///
    /// With `predivide` the input phase is first divided by the multiplier so
    /// data phase passes unchanged while anything done by the `fundamental`
    /// stages is multiplied.
    Harmonic {
        multiplier: u32,
        #[serde(default)]
        predivide: bool,
        #[serde(default)]
        fundamental: Vec<StageSpec>,
        #[serde(default)]
        rise_fall: f64,
        #[serde(default)]
        spurs: Vec<Spur>,
        #[serde(default = "default_true")]
        constant_impedance: bool,
        #[serde(default)]
        state_errors: Vec<StateError>,
    },
    /// `[I'; Q'] = matrix [I; Q] + offset`.
    IqCorrection {
        matrix: [[f64; 2]; 2],
        #[schemars(with = "[f64; 2]")]
        offset: Complex64,
    },
    Predistort {
        gain_poly: Vec<f64>,
        #[serde(default)]
        phase_poly: Vec<f64>,
    },
}

fn one() -> usize {
    1
}

impl StageSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            StageSpec::AmplitudeError { .. } => "amplitude_error",
            StageSpec::StaticPhaseError { .. } => "static_phase_error",
            StageSpec::PhaseNoise { .. } => "phase_noise",
            StageSpec::IqImbalance { .. } => "iq_imbalance",
            StageSpec::LoFeedthrough { .. } => "lo_feedthrough",
            StageSpec::BandwidthLimit { .. } => "bandwidth_limit",
            StageSpec::Quantize { .. } => "quantize",
            StageSpec::SampleJitter { .. } => "sample_jitter",
            StageSpec::AmAmPm { .. } => "am_am_pm",
            StageSpec::OnOffLeakage { .. } => "on_off_leakage",
            StageSpec::PathSkew { .. } => "path_skew",
            StageSpec::PathGain { .. } => "path_gain",
            StageSpec::AmplitudeTable { .. } => "amplitude_table",
            StageSpec::Polar { .. } => "polar",
            StageSpec::Dac { .. } => "dac",
            StageSpec::Harmonic { .. } => "harmonic",
            StageSpec::IqCorrection { .. } => "iq_correction",
            StageSpec::Predistort { .. } => "predistort",
        }
    }

    /// Error-budget bucket of this stage, if it maps onto one.
    pub fn budget_term(&self) -> Option<BudgetTerm> {
        match self {
            StageSpec::AmplitudeError { .. } => Some(BudgetTerm::Amp),
            StageSpec::StaticPhaseError { .. } => Some(BudgetTerm::Phase),
            StageSpec::PhaseNoise { .. } | StageSpec::SampleJitter { .. } => Some(BudgetTerm::Pn),
            StageSpec::BandwidthLimit { .. } => Some(BudgetTerm::Bw),
            StageSpec::IqImbalance { .. }
            | StageSpec::LoFeedthrough { .. }
            | StageSpec::PathSkew { .. }
            | StageSpec::PathGain { .. } => Some(BudgetTerm::IqLo),
            _ => None,
        }
    }

    /// Range checks that do not need a signal.
    pub fn validate(&self) -> Result<()> {
        match self {
            StageSpec::AmplitudeError { eps } if !(*eps > -1.0) => {
                Err(Error::param("eps", format!("must exceed -1, got {eps}")))
            }
            StageSpec::PhaseNoise { rate, .. } if !(*rate >= 0.0) => {
                Err(Error::param("rate", "must be nonnegative"))
            }
            StageSpec::IqImbalance { gain, .. } if !(gain.abs() < 1.0) => {
                Err(Error::param("gain", format!("|g| must be below 1, got {gain}")))
            }
            StageSpec::BandwidthLimit { cutoff } if !(*cutoff > 0.0) => {
                Err(Error::param("cutoff", "must be positive"))
            }
            StageSpec::Quantize { bits, full_scale } => Quantizer::new(*bits, *full_scale).map(|_| ()),
            StageSpec::SampleJitter { sigma, .. } if !(*sigma >= 0.0) => {
                Err(Error::param("sigma", "must be nonnegative"))
            }
            StageSpec::AmAmPm { gain_poly, .. } | StageSpec::Predistort { gain_poly, .. }
                if gain_poly.is_empty() =>
            {
                Err(Error::param("gain_poly", "needs at least the linear coefficient"))
            }
            StageSpec::OnOffLeakage {
                off_ratio_db: Some(r),
                ..
            } if !(*r > 0.0) => Err(Error::param("off_ratio_db", "must be positive")),
            StageSpec::AmplitudeTable { table, full_code } => {
                if table.len() < 2 {
                    Err(Error::param("table", "needs at least two entries"))
                } else if !(*full_code > 0.0) {
                    Err(Error::param("full_code", "must be positive"))
                } else {
                    Ok(())
                }
            }
            StageSpec::Polar {
                amp_bits, phase_step, ..
            } => {
                if let Some(b) = amp_bits {
                    if !(4..=16).contains(b) {
                        return Err(Error::param("amp_bits", format!("must lie in [4, 16], got {b}")));
                    }
                }
                if let Some(s) = phase_step {
                    if !(*s > 0.0) {
                        return Err(Error::param("phase_step", "must be positive"));
                    }
                }
                Ok(())
            }
            StageSpec::Dac {
                bits,
                full_scale,
                hold,
                mismatch_sigma,
                trim,
                ..
            } => {
                if *bits < 4 {
                    return Err(Error::param("bits", format!("DAC needs at least 4 bits, got {bits}")));
                }
                Quantizer::new(*bits, *full_scale)?;
                if *hold == 0 {
                    return Err(Error::param("hold", "must be at least 1"));
                }
                if !(*mismatch_sigma >= 0.0) {
                    return Err(Error::param("mismatch_sigma", "must be nonnegative"));
                }
                if let Some(t) = trim {
                    if !(1..=24).contains(&t.bits) || !(t.range > 0.0) {
                        return Err(Error::param("trim", "bits must lie in [1, 24] and range be positive"));
                    }
                }
                Ok(())
            }
            StageSpec::Harmonic {
                multiplier,
                fundamental,
                rise_fall,
                ..
            } => {
                if !(2..=4).contains(multiplier) {
                    return Err(Error::param(
                        "multiplier",
                        format!("must be 2, 3 or 4, got {multiplier}"),
                    ));
                }
                if !(*rise_fall >= 0.0) {
                    return Err(Error::param("rise_fall", "must be nonnegative"));
                }
                fundamental.iter().try_for_each(StageSpec::validate)
            }
            StageSpec::IqCorrection { matrix, .. } => {
                let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
                if det.abs() < 1e-12 {
                    Err(Error::param("matrix", "correction matrix is singular"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, env: &ComplexEnvelope) -> Result<ComplexEnvelope> {
        match self {
            StageSpec::AmplitudeError { eps } => imp::amplitude_error(env, *eps),
            StageSpec::StaticPhaseError { phi } => Ok(imp::static_phase_error(env, *phi)),
            StageSpec::PhaseNoise { rate, seed } => imp::phase_noise(env, *rate, *seed),
            StageSpec::IqImbalance { gain, skew } => imp::iq_imbalance(env, *gain, *skew),
            StageSpec::LoFeedthrough { offset } => Ok(imp::lo_feedthrough(env, *offset)),
            StageSpec::BandwidthLimit { cutoff } => imp::bandwidth_limit(env, *cutoff),
            StageSpec::Quantize { bits, full_scale } => imp::quantize(env, *bits, *full_scale),
            StageSpec::SampleJitter { sigma, seed } => imp::sample_jitter(env, *sigma, *seed),
            StageSpec::AmAmPm { gain_poly, phase_poly } | StageSpec::Predistort { gain_poly, phase_poly } => {
                imp::am_ampm(env, gain_poly, phase_poly)
            }
            StageSpec::OnOffLeakage {
                off_ratio_db,
                threshold,
                cancel,
            } => {
                let mask = imp::threshold_mask(env, *threshold);
                let leaky = imp::onoff_leakage(env, *off_ratio_db, &mask)?;
                if *cancel == zero() {
                    return Ok(leaky);
                }
                let out = leaky
                    .samples()
                    .iter()
                    .zip(&mask)
                    .map(|(&x, &on)| if on { x } else { x + cancel })
                    .collect();
                Ok(env.with_samples(out))
            }
            StageSpec::PathSkew { tau_i, tau_q } => imp::path_skew(env, *tau_i, *tau_q),
            StageSpec::PathGain { gain_i, gain_q } => {
                if *gain_i == 0.0 && *gain_q == 0.0 {
                    return Ok(env.clone());
                }
                let (a, b) = (1.0 + gain_i, 1.0 + gain_q);
                Ok(env.map(|x| Complex64::new(a * x.re, b * x.im)))
            }
            StageSpec::AmplitudeTable { table, full_code } => {
                self.validate()?;
                Ok(env.map(|x| {
                    let a = x.norm();
                    let mapped = table_lookup(table, a / full_code);
                    if a == 0.0 {
                        Complex64::new(mapped, 0.0)
                    } else {
                        x * (mapped / a)
                    }
                }))
            }
            StageSpec::Polar { .. } => self.apply_polar(env),
            StageSpec::Dac { .. } => self.apply_dac(env),
            StageSpec::Harmonic { .. } => self.apply_harmonic(env),
            StageSpec::IqCorrection { matrix, offset } => {
                let m = matrix;
                Ok(env.map(|x| {
                    Complex64::new(
                        m[0][0] * x.re + m[0][1] * x.im + offset.re,
                        m[1][0] * x.re + m[1][1] * x.im + offset.im,
                    )
                }))
            }
        }
    }

    fn apply_polar(&self, env: &ComplexEnvelope) -> Result<ComplexEnvelope> {
        let StageSpec::Polar {
            amp_bits,
            amp_full_scale,
            phase_step,
            amp_cutoff,
            phase_cutoff,
            phase_delay,
            amp_delay,
        } = self
        else {
            unreachable!()
        };
        self.validate()?;
        let tracks = to_polar(env);
        let fs = env.sample_rate();

        let mut amp: Vec<f64> = tracks.amplitude.clone();
        if let Some(bits) = amp_bits {
            let levels = ((1u64 << bits) - 1) as f64;
            let step = amp_full_scale / levels;
            for a in &mut amp {
                *a = ((*a / step).round().clamp(0.0, levels)) * step;
            }
        }
        let mut amp_env = ComplexEnvelope::new(amp.iter().map(|&a| Complex64::new(a, 0.0)).collect(), fs)?;
        if let Some(fc) = amp_cutoff {
            amp_env = imp::bandwidth_limit(&amp_env, *fc)?;
        }
        amp_env = fractional_delay(&amp_env, *amp_delay)?;

        let phasor: Vec<Complex64> = tracks
            .phase
            .iter()
            .map(|&p| {
                let p = match phase_step {
                    Some(s) => (p / s).round() * s,
                    None => p,
                };
                Complex64::from_polar(1.0, p)
            })
            .collect();
        let mut ph_env = ComplexEnvelope::new(phasor, fs)?;
        if let Some(fc) = phase_cutoff {
            ph_env = imp::bandwidth_limit(&ph_env, *fc)?;
        }
        ph_env = fractional_delay(&ph_env, *phase_delay)?;

        // untouched paths recombine without renormalizing so the identity
        // configuration stays within round-trip precision
        let renormalize = phase_cutoff.is_some() || *phase_delay != 0.0;
        amp_env.zip_with(&ph_env, |a, p| {
            let unit = if renormalize && p.norm() > 0.0 { p / p.norm() } else { p };
            unit * a.re
        })
    }

    fn apply_dac(&self, env: &ComplexEnvelope) -> Result<ComplexEnvelope> {
        let StageSpec::Dac {
            bits,
            full_scale,
            hold,
            mismatch_sigma,
            seed,
            trim,
            recon_cutoff,
        } = self
        else {
            unreachable!()
        };
        self.validate()?;
        let q = Quantizer::new(*bits, *full_scale)?;
        let gains = code_gains(&q, *mismatch_sigma, *seed, trim.as_ref());
        let level = |x: f64| {
            let c = q.code(x);
            q.level(c) * gains[(c + q.max_code) as usize]
        };
        let samples = env.samples();
        let out = (0..samples.len())
            .map(|k| {
                let x = samples[k - k % hold];
                Complex64::new(level(x.re), level(x.im))
            })
            .collect();
        let out = env.with_samples(out);
        match recon_cutoff {
            Some(fc) => imp::bandwidth_limit(&out, *fc),
            None => Ok(out),
        }
    }

    fn apply_harmonic(&self, env: &ComplexEnvelope) -> Result<ComplexEnvelope> {
        let StageSpec::Harmonic {
            multiplier,
            predivide,
            fundamental,
            rise_fall,
            spurs,
            constant_impedance,
            state_errors,
        } = self
        else {
            unreachable!()
        };
        self.validate()?;
        let m = *multiplier as f64;
        let mut x = if *predivide {
            let tracks = to_polar(env);
            env.with_samples(
                tracks
                    .amplitude
                    .iter()
                    .zip(&tracks.phase)
                    .map(|(&a, &p)| Complex64::from_polar(a, p / m))
                    .collect(),
            )
        } else {
            env.clone()
        };
        for stage in fundamental {
            x = stage.apply(&x)?;
        }
        if !constant_impedance && !state_errors.is_empty() {
            x = x.map(|s| {
                let a = s.norm();
                let st = state_errors
                    .iter()
                    .min_by(|p, q| (p.level - a).abs().total_cmp(&(q.level - a).abs()))
                    .expect("nonempty table");
                s * Complex64::from_polar(1.0 + st.gain, st.phase)
            });
        }
        let tracks = to_polar(&x);
        let mut amp = tracks.amplitude;
        if *rise_fall > 0.0 {
            let alpha = 1.0 - (-x.dt() / rise_fall).exp();
            let mut state = amp.first().copied().unwrap_or(0.0);
            for a in &mut amp {
                state += alpha * (*a - state);
                *a = state;
            }
        }
        let mut out: Vec<Complex64> = amp
            .iter()
            .zip(&tracks.phase)
            .map(|(&a, &p)| Complex64::from_polar(a, m * p))
            .collect();
        if !spurs.is_empty() {
            let rms = (out.iter().map(|s| s.norm_sqr()).sum::<f64>() / out.len().max(1) as f64).sqrt();
            let dt = x.dt();
            for spur in spurs {
                let amp = rms * 10f64.powf(spur.level_dbc / 20.0);
                for (k, s) in out.iter_mut().enumerate() {
                    *s += Complex64::from_polar(amp, 2.0 * PI * spur.offset_hz * k as f64 * dt);
                }
            }
        }
        Ok(env.with_samples(out))
    }
}

/// Linear interpolation over equally spaced table entries on `[0, 1]`,
/// clamped at the ends.
pub(crate) fn table_lookup(table: &[f64], u: f64) -> f64 {
    let last = table.len() - 1;
    let pos = (u * last as f64).clamp(0.0, last as f64);
    let i = (pos.floor() as usize).min(last - 1);
    let frac = pos - i as f64;
    table[i] + frac * (table[i + 1] - table[i])
}

/// Multiplicative gain `1 + e` for every code from `-max_code` to `max_code`.
fn code_gains(q: &Quantizer, sigma: f64, seed: u64, trim: Option<&Trim>) -> Vec<f64> {
    let n = (2 * q.max_code + 1) as usize;
    if sigma == 0.0 {
        return vec![1.0; n];
    }
    let mut rng = imp::rng(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    (0..n)
        .map(|_| {
            let e: f64 = normal.sample(&mut rng);
            let residual = match trim {
                Some(t) => {
                    let step = 2.0 * t.range / (1u64 << t.bits) as f64;
                    let correction = ((-e / step).round() * step).clamp(-t.range, t.range);
                    e + correction
                }
                None => e,
            };
            1.0 + residual
        })
        .collect()
}
