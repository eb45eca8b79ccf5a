//! Transmit chains: ordered stage lists modelling Cartesian, polar, RF-DAC and
//! harmonic transmitters, plus waveform synthesis through a chain.

mod stage;

pub use stage::{Spur, StageSpec, StateError, Trim};

use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::{
    gate_envelope, map_bits, shape_symbols, Constellation, GateEnvelopeSpec, PulseShape, SymbolStream,
};
use crate::qubit::{DriveWaveform, GateSpec};
use crate::signal::ComplexEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Cartesian,
    Polar,
    Rfdac,
    Harmonic,
}

/// Ordered stages applied to an envelope. Immutable once built and cheap to
/// share between threads.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TxChain {
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

impl TxChain {
    pub fn new(architecture: Architecture, stages: Vec<StageSpec>) -> Self {
        Self { architecture, stages }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with_stage(mut self, s: StageSpec) -> Self {
        self.stages.push(s);
        self
    }

    /// Same architecture with a different stage list.
    pub fn with_stages(&self, stages: Vec<StageSpec>) -> Self {
        Self {
            architecture: self.architecture,
            stages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    pub fn run(&self, env: &ComplexEnvelope) -> Result<ComplexEnvelope> {
        run_chain(self, env)
    }
}

pub fn run_chain(chain: &TxChain, env: &ComplexEnvelope) -> Result<ComplexEnvelope> {
    let mut x = env.clone();
    for s in &chain.stages {
        x = s.apply(&x)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub bits: u32,
    pub full_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CartesianConfig {
    pub gain_i: f64,
    pub gain_q: f64,
    pub tau_i: f64,
    pub tau_q: f64,
    pub iq_gain: f64,
    pub iq_skew: f64,
    #[schemars(with = "[f64; 2]")]
    pub lo_offset: Complex64,
    pub cutoff: Option<f64>,
    pub quantizer: Option<QuantizerConfig>,
}

/// Split I/Q, per-path gain and delay, bandwidth, quantization, then
/// recombination with I/Q imbalance and LO feedthrough. Identity settings
/// contribute no stage.
pub fn cartesian_chain(cfg: &CartesianConfig) -> Result<TxChain> {
    let mut stages = Vec::new();
    if cfg.gain_i != 0.0 || cfg.gain_q != 0.0 {
        stages.push(StageSpec::PathGain {
            gain_i: cfg.gain_i,
            gain_q: cfg.gain_q,
        });
    }
    if cfg.tau_i != 0.0 || cfg.tau_q != 0.0 {
        stages.push(StageSpec::PathSkew {
            tau_i: cfg.tau_i,
            tau_q: cfg.tau_q,
        });
    }
    if let Some(fc) = cfg.cutoff {
        stages.push(StageSpec::BandwidthLimit { cutoff: fc });
    }
    if let Some(q) = cfg.quantizer {
        stages.push(StageSpec::Quantize {
            bits: q.bits,
            full_scale: q.full_scale,
        });
    }
    if cfg.iq_gain != 0.0 || cfg.iq_skew != 0.0 {
        stages.push(StageSpec::IqImbalance {
            gain: cfg.iq_gain,
            skew: cfg.iq_skew,
        });
    }
    if cfg.lo_offset != Complex64::new(0.0, 0.0) {
        stages.push(StageSpec::LoFeedthrough { offset: cfg.lo_offset });
    }
    let chain = TxChain::new(Architecture::Cartesian, stages);
    chain.validate()?;
    Ok(chain)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PolarConfig {
    pub amp_bits: Option<u32>,
    pub amp_full_scale: Option<f64>,
    pub phase_step: Option<f64>,
    /// Phase-path delay relative to the amplitude path, seconds.
    pub delay_mismatch: f64,
    pub amp_cutoff: Option<f64>,
    pub phase_cutoff: Option<f64>,
    pub off_ratio_db: Option<f64>,
}

/// Amplitude and phase paths recombined, followed by off-state leakage when
/// a finite on/off ratio is given.
pub fn polar_chain(cfg: &PolarConfig) -> Result<TxChain> {
    let mut stages = vec![StageSpec::Polar {
        amp_bits: cfg.amp_bits,
        amp_full_scale: cfg.amp_full_scale.unwrap_or(1.0),
        phase_step: cfg.phase_step,
        amp_cutoff: cfg.amp_cutoff,
        phase_cutoff: cfg.phase_cutoff,
        phase_delay: cfg.delay_mismatch,
        amp_delay: 0.0,
    }];
    if let Some(r) = cfg.off_ratio_db {
        stages.push(StageSpec::OnOffLeakage {
            off_ratio_db: Some(r),
            threshold: 1e-9,
            cancel: Complex64::new(0.0, 0.0),
        });
    }
    let chain = TxChain::new(Architecture::Polar, stages);
    chain.validate()?;
    Ok(chain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RfdacConfig {
    pub bits: u32,
    #[serde(default = "unit")]
    pub full_scale: f64,
    /// Simulation samples per DAC update.
    #[serde(default = "one")]
    pub hold: usize,
    #[serde(default)]
    pub mismatch_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub trim: Option<Trim>,
    #[serde(default)]
    pub recon_cutoff: Option<f64>,
}

fn unit() -> f64 {
    1.0
}

fn one() -> usize {
    1
}

pub fn rfdac_chain(cfg: &RfdacConfig) -> Result<TxChain> {
    let chain = TxChain::new(
        Architecture::Rfdac,
        vec![StageSpec::Dac {
            bits: cfg.bits,
            full_scale: cfg.full_scale,
            hold: cfg.hold,
            mismatch_sigma: cfg.mismatch_sigma,
            seed: cfg.seed,
            trim: cfg.trim,
            recon_cutoff: cfg.recon_cutoff,
        }],
    );
    chain.validate()?;
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct HarmonicConfig {
    pub multiplier: u32,
    #[serde(default)]
    pub predivide: bool,
    #[serde(default)]
    pub fundamental: Vec<StageSpec>,
    #[serde(default)]
    pub spurs: Vec<Spur>,
    #[serde(default)]
    pub rise_fall: f64,
    #[serde(default = "yes")]
    pub constant_impedance: bool,
    #[serde(default)]
    pub state_errors: Vec<StateError>,
}

fn yes() -> bool {
    true
}

pub fn harmonic_chain(cfg: &HarmonicConfig) -> Result<TxChain> {
    let chain = TxChain::new(
        Architecture::Harmonic,
        vec![StageSpec::Harmonic {
            multiplier: cfg.multiplier,
            predivide: cfg.predivide,
            fundamental: cfg.fundamental.clone(),
            rise_fall: cfg.rise_fall,
            spurs: cfg.spurs.clone(),
            constant_impedance: cfg.constant_impedance,
            state_errors: cfg.state_errors.clone(),
        }],
    );
    chain.validate()?;
    Ok(chain)
}

/// Transmitted envelope and the ideal symbols it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct CommWaveform {
    pub tx: ComplexEnvelope,
    pub reference: SymbolStream,
}

/// Bits to symbols to shaped envelope to chain.
pub fn synth_comm_waveform(
    chain: &TxChain,
    c: &Constellation,
    bits: &[u8],
    shape: &PulseShape,
    symbol_period: f64,
) -> Result<CommWaveform> {
    let reference = map_bits(bits, c, symbol_period)?;
    let shaped = shape_symbols(&reference, shape)?;
    let tx = run_chain(chain, &shaped)?;
    Ok(CommWaveform { tx, reference })
}

/// Gate envelope rotated onto the gate axis and pushed through the chain.
pub fn synth_qubit_pulse(
    chain: &TxChain,
    gate: &GateSpec,
    genv: &GateEnvelopeSpec,
    sample_rate: f64,
) -> Result<DriveWaveform> {
    gate.validate()?;
    let base = gate_envelope(genv, sample_rate)?;
    let axis = Complex64::from_polar(1.0, gate.axis_phase);
    let rotated = if gate.axis_phase == 0.0 { base } else { base.map(|x| x * axis) };
    let envelope = run_chain(chain, &rotated)?;
    if envelope.samples().iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
        return Err(Error::param("envelope", "chain produced non-finite samples"));
    }
    Ok(DriveWaveform {
        envelope,
        carrier_phase: gate.axis_phase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::{build_constellation, GateShape, PulseKind, Scheme};
    use std::f64::consts::PI;

    fn qam16() -> Constellation {
        build_constellation(&Scheme::SquareQam { order: 16 }).unwrap()
    }

    /// Every 16-QAM label once per block so the reference is exactly unit RMS.
    fn balanced_bits(blocks: usize) -> Vec<u8> {
        (0..blocks * 16)
            .flat_map(|k| {
                let label = (k * 7 + k / 16) % 16;
                (0..4).rev().map(move |b| ((label >> b) & 1) as u8)
            })
            .collect()
    }

    #[test]
    fn identity_cartesian_is_bit_exact() {
        let chain = cartesian_chain(&CartesianConfig::default()).unwrap();
        assert!(chain.stages.is_empty());
        let e = ComplexEnvelope::new(vec![Complex64::new(0.3, 0.1); 10], 1.0).unwrap();
        assert_eq!(run_chain(&chain, &e).unwrap(), e);
    }

    #[test]
    fn amplitude_errors_compose() {
        let chain = TxChain::identity()
            .with_stage(StageSpec::AmplitudeError { eps: 0.1 })
            .with_stage(StageSpec::AmplitudeError { eps: -0.05 });
        let e = ComplexEnvelope::new(vec![Complex64::new(1.0, -2.0); 4], 1.0).unwrap();
        let out = run_chain(&chain, &e).unwrap();
        for y in out.samples() {
            assert!((y - Complex64::new(1.0, -2.0) * (1.1 * 0.95)).norm() < 1e-15);
        }
        assert_eq!(out, run_chain(&chain, &e).unwrap());
    }

    #[test]
    fn lo_offset_gives_exact_evm_at_decision_instants() {
        let c = qam16();
        let cfg = CartesianConfig {
            lo_offset: Complex64::new(0.03, 0.0),
            ..Default::default()
        };
        let chain = cartesian_chain(&cfg).unwrap();
        let shape = PulseShape::new(PulseKind::RaisedCosine, 0.35, 16, 8).unwrap();
        let w = synth_comm_waveform(&chain, &c, &balanced_bits(8), &shape, 1e-9).unwrap();
        let d = shape.delay_samples();
        let n = w.reference.len();
        let err: f64 = (0..n)
            .map(|k| (w.tx.samples()[k * 8 + d] - w.reference.symbols[k]).norm_sqr())
            .sum();
        let pow: f64 = w.reference.symbols.iter().map(|s| s.norm_sqr()).sum();
        assert!(((err / pow).sqrt() - 0.03).abs() < 1e-6);
    }

    #[test]
    fn empty_bits_give_empty_waveform() {
        let shape = PulseShape::new(PulseKind::RaisedCosine, 0.35, 16, 8).unwrap();
        let w = synth_comm_waveform(&TxChain::identity(), &qam16(), &[], &shape, 1e-9).unwrap();
        assert!(w.tx.is_empty());
        assert!(w.reference.is_empty());
    }

    #[test]
    fn polar_identity_chain_round_trips() {
        let chain = polar_chain(&PolarConfig::default()).unwrap();
        let shape = PulseShape::new(PulseKind::RaisedCosine, 0.35, 16, 8).unwrap();
        let ideal = synth_comm_waveform(&TxChain::identity(), &qam16(), &balanced_bits(2), &shape, 1e-9).unwrap();
        let out = run_chain(&chain, &ideal.tx).unwrap();
        for (a, b) in ideal.tx.samples().iter().zip(out.samples()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    fn random_bits(n: usize, seed: u64) -> Vec<u8> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..2u8)).collect()
    }

    /// Error power of `out` against `ideal` over every sample, relative to
    /// the ideal power.
    fn waveform_evm(ideal: &ComplexEnvelope, out: &ComplexEnvelope) -> f64 {
        let err: f64 = ideal.samples().iter().zip(out.samples()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let pow: f64 = ideal.samples().iter().map(|a| a.norm_sqr()).sum();
        (err / pow).sqrt()
    }

    #[test]
    fn polar_amplitude_quantization_matches_uniform_noise() {
        // Only waveform-wide error is compared: at zero-ISI decision instants
        // the few 16-QAM ring radii give a deterministic rounding error.
        let shape = PulseShape::new(PulseKind::RaisedCosine, 0.35, 16, 8).unwrap();
        let ideal = synth_comm_waveform(&TxChain::identity(), &qam16(), &random_bits(4096, 11), &shape, 1e-9).unwrap();
        let full_scale = 2.5;
        let peak = ideal.tx.samples().iter().map(|x| x.norm()).fold(0.0, f64::max);
        assert!(peak < full_scale);
        let chain = polar_chain(&PolarConfig {
            amp_bits: Some(10),
            amp_full_scale: Some(full_scale),
            ..Default::default()
        })
        .unwrap();
        let out = run_chain(&chain, &ideal.tx).unwrap();
        let step = full_scale / 1023.0;
        let pow = ideal.tx.samples().iter().map(|a| a.norm_sqr()).sum::<f64>() / ideal.tx.len() as f64;
        let predicted = 10.0 * (step * step / 12.0 / pow).log10();
        let measured = 20.0 * waveform_evm(&ideal.tx, &out).log10();
        assert!((measured - predicted).abs() < 1.0, "{measured} vs {predicted}");
    }

    #[test]
    fn trimmed_dac_beats_untrimmed() {
        let shape = PulseShape::new(PulseKind::RaisedCosine, 0.35, 16, 8).unwrap();
        let ideal = synth_comm_waveform(&TxChain::identity(), &qam16(), &random_bits(2048, 5), &shape, 1e-9).unwrap();
        let dac = |trim| StageSpec::Dac {
            bits: 8,
            full_scale: 2.0,
            hold: 1,
            mismatch_sigma: 0.01,
            seed: 9,
            trim,
            recon_cutoff: None,
        };
        let evm = |trim| waveform_evm(&ideal.tx, &run_chain(&TxChain::identity().with_stage(dac(trim)), &ideal.tx).unwrap());
        let raw = evm(None);
        let trimmed = evm(Some(Trim { bits: 11, range: 0.2 }));
        assert!(trimmed < raw, "{trimmed} vs {raw}");
    }

    #[test]
    fn harmonic_chain_rejects_unit_multiplier() {
        let cfg = HarmonicConfig {
            multiplier: 1,
            predivide: false,
            fundamental: vec![],
            spurs: vec![],
            rise_fall: 0.0,
            constant_impedance: true,
            state_errors: vec![],
        };
        assert!(harmonic_chain(&cfg).is_err());
    }

    #[test]
    fn rect_pulse_area_and_axis() {
        let gate = GateSpec::new(PI, 0.3, 20e-9).unwrap();
        let genv = GateEnvelopeSpec::new(GateShape::Rect, 20e-9, 0.5);
        let d = synth_qubit_pulse(&TxChain::identity(), &gate, &genv, 1024.0 / 20e-9).unwrap();
        let area: Complex64 = d.envelope.samples().iter().sum::<Complex64>() * d.envelope.dt();
        assert!((area.norm() - 0.5 * 20e-9).abs() < 1e-21);
        assert!((area.arg() - 0.3).abs() < 1e-12);

        let scaled = TxChain::identity().with_stage(StageSpec::AmplitudeError { eps: 0.01 });
        let d2 = synth_qubit_pulse(&scaled, &gate, &genv, 1024.0 / 20e-9).unwrap();
        let area2: Complex64 = d2.envelope.samples().iter().sum::<Complex64>() * d2.envelope.dt();
        assert!((area2.norm() / area.norm() - 1.01).abs() < 1e-12);
    }
}
