//! Communication-side scoring: demodulation, EVM and its per-impairment
//! budget, eye opening, spectra, spurs and image rejection.

mod equalizer;
mod eye;
mod spectral;

pub use equalizer::{apply_equalizer, lms_equalizer_train};
pub use eye::{eye_metrics, write_eye_csv, EyeReport, LevelStats};
pub use spectral::{image_rejection, psd_welch, spurs_sfdr, write_psd_csv, IrrReport, SfdrReport, SpurReport};

use std::collections::BTreeMap;
use std::io::Write;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::architectures::{synth_comm_waveform, TxChain};
use crate::error::{Error, Result};
use crate::export::{csv_writer, fmt_f64};
use crate::impairments::{rng, BudgetTerm};
use crate::modulation::{build_constellation, shape_filter, Constellation, PulseKind, PulseShape, Scheme};
use crate::par::*;
use crate::signal::ComplexEnvelope;

/// Reported EVM never drops below this, so the dB figure stays finite.
pub const EVM_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvmReport {
    pub evm_rms: f64,
    pub evm_db: f64,
    pub n_symbols: usize,
    pub reference_rms: f64,
}

/// `sqrt(mean |r - s|^2 / mean |s|^2)`.
pub fn evm(soft: &[Complex64], reference: &[Complex64]) -> Result<EvmReport> {
    if soft.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: soft.len(),
            right: reference.len(),
        });
    }
    if soft.is_empty() {
        return Err(Error::TooShort("EVM needs at least one symbol".into()));
    }
    let n = soft.len() as f64;
    let ref_power = reference.iter().map(|s| s.norm_sqr()).sum::<f64>() / n;
    if ref_power == 0.0 {
        return Err(Error::param("reference", "reference has zero power"));
    }
    let err_power = soft.iter().zip(reference).map(|(r, s)| (r - s).norm_sqr()).sum::<f64>() / n;
    let evm_rms = (err_power / ref_power).sqrt();
    Ok(EvmReport {
        evm_rms,
        evm_db: 20.0 * evm_rms.max(EVM_FLOOR).log10(),
        n_symbols: soft.len(),
        reference_rms: ref_power.sqrt(),
    })
}

/// Output of [`demodulate`]; symbol vectors cover the scored window only.
#[derive(Debug, Clone, PartialEq)]
pub struct Demodulated {
    pub soft_symbols: Vec<Complex64>,
    /// Index into the constellation's point list.
    pub decisions: Vec<usize>,
    pub decided_bits: Vec<u8>,
    /// Symbols dropped at each end of the record.
    pub guard: usize,
    /// Sample offset chosen by the timing search.
    pub timing_offset: i64,
}

fn convolve_real(x: &[Complex64], h: &[f64]) -> Vec<Complex64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &hj) in h.iter().enumerate() {
            out[i + j] += xi * hj;
        }
    }
    out
}

/// Candidate timing offsets, nearest to nominal first.
fn offset_order(sps: usize) -> Vec<i64> {
    let half = (sps / 2) as i64;
    let mut v = vec![0];
    for d in 1..=half {
        v.push(d);
        if d < half || sps % 2 == 1 {
            v.push(-d);
        }
    }
    v
}

/// Recovers symbols from a shaped envelope.
///
/// Root-raised-cosine records go through the matched filter; other pulses are
/// sampled directly at their decision instants. The sampling phase is picked
/// over all scored symbols by minimizing the mean squared error against
/// `training` (or against hard decisions when no training is given).
pub fn demodulate(
    rx: &ComplexEnvelope,
    c: &Constellation,
    shape: &PulseShape,
    training: Option<&[Complex64]>,
    equalizer: Option<&[Complex64]>,
) -> Result<Demodulated> {
    shape.validate()?;
    let sps = shape.samples_per_symbol;
    let taps = shape.tap_count();
    if rx.len() < taps {
        return Err(Error::TooShort(format!(
            "record of {} samples is shorter than one pulse ({taps})",
            rx.len()
        )));
    }
    let n = (rx.len() - taps) / sps + 1;
    let guard = shape.guard_symbols();
    if n <= 2 * guard {
        return Err(Error::TooShort(format!("{n} symbols leave none after trimming {guard} per end")));
    }
    let (y, delay) = if shape.kind == PulseKind::RootRaisedCosine {
        let h = shape_filter(shape);
        let energy: f64 = h.iter().map(|v| v * v).sum();
        let mf: Vec<f64> = h.iter().map(|v| v / energy).collect();
        (convolve_real(rx.samples(), &mf), 2 * shape.delay_samples())
    } else {
        (rx.samples().to_vec(), shape.delay_samples())
    };
    let sample_at = |k: usize, off: i64| -> Complex64 {
        let idx = (k * sps + delay) as i64 + off;
        if idx >= 0 && (idx as usize) < y.len() {
            y[idx as usize]
        } else {
            Complex64::new(0.0, 0.0)
        }
    };
    let scored = guard..n - guard;
    let mut best = (0i64, f64::INFINITY);
    for off in offset_order(sps) {
        let mse = (0..scored.len())
            .map(|j| {
                let r = sample_at(guard + j, off);
                let s = match training {
                    Some(t) if j < t.len() => t[j],
                    _ => c.points()[c.nearest(r)],
                };
                (r - s).norm_sqr()
            })
            .sum::<f64>()
            / scored.len() as f64;
        if mse < best.1 {
            best = (off, mse);
        }
    }
    let mut soft: Vec<Complex64> = scored.map(|k| sample_at(k, best.0)).collect();
    if let Some(w) = equalizer {
        soft = apply_equalizer(&soft, w)?;
    }
    let decisions: Vec<usize> = soft.iter().map(|&r| c.nearest(r)).collect();
    let decided_bits = decisions.iter().flat_map(|&d| c.bits_of(d)).collect();
    Ok(Demodulated {
        soft_symbols: soft,
        decisions,
        decided_bits,
        guard,
        timing_offset: best.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EqualizerConfig {
    pub n_taps: usize,
    pub step: f64,
}

/// A symbol link: alphabet, pulse, rate and a seeded payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CommLink {
    pub scheme: Scheme,
    pub pulse: PulseShape,
    pub symbol_rate: f64,
    /// Scored symbols; guard symbols are added at both ends.
    pub n_symbols: usize,
    pub seed: u64,
    #[serde(default)]
    pub equalizer: Option<EqualizerConfig>,
}

impl CommLink {
    pub fn validate(&self) -> Result<()> {
        self.pulse.validate()?;
        if !(self.symbol_rate > 0.0) {
            return Err(Error::param("symbol_rate", "must be positive"));
        }
        if self.n_symbols == 0 {
            return Err(Error::param("n_symbols", "must be positive"));
        }
        Ok(())
    }

    pub fn symbol_period(&self) -> f64 {
        1.0 / self.symbol_rate
    }

    pub fn sample_rate(&self) -> f64 {
        self.symbol_rate * self.pulse.samples_per_symbol as f64
    }

    /// Guard symbols, then the scored payload, then guard symbols. The payload
    /// visits every label once per block of `M` symbols, so a payload that is
    /// a multiple of `M` long has exactly the alphabet's unit RMS.
    pub fn labels(&self, c: &Constellation) -> Vec<u32> {
        let m = c.len();
        let guard = self.pulse.guard_symbols();
        let mut r = rng(self.seed);
        let mut out = Vec::with_capacity(self.n_symbols + 2 * guard);
        for _ in 0..guard {
            out.push(r.random_range(0..m as u32));
        }
        let mut block: Vec<u32> = (0..m as u32).collect();
        while out.len() < guard + self.n_symbols {
            block.shuffle(&mut r);
            let take = (guard + self.n_symbols - out.len()).min(m);
            out.extend_from_slice(&block[..take]);
        }
        for _ in 0..guard {
            out.push(r.random_range(0..m as u32));
        }
        out
    }

    pub fn bits(&self, c: &Constellation) -> Vec<u8> {
        let k = c.bits_per_symbol();
        self.labels(c)
            .iter()
            .flat_map(|&l| (0..k).rev().map(move |b| ((l >> b) & 1) as u8))
            .collect()
    }
}

/// Everything produced by one pass over a link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRun {
    pub rx: ComplexEnvelope,
    pub reference: Vec<Complex64>,
    pub demod: Demodulated,
    pub evm: EvmReport,
    pub equalizer_taps: Option<Vec<Complex64>>,
}

/// Synthesizes the link through `chain`, demodulates and scores it.
pub fn run_link(link: &CommLink, chain: &TxChain) -> Result<LinkRun> {
    link.validate()?;
    let c = build_constellation(&link.scheme)?;
    let bits = link.bits(&c);
    let w = synth_comm_waveform(chain, &c, &bits, &link.pulse, link.symbol_period())?;
    let guard = link.pulse.guard_symbols();
    let reference = w.reference.symbols[guard..guard + link.n_symbols].to_vec();
    let mut demod = demodulate(&w.tx, &c, &link.pulse, Some(&reference), None)?;
    let mut taps = None;
    if let Some(eq) = link.equalizer {
        let t = lms_equalizer_train(&demod.soft_symbols, &reference, eq.n_taps, eq.step)?;
        demod = demodulate(&w.tx, &c, &link.pulse, Some(&reference), Some(&t))?;
        taps = Some(t);
    }
    let evm = evm(&demod.soft_symbols, &reference)?;
    Ok(LinkRun {
        rx: w.tx,
        reference,
        demod,
        evm,
        equalizer_taps: taps,
    })
}

/// Per-term EVM contributions and their root-sum-square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvmBudget {
    pub terms: BTreeMap<BudgetTerm, f64>,
    pub total_predicted: f64,
    pub total_measured: f64,
}

/// Runs the link once per budget term with only that term's stages enabled,
/// and once with the whole chain.
pub fn evm_budget(link: &CommLink, chain: &TxChain) -> Result<EvmBudget> {
    let mut buckets: BTreeMap<BudgetTerm, Vec<_>> = BTreeMap::new();
    for s in &chain.stages {
        let term = s
            .budget_term()
            .ok_or_else(|| Error::UntaggedStage(s.kind_name().to_string()))?;
        buckets.entry(term).or_default().push(s.clone());
    }
    let mut jobs: Vec<(Option<BudgetTerm>, TxChain)> = buckets
        .iter()
        .map(|(t, stages)| (Some(*t), chain.with_stages(stages.clone())))
        .collect();
    jobs.push((None, chain.clone()));
    let results: Vec<(Option<BudgetTerm>, f64)> = jobs
        .par_iter()
        .map(|(t, ch)| Ok((*t, run_link(link, ch)?.evm.evm_rms)))
        .collect::<Result<_>>()?;
    let mut terms: BTreeMap<BudgetTerm, f64> = BudgetTerm::ALL.iter().map(|t| (*t, 0.0)).collect();
    let mut total_measured = 0.0;
    for (t, v) in results {
        match t {
            Some(t) => {
                terms.insert(t, v);
            }
            None => total_measured = v,
        }
    }
    let total_predicted = terms.values().map(|v| v * v).sum::<f64>().sqrt();
    Ok(EvmBudget {
        terms,
        total_predicted,
        total_measured,
    })
}

/// Columns `bits,i_ref,q_ref,i_rx,q_rx`; the bit label is the reference's.
pub fn write_constellation_csv<W: Write>(
    out: W,
    c: &Constellation,
    reference: &[Complex64],
    rx: &[Complex64],
) -> Result<()> {
    if reference.len() != rx.len() {
        return Err(Error::LengthMismatch {
            left: reference.len(),
            right: rx.len(),
        });
    }
    let mut w = csv_writer(out);
    w.write_record(["bits", "i_ref", "q_ref", "i_rx", "q_rx"])?;
    for (s, r) in reference.iter().zip(rx) {
        let bits: String = c.bits_of(c.nearest(*s)).iter().map(|b| char::from(b'0' + b)).collect();
        w.write_record([bits, fmt_f64(s.re), fmt_f64(s.im), fmt_f64(r.re), fmt_f64(r.im)])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `term,evm`: the five terms, then the predicted and measured totals.
pub fn write_budget_csv<W: Write>(out: W, b: &EvmBudget) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["term", "evm"])?;
    for (t, v) in &b.terms {
        w.write_record([t.as_str().to_string(), fmt_f64(*v)])?;
    }
    w.write_record(["total_predicted".to_string(), fmt_f64(b.total_predicted)])?;
    w.write_record(["total_measured".to_string(), fmt_f64(b.total_measured)])?;
    w.flush()?;
    Ok(())
}
