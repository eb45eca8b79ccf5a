use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::architectures::{run_chain, TxChain};
use crate::error::{Error, Result};
use crate::export::{csv_writer, fmt_f64};
use crate::signal::{bin_frequency, fft_windowed, ComplexEnvelope, Spectrum, Window};

/// Averaged Hann-windowed periodogram in ascending frequency order.
///
/// Scaled by the window energy, so integrating the result gives mean power.
pub fn psd_welch(env: &ComplexEnvelope, nseg: usize, overlap: f64) -> Result<Spectrum> {
    if nseg < 8 {
        return Err(Error::param("nseg", format!("segment length must be >= 8, got {nseg}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::param("overlap", format!("must lie in [0, 1), got {overlap}")));
    }
    if env.len() < nseg {
        return Err(Error::TooShort(format!(
            "record of {} samples is shorter than one segment ({nseg})",
            env.len()
        )));
    }
    let fs = env.sample_rate();
    let hop = ((nseg as f64 * (1.0 - overlap)).round() as usize).max(1);
    let w = Window::Hann.coefficients(nseg);
    let energy: f64 = w.iter().map(|v| v * v).sum();
    let sum: f64 = w.iter().sum();
    let x = env.samples();
    let mut acc = vec![0.0; nseg];
    let mut count = 0usize;
    let mut start = 0;
    while start + nseg <= x.len() {
        let spec = fft_windowed(&x[start..start + nseg], &w);
        for (a, s) in acc.iter_mut().zip(&spec) {
            *a += s.norm_sqr();
        }
        count += 1;
        start += hop;
    }
    let scale = 1.0 / (count as f64 * fs * energy);
    let mut order: Vec<usize> = (0..nseg).collect();
    order.sort_by(|&a, &b| bin_frequency(a, nseg, fs).total_cmp(&bin_frequency(b, nseg, fs)));
    Ok(Spectrum {
        freqs: order.iter().map(|&k| bin_frequency(k, nseg, fs)).collect(),
        psd: order.iter().map(|&k| acc[k] * scale).collect(),
        resolution_bw: fs * energy / (sum * sum),
    })
}

/// Columns `freq_hz,db`.
pub fn write_psd_csv<W: Write>(out: W, spec: &Spectrum) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["freq_hz", "db"])?;
    for (f, d) in spec.freqs.iter().zip(spec.psd_db()) {
        w.write_record([fmt_f64(*f), fmt_f64(d)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SpurReport {
    pub freq_hz: f64,
    /// Power relative to the carrier.
    pub level_dbc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SfdrReport {
    pub sfdr_db: f64,
    pub carrier_hz: f64,
    pub carrier_power: f64,
    /// Strongest first.
    pub spurs: Vec<SpurReport>,
}

const SUM_HALF_WIDTH: usize = 2;
const CARRIER_EXCLUSION: usize = 3;

fn band_power(psd: &[f64], k: usize, lo: usize, hi: usize) -> f64 {
    let a = k.saturating_sub(SUM_HALF_WIDTH).max(lo);
    let b = (k + SUM_HALF_WIDTH).min(hi);
    psd[a..=b].iter().sum()
}

/// Carrier-to-strongest-spur ratio inside `band` (Hz, inclusive).
///
/// Spurs are local maxima more than 10 dB above the in-band median PSD,
/// outside a few bins around the carrier. Powers are summed over a few bins
/// so window spreading does not bias the ratio. With no spur detected, the
/// strongest non-carrier bin stands in.
pub fn spurs_sfdr(spec: &Spectrum, carrier_hz: f64, band: (f64, f64)) -> Result<SfdrReport> {
    let (flo, fhi) = band;
    if !(flo < fhi) {
        return Err(Error::param("search_band", "lower edge must be below upper edge"));
    }
    let idx: Vec<usize> = (0..spec.freqs.len())
        .filter(|&k| spec.freqs[k] >= flo && spec.freqs[k] <= fhi)
        .collect();
    if idx.len() < 2 * CARRIER_EXCLUSION + 3 {
        return Err(Error::param("search_band", "band holds too few bins"));
    }
    let (lo, hi) = (idx[0], *idx.last().unwrap());
    if !(carrier_hz >= flo && carrier_hz <= fhi) {
        return Err(Error::CarrierNotFound(format!("{carrier_hz} Hz lies outside the search band")));
    }
    let psd = &spec.psd;
    let guess = spec.nearest_bin(carrier_hz);
    let kc = (guess.saturating_sub(SUM_HALF_WIDTH).max(lo)..=(guess + SUM_HALF_WIDTH).min(hi))
        .max_by(|&a, &b| psd[a].total_cmp(&psd[b]))
        .unwrap();
    let mut sorted: Vec<f64> = idx.iter().map(|&k| psd[k]).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if !(psd[kc] > 10.0 * median) || psd[kc] <= 0.0 {
        return Err(Error::CarrierNotFound(format!("no carrier above the noise floor near {carrier_hz} Hz")));
    }
    let carrier_power = band_power(psd, kc, lo, hi);
    let is_carrier = |k: usize| k.abs_diff(kc) <= CARRIER_EXCLUSION;

    let mut spurs: Vec<(usize, f64)> = Vec::new();
    for &k in &idx {
        if is_carrier(k) || k == lo || k == hi {
            continue;
        }
        if psd[k] > psd[k - 1] && psd[k] >= psd[k + 1] && psd[k] > 10.0 * median {
            spurs.push((k, band_power(psd, k, lo, hi)));
        }
    }
    spurs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let worst = match spurs.first() {
        Some(s) => s.1,
        None => {
            let floor = idx
                .iter()
                .filter(|&&k| !is_carrier(k))
                .map(|&k| psd[k])
                .fold(0.0, f64::max);
            floor * (2 * SUM_HALF_WIDTH + 1) as f64
        }
    };
    let tiny = carrier_power * 1e-40;
    Ok(SfdrReport {
        sfdr_db: 10.0 * (carrier_power / worst.max(tiny)).log10(),
        carrier_hz: spec.freqs[kc],
        carrier_power: carrier_power * spec.bin_width(),
        spurs: spurs
            .iter()
            .map(|&(k, p)| SpurReport {
                freq_hz: spec.freqs[k],
                level_dbc: 10.0 * (p.max(tiny) / carrier_power).log10(),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct IrrReport {
    pub irr_db: f64,
    pub lo_rejection_db: f64,
    /// Test tone actually used, snapped to an FFT bin.
    pub tone_hz: f64,
}

/// Drives a unit single-sideband tone near `+f_test` through `chain` and
/// compares the wanted tone with its image and with the DC leak.
///
/// The tone is snapped to a bin of the `n`-point analysis; the chain sees
/// `2n` samples and only the settled second half is analysed.
pub fn image_rejection(chain: &TxChain, sample_rate: f64, f_test: f64, n: usize) -> Result<IrrReport> {
    if n < 64 {
        return Err(Error::param("n", format!("analysis length must be >= 64, got {n}")));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::param("sample_rate", "must be positive"));
    }
    let k = (f_test / sample_rate * n as f64).round();
    if k < 3.0 || k > (n / 2 - 2) as f64 {
        return Err(Error::param(
            "f_test",
            format!("test tone bin {k} collides with DC or its own image"),
        ));
    }
    let k = k as usize;
    let tone_hz = k as f64 * sample_rate / n as f64;
    let x: Vec<Complex64> = (0..2 * n)
        .map(|t| Complex64::from_polar(1.0, 2.0 * PI * (k * t % n) as f64 / n as f64))
        .collect();
    let y = run_chain(chain, &ComplexEnvelope::new(x, sample_rate)?)?;
    let w = Window::Hann.coefficients(n);
    let spec = fft_windowed(&y.samples()[n..], &w);
    let near = |c: usize| -> f64 { (0..3).map(|d| spec[(c + n + d - 1) % n].norm_sqr()).sum() };
    let wanted = near(k);
    let image = near(n - k);
    let dc = near(0);
    if !(wanted > 0.0) {
        return Err(Error::CarrierNotFound("chain removed the test tone".into()));
    }
    let tiny = wanted * 1e-40;
    Ok(IrrReport {
        irr_db: 10.0 * (wanted / image.max(tiny)).log10(),
        lo_rejection_db: 10.0 * (wanted / dc.max(tiny)).log10(),
        tone_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::StageSpec;
    use crate::impairments::{iq_coefficients, rng};
    use rand_distr::{Distribution, Normal};

    fn tone(freq_bin: f64, amp: f64, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|t| Complex64::from_polar(amp, 2.0 * PI * freq_bin * t as f64 / 256.0))
            .collect()
    }

    fn add(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    #[test]
    fn welch_tone_power_and_peak() {
        let env = ComplexEnvelope::new(tone(20.3, 1.0, 4096), 256.0).unwrap();
        let s = psd_welch(&env, 256, 0.5).unwrap();
        assert!((s.total_power() - 1.0).abs() < 0.05);
        let peak = (0..s.psd.len()).max_by(|&a, &b| s.psd[a].total_cmp(&s.psd[b])).unwrap();
        assert!((s.freqs[peak] - 20.0).abs() <= 1.0);
        assert!(s.freqs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn welch_zero_and_errors() {
        let z = ComplexEnvelope::zeros(1024, 1.0).unwrap();
        assert!(psd_welch(&z, 128, 0.5).unwrap().psd.iter().all(|&p| p == 0.0));
        assert!(psd_welch(&z, 4, 0.5).is_err());
        assert!(psd_welch(&z, 2048, 0.5).is_err());
        assert!(psd_welch(&z, 128, 1.0).is_err());
    }

    #[test]
    fn welch_white_noise_is_flat() {
        let mut r = rng(5);
        let d = Normal::new(0.0, (0.5f64).sqrt()).unwrap();
        let nseg = 128;
        let x: Vec<Complex64> = (0..nseg * 64)
            .map(|_| Complex64::new(d.sample(&mut r), d.sample(&mut r)))
            .collect();
        let env = ComplexEnvelope::new(x, 1.0).unwrap();
        let s = psd_welch(&env, nseg, 0.0).unwrap();
        for db in s.psd_db() {
            assert!(db.abs() < 2.0, "{db}");
        }
    }

    fn spectrum_of(x: Vec<Complex64>) -> Spectrum {
        let env = ComplexEnvelope::new(x, 256.0).unwrap();
        psd_welch(&env, 256, 0.0).unwrap()
    }

    #[test]
    fn sfdr_injected_spurs() {
        let n = 256 * 8;
        let carrier = tone(32.0, 1.0, n);
        let s1 = tone(-70.0, 10f64.powf(-45.0 / 20.0), n);
        let s = spectrum_of(add(&carrier, &s1));
        let r = spurs_sfdr(&s, 32.0, (-128.0, 127.0)).unwrap();
        assert!((r.sfdr_db - 45.0).abs() < 0.5, "{}", r.sfdr_db);

        let s2 = tone(90.0, 10f64.powf(-50.0 / 20.0), n);
        let s40 = tone(-70.0, 10f64.powf(-40.0 / 20.0), n);
        let spec = spectrum_of(add(&add(&carrier, &s40), &s2));
        let r = spurs_sfdr(&spec, 32.0, (-128.0, 127.0)).unwrap();
        assert!((r.sfdr_db - 40.0).abs() < 0.5);
        assert!(r.spurs[0].level_dbc > r.spurs[1].level_dbc);

        let scaled: Vec<Complex64> = add(&add(&carrier, &s40), &s2).iter().map(|v| v * 7.0).collect();
        let r2 = spurs_sfdr(&spectrum_of(scaled), 32.0, (-128.0, 127.0)).unwrap();
        assert!((r2.sfdr_db - r.sfdr_db).abs() < 1e-9);
    }

    #[test]
    fn sfdr_clean_carrier_and_errors() {
        let s = spectrum_of(tone(32.0, 1.0, 256 * 4));
        let r = spurs_sfdr(&s, 32.0, (-128.0, 127.0)).unwrap();
        assert!(r.sfdr_db > 100.0);
        assert!(spurs_sfdr(&s, 32.0, (40.0, 100.0)).is_err());
        let z = spectrum_of(vec![Complex64::new(0.0, 0.0); 1024]);
        assert!(matches!(spurs_sfdr(&z, 32.0, (-128.0, 127.0)), Err(Error::CarrierNotFound(_))));
    }

    #[test]
    fn irr_identity_imbalance_and_leak() {
        let r = image_rejection(&TxChain::identity(), 1e9, 1e8, 1024).unwrap();
        assert!(r.irr_db > 100.0 && r.lo_rejection_db > 100.0);

        let (mu, nu) = iq_coefficients(0.02, 0.0);
        let chain = TxChain::identity().with_stage(StageSpec::IqImbalance { gain: 0.02, skew: 0.0 });
        let r = image_rejection(&chain, 1e9, 1e8, 1024).unwrap();
        let want = 10.0 * (mu.norm_sqr() / nu.norm_sqr()).log10();
        assert!((r.irr_db - want).abs() < 0.1);

        let chain = TxChain::identity().with_stage(StageSpec::LoFeedthrough {
            offset: Complex64::new(0.01, 0.0),
        });
        let r = image_rejection(&chain, 1e9, 1e8, 1024).unwrap();
        assert!((r.lo_rejection_db - 40.0).abs() < 0.1);

        assert!(image_rejection(&TxChain::identity(), 1e9, 1e5, 1024).is_err());
    }
}
