use num_complex::Complex64;

use crate::error::{Error, Result};

const EPOCHS: usize = 20;
const MAX_TAPS: usize = 15;

/// Symbol-spaced FIR with the centre tap aligned to the current symbol.
pub fn apply_equalizer(x: &[Complex64], taps: &[Complex64]) -> Result<Vec<Complex64>> {
    if taps.is_empty() || taps.len().is_multiple_of(2) {
        return Err(Error::param("taps", "need an odd, non-zero tap count"));
    }
    let c = taps.len() / 2;
    Ok((0..x.len())
        .map(|k| {
            taps.iter()
                .enumerate()
                .filter_map(|(m, w)| (k + c).checked_sub(m).and_then(|i| x.get(i)).map(|u| w * u))
                .sum()
        })
        .collect())
}

fn regressor(x: &[Complex64], k: usize, n_taps: usize) -> Vec<Complex64> {
    let c = n_taps / 2;
    (0..n_taps)
        .map(|m| {
            (k + c)
                .checked_sub(m)
                .and_then(|i| x.get(i))
                .copied()
                .unwrap_or_default()
        })
        .collect()
}

fn mse(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / a.len() as f64
}

/// Trains a symbol-spaced equalizer with normalized LMS over several passes.
///
/// Starts from a unit centre tap. Blow-up of the error is reported as
/// divergence; if training still ends worse than no equalization, the unit
/// taps are returned instead.
pub fn lms_equalizer_train(rx: &[Complex64], reference: &[Complex64], n_taps: usize, step: f64) -> Result<Vec<Complex64>> {
    if n_taps.is_multiple_of(2) || n_taps > MAX_TAPS {
        return Err(Error::param("n_taps", format!("must be odd and <= {MAX_TAPS}, got {n_taps}")));
    }
    if !(step > 0.0) {
        return Err(Error::param("step", "must be positive"));
    }
    if rx.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: rx.len(),
            right: reference.len(),
        });
    }
    if rx.len() < n_taps {
        return Err(Error::TooShort(format!("{} training symbols for {n_taps} taps", rx.len())));
    }
    let mut identity = vec![Complex64::new(0.0, 0.0); n_taps];
    identity[n_taps / 2] = Complex64::new(1.0, 0.0);
    let mut w = identity.clone();
    let ref_power = reference.iter().map(|s| s.norm_sqr()).sum::<f64>() / reference.len() as f64;
    let limit = 1e6 * ref_power.max(1e-300);
    for _ in 0..EPOCHS {
        for (k, target) in reference.iter().enumerate().take(rx.len()) {
            let u = regressor(rx, k, n_taps);
            let y: Complex64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
            let e = target - y;
            if !(e.norm_sqr() < limit) {
                return Err(Error::Divergence(format!("error power grew past {limit:e} at symbol {k}")));
            }
            let norm = u.iter().map(|v| v.norm_sqr()).sum::<f64>() + 1e-12;
            for (wm, um) in w.iter_mut().zip(&u) {
                *wm += e * um.conj() * (step / norm);
            }
        }
    }
    let before = mse(rx, reference);
    let after = mse(&apply_equalizer(rx, &w)?, reference);
    Ok(if after <= before { w } else { identity })
}
