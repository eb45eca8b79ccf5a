use std::io::Write;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{csv_writer, fmt_f64};
use crate::signal::ComplexEnvelope;

/// Statistics of one amplitude level at the chosen decision instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LevelStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EyeReport {
    /// Smallest gap between adjacent level clouds at the decision instant.
    pub eye_height: f64,
    /// Fraction of a symbol period over which every level pair stays separated.
    pub eye_width: f64,
    /// Decision instant as a fraction of the symbol period.
    pub sample_phase: f64,
    /// Ordered by mean, lowest first.
    pub levels: Vec<LevelStats>,
}

fn sps_of(rx: &ComplexEnvelope, symbol_period: f64) -> Result<usize> {
    if !(symbol_period > 0.0) {
        return Err(Error::param("symbol_period", "must be positive"));
    }
    let sps = (symbol_period * rx.sample_rate()).round() as usize;
    if sps < 2 {
        return Err(Error::param("symbol_period", "needs at least two samples per symbol"));
    }
    Ok(sps)
}

/// Thresholds splitting sorted values into `n_levels` clouds at the widest gaps,
/// and the narrowest of those gaps.
fn split(values: &[f64], n_levels: usize) -> (Vec<f64>, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut gaps: Vec<(f64, usize)> = v.windows(2).enumerate().map(|(i, w)| (w[1] - w[0], i)).collect();
    gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let chosen = &gaps[..(n_levels - 1).min(gaps.len())];
    let height = chosen.iter().map(|g| g.0).fold(f64::INFINITY, f64::min);
    let mut cuts: Vec<f64> = chosen.iter().map(|&(_, i)| 0.5 * (v[i] + v[i + 1])).collect();
    cuts.sort_by(f64::total_cmp);
    (cuts, if height.is_finite() { height } else { 0.0 })
}

fn label(x: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| x > c).count()
}

/// Folds the in-phase waveform modulo the symbol period and measures the
/// opening between `n_levels` amplitude clouds. `guard` symbols are dropped
/// from each end.
pub fn eye_metrics(rx: &ComplexEnvelope, symbol_period: f64, n_levels: usize, guard: usize) -> Result<EyeReport> {
    if n_levels < 2 {
        return Err(Error::param("n_levels", "need at least two levels"));
    }
    let sps = sps_of(rx, symbol_period)?;
    let total = rx.len() / sps;
    if total < 2 * guard + 32 {
        return Err(Error::TooShort(format!(
            "eye needs 32 symbols after trimming, record has {total} with guard {guard}"
        )));
    }
    let x = rx.in_phase();
    // One spare symbol at each end so shifted instants stay inside the record.
    let syms: Vec<usize> = (guard.max(1)..total - guard.max(1)).collect();
    let column = |p: usize| -> Vec<f64> { syms.iter().map(|&j| x[j * sps + p]).collect() };

    let heights: Vec<f64> = (0..sps).map(|p| split(&column(p), n_levels).1).collect();
    let hmax = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * hmax.abs().max(1e-300);
    let top: Vec<bool> = heights.iter().map(|&h| h >= hmax - tol).collect();
    let phase = if top.iter().all(|&b| b) {
        sps / 2
    } else {
        // Longest circular run of optimal phases; start after a non-optimal one.
        let start = (0..sps).find(|&p| !top[p]).unwrap_or(0);
        let (mut best_len, mut best_start) = (0, 0);
        let mut run = 0;
        for k in 1..=sps {
            let p = (start + k) % sps;
            if top[p] {
                run += 1;
                if run > best_len {
                    best_len = run;
                    best_start = (p + sps + 1 - run) % sps;
                }
            } else {
                run = 0;
            }
        }
        (best_start + best_len / 2) % sps
    };

    let (cuts, height) = split(&column(phase), n_levels);
    let labels: Vec<usize> = column(phase).iter().map(|&v| label(v, &cuts)).collect();

    let mut levels = Vec::with_capacity(n_levels);
    let col = column(phase);
    for l in 0..n_levels {
        let vals: Vec<f64> = col.iter().zip(&labels).filter(|(_, &k)| k == l).map(|(&v, _)| v).collect();
        let count = vals.len();
        let mean = if count > 0 { vals.iter().sum::<f64>() / count as f64 } else { f64::NAN };
        let std = if count > 0 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64).sqrt()
        } else {
            f64::NAN
        };
        levels.push(LevelStats {
            mean,
            std,
            min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            count,
        });
    }

    // Worst adjacent-pair gap with labels frozen at the decision instant.
    let half = (sps / 2) as i64;
    let mut best_run = 0usize;
    let mut run = 0usize;
    for m in -half..(sps as i64 - half) {
        let mut lo = vec![f64::INFINITY; n_levels];
        let mut hi = vec![f64::NEG_INFINITY; n_levels];
        for (&j, &l) in syms.iter().zip(&labels) {
            let idx = (j * sps + phase) as i64 + m;
            let v = x[idx as usize];
            lo[l] = lo[l].min(v);
            hi[l] = hi[l].max(v);
        }
        let worst = (0..n_levels - 1)
            .map(|l| lo[l + 1] - hi[l])
            .fold(f64::INFINITY, f64::min);
        if worst > 0.0 {
            run += 1;
            best_run = best_run.max(run);
        } else {
            run = 0;
        }
    }

    Ok(EyeReport {
        eye_height: height,
        eye_width: best_run as f64 / sps as f64,
        sample_phase: phase as f64 / sps as f64,
        levels,
    })
}

/// Columns `t_frac,i,q`: every sample with its position inside the symbol.
pub fn write_eye_csv<W: Write>(out: W, rx: &ComplexEnvelope, symbol_period: f64) -> Result<()> {
    let sps = sps_of(rx, symbol_period)?;
    let mut w = csv_writer(out);
    w.write_record(["t_frac", "i", "q"])?;
    for (k, s) in rx.samples().iter().enumerate() {
        w.write_record([fmt_f64((k % sps) as f64 / sps as f64), fmt_f64(s.re), fmt_f64(s.im)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impairments::{bandwidth_limit, rng};
    use crate::modulation::{shape_symbols, PulseKind, PulseShape, SymbolStream};
    use num_complex::Complex64;
    use rand::Rng;

    fn nrz(levels: &[f64], n: usize, sps: usize, seed: u64) -> ComplexEnvelope {
        let mut r = rng(seed);
        let syms: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(levels[r.random_range(0..levels.len())], 0.0))
            .collect();
        let s = SymbolStream::new(syms, 1.0).unwrap();
        shape_symbols(&s, &PulseShape::new(PulseKind::Rect, 0.0, 4, sps).unwrap()).unwrap()
    }

    #[test]
    fn rect_eye_is_fully_open() {
        let env = nrz(&[0.0, 1.0], 200, 8, 1);
        let e = eye_metrics(&env, 1.0, 2, 2).unwrap();
        assert!((e.eye_height - 1.0).abs() < 1e-12);
        assert_eq!(e.eye_width, 1.0);
        assert!((e.levels[0].mean).abs() < 1e-12);
        assert!((e.levels[1].mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn band_limit_closes_width() {
        let env = nrz(&[0.0, 1.0], 200, 16, 2);
        let open = eye_metrics(&env, 1.0, 2, 2).unwrap();
        let lp = bandwidth_limit(&env, 0.35).unwrap();
        let e = eye_metrics(&lp, 1.0, 2, 2).unwrap();
        assert!(e.eye_width < 1.0);
        assert!(e.eye_width > 0.0);
        assert!(e.eye_height < open.eye_height);
    }

    #[test]
    fn too_few_symbols() {
        let env = nrz(&[0.0, 1.0], 20, 8, 1);
        assert!(eye_metrics(&env, 1.0, 2, 0).is_err());
        assert!(eye_metrics(&nrz(&[0.0, 1.0], 100, 8, 1), 1.0, 1, 0).is_err());
    }

    #[test]
    fn unequal_levels_show_in_means() {
        let env = nrz(&[0.0, 0.45, 1.0], 300, 8, 3);
        let e = eye_metrics(&env, 1.0, 3, 2).unwrap();
        assert!((e.levels[1].mean - 0.45).abs() < 1e-12);
        assert!((e.eye_height - 0.45).abs() < 1e-12);
    }

    #[test]
    fn eye_csv_header() {
        let env = nrz(&[0.0, 1.0], 10, 4, 1);
        let mut buf = Vec::new();
        write_eye_csv(&mut buf, &env, 1.0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_frac,i,q\n"));
        assert_eq!(text.lines().count(), env.len() + 1);
    }
}
