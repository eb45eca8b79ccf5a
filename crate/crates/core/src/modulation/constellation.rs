use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::Write;

use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Alphabet families the synthesizer knows how to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    /// Unipolar amplitude levels `0, 1, .., M-1` (`M = 2` is on-off keying).
    MAsk { order: usize },
    MPsk { order: usize },
    /// Independent Gray-coded PAM on I (MSBs) and Q (LSBs).
    SquareQam { order: usize },
    /// Vector sum of QPSK paths weighted by `ratios`.
    QpskSum { ratios: Vec<f64> },
    /// `rings` amplitude rings spaced by a factor of two, `phases` points per ring.
    StarQam { rings: usize, phases: usize },
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::MAsk { order } => format!("{order}-ask"),
            Scheme::MPsk { order } => format!("{order}-psk"),
            Scheme::SquareQam { order } => format!("{order}-qam"),
            Scheme::QpskSum { ratios } => format!("qpsk-sum{ratios:?}"),
            Scheme::StarQam { rings, phases } => format!("star-qam-{rings}x{phases}"),
        }
    }
}

/// Unit-RMS symbol alphabet with bit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    labels: Vec<u32>,
    bits_per_symbol: u32,
    scheme_name: String,
    /// Factor applied to the raw construction to reach unit RMS.
    normalization: f64,
    by_label: Vec<usize>,
}

fn gray(k: usize) -> u32 {
    (k ^ (k >> 1)) as u32
}

fn log2_exact(name: &'static str, m: usize) -> Result<u32> {
    if m < 2 || !m.is_power_of_two() {
        return Err(Error::param(name, format!("must be a power of two >= 2, got {m}")));
    }
    Ok(m.trailing_zeros())
}

/// Builds and normalizes a constellation.
pub fn build_constellation(scheme: &Scheme) -> Result<Constellation> {
    let (raw, labels, bits): (Vec<Complex64>, Vec<u32>, u32) = match scheme {
        Scheme::MAsk { order } => {
            let bits = log2_exact("order", *order)?;
            let pts = (0..*order).map(|j| Complex64::new(j as f64, 0.0)).collect();
            (pts, (0..*order).map(gray).collect(), bits)
        }
        Scheme::MPsk { order } => {
            let bits = log2_exact("order", *order)?;
            let offset = if *order == 2 { 0.0 } else { PI / *order as f64 };
            let pts = (0..*order)
                .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / *order as f64 + offset))
                .collect();
            (pts, (0..*order).map(gray).collect(), bits)
        }
        Scheme::SquareQam { order } => {
            let bits = log2_exact("order", *order)?;
            if bits % 2 != 0 {
                return Err(Error::param("order", format!("square QAM needs an even bit count, got {order}")));
            }
            let side = 1usize << (bits / 2);
            let level = |j: usize| 2.0 * j as f64 - (side as f64 - 1.0);
            let mut pts = Vec::with_capacity(*order);
            let mut labels = Vec::with_capacity(*order);
            for ji in 0..side {
                for jq in 0..side {
                    pts.push(Complex64::new(level(ji), level(jq)));
                    labels.push((gray(ji) << (bits / 2)) | gray(jq));
                }
            }
            (pts, labels, bits)
        }
        Scheme::QpskSum { ratios } => {
            if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return Err(Error::param("ratios", "need one or more positive path amplitudes"));
            }
            let mut order: Vec<usize> = (0..ratios.len()).collect();
            order.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]));
            let paths = ratios.len();
            let bits = 2 * paths as u32;
            let count = 1usize << bits;
            let mut pts = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for label in 0..count {
                let mut acc = Complex64::new(0.0, 0.0);
                for (rank, &path) in order.iter().enumerate() {
                    let shift = 2 * (paths - 1 - rank);
                    let pair = (label >> shift) & 0b11;
                    let i = if pair & 0b10 == 0 { 1.0 } else { -1.0 };
                    let q = if pair & 0b01 == 0 { 1.0 } else { -1.0 };
                    acc += Complex64::new(i, q) * (ratios[path] * FRAC_1_SQRT_2);
                }
                pts.push(acc);
                labels.push(label as u32);
            }
            (pts, labels, bits)
        }
        Scheme::StarQam { rings, phases } => {
            if *rings == 0 || *phases == 0 {
                return Err(Error::param("rings", "rings and phases must be positive"));
            }
            let bits = log2_exact("rings*phases", rings * phases)?;
            let phase_bits = phases.trailing_zeros();
            let mut pts = Vec::new();
            let mut labels = Vec::new();
            for r in 0..*rings {
                for p in 0..*phases {
                    let amp = (1u64 << r) as f64;
                    pts.push(Complex64::from_polar(amp, 2.0 * PI * p as f64 / *phases as f64));
                    labels.push((gray(r) << phase_bits) | gray(p));
                }
            }
            (pts, labels, bits)
        }
    };
    Constellation::from_raw(raw, labels, bits, scheme.name())
}

impl Constellation {
    fn from_raw(raw: Vec<Complex64>, labels: Vec<u32>, bits: u32, scheme_name: String) -> Result<Self> {
        let power = raw.iter().map(|p| p.norm_sqr()).sum::<f64>() / raw.len() as f64;
        if !(power > 0.0) {
            return Err(Error::param("scheme", "all points at the origin"));
        }
        let normalization = 1.0 / power.sqrt();
        let points: Vec<Complex64> = raw.iter().map(|p| p * normalization).collect();
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                if (points[a] - points[b]).norm() < 1e-9 {
                    return Err(Error::param(
                        "scheme",
                        format!("points {a} and {b} coincide at {}", points[a]),
                    ));
                }
            }
        }
        let mut by_label = vec![usize::MAX; points.len()];
        for (idx, &l) in labels.iter().enumerate() {
            by_label[l as usize] = idx;
        }
        Ok(Self {
            points,
            labels,
            bits_per_symbol: bits,
            scheme_name,
            normalization,
            by_label,
        })
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.bits_per_symbol
    }

    pub fn scheme_name(&self) -> &str {
        &self.scheme_name
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_for_label(&self, label: u32) -> Complex64 {
        self.points[self.by_label[label as usize]]
    }

    /// Index of the closest point (minimum Euclidean distance, lowest index on ties).
    pub fn nearest(&self, x: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, p) in self.points.iter().enumerate() {
            let d = (x - p).norm_sqr();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    pub fn rms(&self) -> f64 {
        (self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64).sqrt()
    }

    pub fn min_distance(&self) -> f64 {
        let mut d = f64::INFINITY;
        for a in 0..self.points.len() {
            for b in a + 1..self.points.len() {
                d = d.min((self.points[a] - self.points[b]).norm());
            }
        }
        d
    }

    /// Label bits of point `idx`, MSB first.
    pub fn bits_of(&self, idx: usize) -> Vec<u8> {
        let label = self.labels[idx];
        (0..self.bits_per_symbol)
            .rev()
            .map(|b| ((label >> b) & 1) as u8)
            .collect()
    }

    /// CSV with columns `label_bits,i,q`, one row per point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = crate::export::csv_writer(out);
        w.write_record(["label_bits", "i", "q"])?;
        for (idx, p) in self.points.iter().enumerate() {
            let bits: String = self.bits_of(idx).iter().map(|b| char::from(b'0' + b)).collect();
            w.write_record([bits, crate::export::fmt_f64(p.re), crate::export::fmt_f64(p.im)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Symbols at a fixed symbol period.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolStream {
    pub symbols: Vec<Complex64>,
    pub symbol_period: f64,
}

impl SymbolStream {
    pub fn new(symbols: Vec<Complex64>, symbol_period: f64) -> Result<Self> {
        if !(symbol_period > 0.0 && symbol_period.is_finite()) {
            return Err(Error::param("symbol_period", format!("must be positive, got {symbol_period}")));
        }
        Ok(Self {
            symbols,
            symbol_period,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Maps consecutive groups of `bits_per_symbol` bits (MSB first) onto points.
pub fn map_bits(bits: &[u8], c: &Constellation, symbol_period: f64) -> Result<SymbolStream> {
    let k = c.bits_per_symbol() as usize;
    if !bits.len().is_multiple_of(k) {
        return Err(Error::param(
            "bits",
            format!("length {} is not a multiple of {k}", bits.len()),
        ));
    }
    if let Some(b) = bits.iter().find(|b| **b > 1) {
        return Err(Error::param("bits", format!("bit values must be 0 or 1, got {b}")));
    }
    let symbols = bits
        .chunks(k)
        .map(|chunk| {
            let label = chunk.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
            c.point_for_label(label)
        })
        .collect();
    SymbolStream::new(symbols, symbol_period)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(points: &[Complex64]) -> Vec<Complex64> {
        let mut v = points.to_vec();
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn qpsk_points() {
        let c = build_constellation(&Scheme::MPsk { order: 4 }).unwrap();
        let s = FRAC_1_SQRT_2;
        let expect = [
            Complex64::new(s, s),
            Complex64::new(-s, s),
            Complex64::new(-s, -s),
            Complex64::new(s, -s),
        ];
        for (p, e) in c.points().iter().zip(expect) {
            assert!((p - e).norm() < 1e-15);
        }
        assert!((c.rms() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_16qam_spacing() {
        let c = build_constellation(&Scheme::SquareQam { order: 16 }).unwrap();
        assert_eq!(c.len(), 16);
        assert!((c.min_distance() - 2.0 / 10f64.sqrt()).abs() < 1e-12);
        assert!((c.normalization() - 1.0 / 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn qpsk_sum_two_to_one_is_16qam() {
        let a = build_constellation(&Scheme::QpskSum { ratios: vec![2.0, 1.0] }).unwrap();
        let b = build_constellation(&Scheme::SquareQam { order: 16 }).unwrap();
        for (p, q) in sorted(a.points()).iter().zip(sorted(b.points())) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn qpsk_sum_cardinality() {
        for m in 1..=3u32 {
            let ratios: Vec<f64> = (0..m).rev().map(|k| (1u32 << k) as f64).collect();
            let c = build_constellation(&Scheme::QpskSum { ratios }).unwrap();
            assert_eq!(c.len(), 4usize.pow(m));
        }
    }

    #[test]
    fn qpsk_sum_labels_msb_on_largest_path() {
        // listing order should not matter
        let a = build_constellation(&Scheme::QpskSum { ratios: vec![1.0, 2.0] }).unwrap();
        let b = build_constellation(&Scheme::QpskSum { ratios: vec![2.0, 1.0] }).unwrap();
        assert_eq!(a.points(), b.points());
        // label 0b0000: both paths at (+,+) -> corner
        let corner = a.point_for_label(0);
        assert!((corner - Complex64::new(3.0, 3.0) / 10f64.sqrt()).norm() < 1e-12);
    }

    #[test]
    fn degenerate_and_size_errors() {
        assert!(build_constellation(&Scheme::QpskSum { ratios: vec![1.0, 1.0] }).is_err());
        assert!(build_constellation(&Scheme::SquareQam { order: 12 }).is_err());
        assert!(build_constellation(&Scheme::SquareQam { order: 32 }).is_err());
        assert!(build_constellation(&Scheme::MPsk { order: 6 }).is_err());
        assert!(build_constellation(&Scheme::StarQam { rings: 3, phases: 4 }).is_err());
        assert!(build_constellation(&Scheme::QpskSum { ratios: vec![] }).is_err());
        assert!(build_constellation(&Scheme::QpskSum { ratios: vec![1.0, -1.0] }).is_err());
    }

    #[test]
    fn all_schemes_unit_rms() {
        let schemes = [
            Scheme::MAsk { order: 2 },
            Scheme::MAsk { order: 4 },
            Scheme::MPsk { order: 2 },
            Scheme::MPsk { order: 8 },
            Scheme::SquareQam { order: 4 },
            Scheme::SquareQam { order: 64 },
            Scheme::SquareQam { order: 256 },
            Scheme::QpskSum { ratios: vec![4.0, 2.0, 1.0] },
            Scheme::StarQam { rings: 2, phases: 8 },
        ];
        for s in &schemes {
            let c = build_constellation(s).unwrap();
            assert!((c.rms() - 1.0).abs() < 1e-12, "{s:?}");
            assert_eq!(c.len(), 1 << c.bits_per_symbol());
        }
    }

    #[test]
    fn square_qam_gray_neighbors() {
        for order in [4, 16, 64] {
            let c = build_constellation(&Scheme::SquareQam { order }).unwrap();
            let d = c.min_distance();
            for a in 0..c.len() {
                for b in a + 1..c.len() {
                    if ((c.points()[a] - c.points()[b]).norm() - d).abs() < 1e-9 {
                        assert_eq!((c.labels()[a] ^ c.labels()[b]).count_ones(), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn map_bits_examples() {
        let qpsk = build_constellation(&Scheme::MPsk { order: 4 }).unwrap();
        let s = map_bits(&[0, 0, 0, 1, 1, 0, 1, 1], &qpsk, 1.0).unwrap();
        let mut distinct = s.symbols.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);

        assert!(map_bits(&[], &qpsk, 1.0).unwrap().is_empty());

        let qam = build_constellation(&Scheme::SquareQam { order: 16 }).unwrap();
        let s = map_bits(&[0; 12], &qam, 1.0).unwrap();
        assert!(s.symbols.iter().all(|x| *x == qam.point_for_label(0)));

        assert!(map_bits(&[0, 1, 1], &qam, 1.0).is_err());
        assert!(map_bits(&[0, 2], &qpsk, 1.0).is_err());
        assert!(map_bits(&[0, 1], &qpsk, 0.0).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let c = build_constellation(&Scheme::MPsk { order: 4 }).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label_bits,i,q");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("00,"));
        assert!(!text.contains('\r'));
    }
}
