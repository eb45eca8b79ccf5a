use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ComplexEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    Rect,
    Gaussian,
    Cosine,
}

fn default_sigma_fraction() -> f64 {
    0.25
}

/// Shape, duration and amplitude of one drive pulse.
///
/// Gaussian pulses are truncated at +-2 sigma (or the gate edges, whichever is
/// closer), baseline-subtracted so they start and end at zero, and rescaled so
/// the peak equals `peak_amplitude`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GateEnvelopeSpec {
    pub shape: GateShape,
    /// Gate duration in seconds.
    pub duration: f64,
    pub peak_amplitude: f64,
    #[serde(default = "default_sigma_fraction")]
    pub sigma_fraction: f64,
    #[serde(default)]
    pub drag_enabled: bool,
    /// Seconds; the quadrature component is `-drag_coefficient * da/dt`.
    #[serde(default)]
    pub drag_coefficient: f64,
}

impl GateEnvelopeSpec {
    pub fn new(shape: GateShape, duration: f64, peak_amplitude: f64) -> Self {
        Self {
            shape,
            duration,
            peak_amplitude,
            sigma_fraction: default_sigma_fraction(),
            drag_enabled: false,
            drag_coefficient: 0.0,
        }
    }

    pub fn with_drag(mut self, coefficient: f64) -> Self {
        self.drag_enabled = true;
        self.drag_coefficient = coefficient;
        self
    }

    pub fn without_drag(mut self) -> Self {
        self.drag_enabled = false;
        self
    }

    pub fn with_peak(mut self, peak: f64) -> Self {
        self.peak_amplitude = peak;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::param("duration", format!("must be positive, got {}", self.duration)));
        }
        if !(self.peak_amplitude >= 0.0) {
            return Err(Error::param(
                "peak_amplitude",
                format!("must be nonnegative, got {}", self.peak_amplitude),
            ));
        }
        if self.shape == GateShape::Gaussian && !(self.sigma_fraction > 0.0) {
            return Err(Error::param("sigma_fraction", "must be positive"));
        }
        Ok(())
    }

    fn sigma(&self) -> f64 {
        self.sigma_fraction * self.duration
    }

    /// Support of the gaussian after truncation, as a half-width about the centre.
    fn gaussian_half_width(&self) -> f64 {
        (2.0 * self.sigma()).min(self.duration / 2.0)
    }

    /// Unit-peak shape value at time `t` from the gate start.
    pub fn unit_shape(&self, t: f64) -> f64 {
        let tau = self.duration;
        match self.shape {
            GateShape::Rect => {
                if (0.0..tau).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
            GateShape::Cosine => {
                if (0.0..=tau).contains(&t) {
                    0.5 * (1.0 - (2.0 * PI * t / tau).cos())
                } else {
                    0.0
                }
            }
            GateShape::Gaussian => {
                let s = self.sigma();
                let h = self.gaussian_half_width();
                let u = t - tau / 2.0;
                if u.abs() > h {
                    return 0.0;
                }
                let base = (-h * h / (2.0 * s * s)).exp();
                ((-u * u / (2.0 * s * s)).exp() - base) / (1.0 - base)
            }
        }
    }

    /// Exact integral of the unit-peak shape over `[a, b]`.
    fn unit_integral(&self, a: f64, b: f64) -> f64 {
        let tau = self.duration;
        match self.shape {
            GateShape::Rect => (b.min(tau) - a.max(0.0)).max(0.0),
            GateShape::Cosine => {
                let (a, b) = (a.max(0.0), b.min(tau));
                if b <= a {
                    return 0.0;
                }
                let w = 2.0 * PI / tau;
                0.5 * ((b - a) - ((w * b).sin() - (w * a).sin()) / w)
            }
            GateShape::Gaussian => {
                let s = self.sigma();
                let h = self.gaussian_half_width();
                let c = tau / 2.0;
                let (a, b) = (a.max(c - h), b.min(c + h));
                if b <= a {
                    return 0.0;
                }
                let base = (-h * h / (2.0 * s * s)).exp();
                let scale = s * (PI / 2.0).sqrt();
                let z = |t: f64| libm::erf((t - c) / (s * SQRT_2));
                (scale * (z(b) - z(a)) - base * (b - a)) / (1.0 - base)
            }
        }
    }
}

/// Samples a gate pulse on a `sample_rate` grid.
///
/// Each sample holds the exact average of the continuous shape over its cell,
/// so `sum(x) * dt` equals the continuous pulse area. With DRAG enabled the
/// quadrature holds the cell average of `-drag_coefficient * da/dt`.
pub fn gate_envelope(g: &GateEnvelopeSpec, sample_rate: f64) -> Result<ComplexEnvelope> {
    g.validate()?;
    let n = (g.duration * sample_rate).round() as usize;
    if n < 64 {
        return Err(Error::TooShort(format!(
            "gate spans {n} samples, at least 64 are required"
        )));
    }
    let dt = 1.0 / sample_rate;
    let samples = (0..n)
        .map(|k| {
            let a = k as f64 * dt;
            let b = (k + 1) as f64 * dt;
            let re = g.peak_amplitude * g.unit_integral(a, b) / dt;
            let im = if g.drag_enabled {
                -g.drag_coefficient * g.peak_amplitude * (g.unit_shape(b) - g.unit_shape(a)) / dt
            } else {
                0.0
            };
            Complex64::new(re, im)
        })
        .collect();
    ComplexEnvelope::new(samples, sample_rate)
}
