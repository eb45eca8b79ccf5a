//! Declarative scenarios: a chain plus a communication link and/or a qubit
//! gate, the metrics to compute and the artifacts to emit. Also parameter
//! sweeps over a scenario template and calibration runs.
//!
//! Everything here is pure: results come back as in-memory files so callers
//! decide where and how to write them.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::str::FromStr;

use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::architectures::{run_chain, synth_qubit_pulse, TxChain};
use crate::calibration::{
    burst_probe, dpd_fit, iq_cal, leakage_cancel, on_off_ratio_db, polar_delay_align, rabi_amplitude_cal,
    with_amp_delay, with_cancel,
};
use crate::error::{Error, Result};
use crate::export::{fmt_f64, to_json_string};
use crate::metrics::{
    evm_budget, eye_metrics, image_rejection, psd_welch, run_link, spurs_sfdr, write_budget_csv,
    write_constellation_csv, write_eye_csv, write_psd_csv, CommLink,
};
use crate::modulation::{build_constellation, GateEnvelopeSpec, GateShape};
use crate::par::*;
use crate::qubit::{
    average_gate_fidelity, bloch_trajectory, peak_for_angle, propagate, pulse_area, write_bloch_csv, GateSpec,
    QubitModel,
};
use crate::signal::ComplexEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Comm,
    Qubit,
    Both,
}

fn default_sigma_fraction() -> f64 {
    0.25
}

/// Gate to synthesize and the system it drives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct QubitSetup {
    pub model: QubitModel,
    pub gate: GateSpec,
    pub shape: GateShape,
    #[serde(default = "default_sigma_fraction")]
    pub sigma_fraction: f64,
    #[serde(default)]
    pub drag_coefficient: Option<f64>,
    /// Envelope peak; when absent, the peak that gives the gate angle through
    /// an ideal chain.
    #[serde(default)]
    pub peak_amplitude: Option<f64>,
    pub sample_rate: f64,
}

impl QubitSetup {
    fn base_envelope(&self) -> GateEnvelopeSpec {
        let mut g = GateEnvelopeSpec::new(self.shape, self.gate.duration, 1.0);
        g.sigma_fraction = self.sigma_fraction;
        match self.drag_coefficient {
            Some(c) => g.with_drag(c),
            None => g,
        }
    }

    pub fn nominal_peak(&self) -> Result<f64> {
        match self.peak_amplitude {
            Some(p) => Ok(p),
            None => peak_for_angle(&self.model, &self.base_envelope(), self.sample_rate, self.gate.theta.abs()),
        }
    }

    pub fn envelope(&self) -> Result<GateEnvelopeSpec> {
        Ok(self.base_envelope().with_peak(self.nominal_peak()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gate.validate()?;
        if !(self.sample_rate > 0.0) {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        self.base_envelope().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PsdRequest {
    pub nseg: usize,
    #[serde(default)]
    pub overlap: f64,
}

/// Single-tone spur measurement at the scenario sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SfdrRequest {
    pub tone_hz: f64,
    #[serde(default = "unit")]
    pub amplitude: f64,
    #[serde(default = "default_tone_len")]
    pub n: usize,
    #[serde(default = "default_nseg")]
    pub nseg: usize,
    /// Search band, Hz; the whole spectrum when absent.
    #[serde(default)]
    pub band: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct IrrRequest {
    pub f_test: f64,
    #[serde(default = "default_nseg")]
    pub n: usize,
}

fn unit() -> f64 {
    1.0
}

fn default_tone_len() -> usize {
    16384
}

fn default_nseg() -> usize {
    1024
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MetricRequests {
    pub budget: bool,
    /// Amplitude levels of the in-phase eye.
    pub eye_levels: Option<usize>,
    pub psd: Option<PsdRequest>,
    pub sfdr: Option<SfdrRequest>,
    pub image_rejection: Option<IrrRequest>,
}

/// CSV artifacts to write next to `metrics.json`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub constellation: bool,
    pub eye: bool,
    pub psd: bool,
    pub bloch: bool,
    pub budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RabiCal {
    #[serde(default)]
    pub codes: Option<Vec<f64>>,
    #[serde(default = "default_codes")]
    pub n_codes: usize,
    #[serde(default = "unit")]
    pub max_code: f64,
}

fn default_codes() -> usize {
    41
}

impl Default for RabiCal {
    fn default() -> Self {
        Self {
            codes: None,
            n_codes: default_codes(),
            max_code: 1.0,
        }
    }
}

impl RabiCal {
    fn grid(&self) -> Vec<f64> {
        self.codes.clone().unwrap_or_else(|| {
            let n = self.n_codes.max(2);
            (0..n).map(|k| self.max_code * k as f64 / (n - 1) as f64).collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct IqCal {
    pub f_test: f64,
    #[serde(default = "default_nseg")]
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PolarDelayCal {
    pub resolution: f64,
    pub search_range: f64,
}

impl Default for PolarDelayCal {
    fn default() -> Self {
        Self {
            resolution: 50e-12,
            search_range: 400e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DpdCal {
    pub order: usize,
    pub amplitudes: Option<Vec<f64>>,
    pub n_amplitudes: usize,
    pub max_amplitude: f64,
}

impl Default for DpdCal {
    fn default() -> Self {
        Self {
            order: 7,
            amplitudes: None,
            n_amplitudes: 40,
            max_amplitude: 1.0,
        }
    }
}

impl DpdCal {
    fn grid(&self) -> Vec<f64> {
        self.amplitudes.clone().unwrap_or_else(|| {
            let n = self.n_amplitudes.max(1);
            (1..=n).map(|k| self.max_amplitude * k as f64 / n as f64).collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct LeakageCal {
    pub cycles: usize,
    pub period: usize,
}

impl Default for LeakageCal {
    fn default() -> Self {
        Self { cycles: 8, period: 64 }
    }
}

/// Per-procedure settings; absent sections use defaults where possible.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSetup {
    pub rabi: Option<RabiCal>,
    pub iq: Option<IqCal>,
    pub polar_delay: Option<PolarDelayCal>,
    pub dpd: Option<DpdCal>,
    pub leakage: Option<LeakageCal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub side: Side,
    #[serde(default)]
    pub chain: TxChain,
    #[serde(default)]
    pub comm: Option<CommLink>,
    #[serde(default)]
    pub qubit: Option<QubitSetup>,
    #[serde(default)]
    pub metrics: MetricRequests,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default)]
    pub calibration: CalibrationSetup,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let s: Scenario = serde_json::from_value(v)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(to_json_string(&serde_json::to_value(self)?))
    }

    pub fn validate(&self) -> Result<()> {
        let needs_comm = matches!(self.side, Side::Comm | Side::Both);
        let needs_qubit = matches!(self.side, Side::Qubit | Side::Both);
        if needs_comm && self.comm.is_none() {
            return Err(Error::Config("side requires a `comm` section".into()));
        }
        if needs_qubit && self.qubit.is_none() {
            return Err(Error::Config("side requires a `qubit` section".into()));
        }
        self.chain.validate()?;
        if let Some(c) = &self.comm {
            c.validate()?;
            build_constellation(&c.scheme)?;
        }
        if let Some(q) = &self.qubit {
            q.validate()?;
        }
        if matches!(self.metrics.eye_levels, Some(n) if n < 2) {
            return Err(Error::param("eye_levels", "need at least two levels"));
        }
        Ok(())
    }

    /// Sample rate of the communication link, else of the qubit drive.
    pub fn sample_rate(&self) -> Result<f64> {
        match (&self.comm, &self.qubit) {
            (Some(c), _) => Ok(c.sample_rate()),
            (None, Some(q)) => Ok(q.sample_rate),
            _ => Err(Error::Config("scenario has neither `comm` nor `qubit`".into())),
        }
    }

    fn uses_comm(&self) -> bool {
        matches!(self.side, Side::Comm | Side::Both)
    }

    fn uses_qubit(&self) -> bool {
        matches!(self.side, Side::Qubit | Side::Both)
    }
}

/// Metric tree plus the artifact files a run produced, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Value,
    pub files: BTreeMap<String, Vec<u8>>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs every requested metric. `metrics.json` is always among the files.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    s.validate()?;
    let mut metrics = Map::new();
    let mut files = BTreeMap::new();
    metrics.insert("name".into(), Value::String(s.name.clone()));

    if s.uses_comm() {
        let link = s.comm.as_ref().unwrap();
        let c = build_constellation(&link.scheme)?;
        let run = run_link(link, &s.chain)?;
        let errors = run
            .reference
            .iter()
            .zip(&run.demod.decisions)
            .filter(|(r, d)| c.nearest(**r) != **d)
            .count();
        let mut comm = Map::new();
        comm.insert("evm".into(), to_value(&run.evm)?);
        comm.insert("symbol_errors".into(), json!(errors));
        comm.insert("timing_offset".into(), json!(run.demod.timing_offset));
        if let Some(t) = &run.equalizer_taps {
            comm.insert("equalizer_taps".into(), to_value(t)?);
        }
        if s.outputs.constellation {
            let mut buf = Vec::new();
            write_constellation_csv(&mut buf, &c, &run.reference, &run.demod.soft_symbols)?;
            files.insert("constellation.csv".into(), buf);
        }
        if s.metrics.budget || s.outputs.budget {
            let b = evm_budget(link, &s.chain)?;
            comm.insert("budget".into(), to_value(&b)?);
            if s.outputs.budget {
                let mut buf = Vec::new();
                write_budget_csv(&mut buf, &b)?;
                files.insert("budget.csv".into(), buf);
            }
        }
        if let Some(n) = s.metrics.eye_levels {
            let e = eye_metrics(&run.rx, link.symbol_period(), n, link.pulse.guard_symbols())?;
            comm.insert("eye".into(), to_value(&e)?);
        }
        if s.outputs.eye {
            let mut buf = Vec::new();
            write_eye_csv(&mut buf, &run.rx, link.symbol_period())?;
            files.insert("eye.csv".into(), buf);
        }
        if s.metrics.psd.is_some() || s.outputs.psd {
            let req = s.metrics.psd.unwrap_or(PsdRequest {
                nseg: 256.min(run.rx.len()),
                overlap: 0.5,
            });
            let spec = psd_welch(&run.rx, req.nseg, req.overlap)?;
            comm.insert(
                "psd".into(),
                json!({
                    "total_power": spec.total_power(),
                    "resolution_bw": spec.resolution_bw,
                    "mean_power": run.rx.mean_power(),
                }),
            );
            if s.outputs.psd {
                let mut buf = Vec::new();
                write_psd_csv(&mut buf, &spec)?;
                files.insert("psd.csv".into(), buf);
            }
        }
        metrics.insert("comm".into(), Value::Object(comm));
    }

    let fs = s.sample_rate()?;
    if let Some(req) = &s.metrics.sfdr {
        metrics.insert("sfdr".into(), to_value(&tone_sfdr(&s.chain, fs, req)?)?);
    }
    if let Some(req) = &s.metrics.image_rejection {
        metrics.insert(
            "image_rejection".into(),
            to_value(&image_rejection(&s.chain, fs, req.f_test, req.n)?)?,
        );
    }

    if s.uses_qubit() {
        let q = s.qubit.as_ref().unwrap();
        let genv = q.envelope()?;
        let drive = synth_qubit_pulse(&s.chain, &q.gate, &genv, q.sample_rate)?;
        let u = propagate(&q.model, &drive, 1)?;
        let f = average_gate_fidelity(&u, &q.gate)?;
        let area = pulse_area(&q.model, &drive);
        metrics.insert(
            "qubit".into(),
            json!({
                "fidelity": to_value(&f)?,
                "peak_amplitude": genv.peak_amplitude,
                "pulse_area": {"theta": area.theta, "phase": area.phase},
            }),
        );
        if s.outputs.bloch {
            let mut buf = Vec::new();
            write_bloch_csv(&bloch_trajectory(&q.model, &drive)?, &mut buf)?;
            files.insert("bloch.csv".into(), buf);
        }
    }

    let metrics = Value::Object(metrics);
    files.insert("metrics.json".into(), to_json_string(&metrics).into_bytes());
    Ok(RunOutput { metrics, files })
}

fn tone_sfdr(chain: &TxChain, fs: f64, req: &SfdrRequest) -> Result<crate::metrics::SfdrReport> {
    let x: Vec<Complex64> = (0..req.n)
        .map(|k| Complex64::from_polar(req.amplitude, 2.0 * PI * req.tone_hz * k as f64 / fs))
        .collect();
    let y = run_chain(chain, &ComplexEnvelope::new(x, fs)?)?;
    let spec = psd_welch(&y, req.nseg, 0.5)?;
    let band = req.band.unwrap_or([-fs / 2.0, fs / 2.0]);
    spurs_sfdr(&spec, req.tone_hz, (band[0], band[1]))
}

/// One swept parameter: a dotted path into the scenario JSON and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[schemars(with = "Scenario")]
    pub template: Value,
    pub axes: Vec<SweepAxis>,
}

/// Published JSON schemas for the scenario and sweep configs, keyed by file
/// name.
pub fn config_schemas() -> BTreeMap<String, String> {
    let render = |s: schemars::Schema| to_json_string(&s.to_value());
    BTreeMap::from([
        ("scenario.schema.json".to_string(), render(schemars::schema_for!(Scenario))),
        ("sweep.schema.json".to_string(), render(schemars::schema_for!(SweepSpec))),
    ])
}

fn lookup<'a>(v: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(v, |cur, seg| match cur {
        Value::Object(m) => m.get_mut(seg),
        Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    })
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: SweepSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(Error::Config("a sweep needs one or two axes".into()));
        }
        Scenario::from_value(self.template.clone())?;
        let mut t = self.template.clone();
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(Error::Config(format!("sweep grid for `{}` is empty", a.path)));
            }
            if lookup(&mut t, &a.path).is_none() {
                return Err(Error::Config(format!("swept path `{}` does not exist in the template", a.path)));
            }
        }
        Ok(())
    }

    /// Grid points in row-major order over the axes.
    pub fn points(&self) -> Vec<Vec<Value>> {
        let mut pts: Vec<Vec<Value>> = vec![vec![]];
        for a in &self.axes {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    a.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        pts
    }

    pub fn scenario_at(&self, point: &[Value]) -> Result<Scenario> {
        let mut t = self.template.clone();
        for (a, v) in self.axes.iter().zip(point) {
            *lookup(&mut t, &a.path)
                .ok_or_else(|| Error::Config(format!("swept path `{}` does not exist", a.path)))? = v.clone();
        }
        Scenario::from_value(t)
    }
}

/// Numeric leaves of a metric tree under dotted keys.
pub fn flatten_metrics(v: &Value) -> BTreeMap<String, f64> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, f64>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            Value::Number(n) => {
                if let Some(x) = n.as_f64() {
                    out.insert(prefix.to_string(), x);
                }
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

fn cell(v: &Value) -> String {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => fmt_f64(n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every grid point (concurrently) and returns a CSV with one row per
/// point in grid order. Failed points are marked and leave metric cells empty.
pub fn run_sweep(spec: &SweepSpec) -> Result<String> {
    spec.validate()?;
    let points = spec.points();
    let results: Vec<std::result::Result<BTreeMap<String, f64>, String>> = points
        .par_iter()
        .map(|p| {
            spec.scenario_at(p)
                .and_then(|s| run_scenario(&s))
                .map(|o| flatten_metrics(&o.metrics))
                .map_err(|e| e.to_string())
        })
        .collect();
    let columns: BTreeSet<String> = results.iter().flatten().flat_map(|m| m.keys().cloned()).collect();
    let mut w = crate::export::csv_writer(Vec::new());
    let header: Vec<String> = spec
        .axes
        .iter()
        .map(|a| a.path.clone())
        .chain(["status".to_string()])
        .chain(columns.iter().cloned())
        .collect();
    w.write_record(&header)?;
    for (p, r) in points.iter().zip(&results) {
        let mut row: Vec<String> = p.iter().map(cell).collect();
        match r {
            Ok(m) => {
                row.push("ok".into());
                row.extend(columns.iter().map(|c| m.get(c).map(|x| fmt_f64(*x)).unwrap_or_default()));
            }
            Err(e) => {
                log::warn!("sweep point {p:?} failed: {e}");
                row.push("FAILED".into());
                row.extend(columns.iter().map(|_| String::new()));
            }
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Rabi,
    Iq,
    PolarDelay,
    Dpd,
    Leakage,
}

impl Procedure {
    pub const ALL: [Procedure; 5] = [
        Procedure::Rabi,
        Procedure::Iq,
        Procedure::PolarDelay,
        Procedure::Dpd,
        Procedure::Leakage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Procedure::Rabi => "rabi",
            Procedure::Iq => "iq",
            Procedure::PolarDelay => "polar_delay",
            Procedure::Dpd => "dpd",
            Procedure::Leakage => "leakage",
        }
    }
}

impl FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Procedure::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown procedure `{s}`")))
    }
}

/// Correction, paired before/after metrics, and the scenario with the
/// correction folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutput {
    pub report: Value,
    pub calibrated: Scenario,
}

/// Whether the corrected figure is at least as good as the raw one.
fn no_worse(before: f64, after: f64, higher_is_better: bool) -> bool {
    if higher_is_better {
        after >= before
    } else {
        after <= before
    }
}

fn comm_link(s: &Scenario) -> Result<&CommLink> {
    s.comm
        .as_ref()
        .ok_or_else(|| Error::Config("procedure needs a `comm` section".into()))
}

fn qubit_setup(s: &Scenario) -> Result<&QubitSetup> {
    s.qubit
        .as_ref()
        .ok_or_else(|| Error::Config("procedure needs a `qubit` section".into()))
}

fn pi_infidelity(chain: &TxChain, q: &QubitSetup, peak: f64) -> Result<f64> {
    let genv = q.base_envelope().with_peak(peak);
    let drive = synth_qubit_pulse(chain, &q.gate, &genv, q.sample_rate)?;
    Ok(average_gate_fidelity(&propagate(&q.model, &drive, 1)?, &q.gate)?.infidelity)
}

/// Runs one calibration procedure on the scenario's chain. If the correction
/// would make the training metric worse, it is reported but not applied.
pub fn run_calibration(s: &Scenario, procedure: Procedure) -> Result<CalibrationOutput> {
    s.validate()?;
    let cal = &s.calibration;
    let mut out = s.clone();
    let (correction, metric, higher_is_better, before, after) = match procedure {
        Procedure::Rabi => {
            let q = qubit_setup(s)?;
            let cfg = cal.rabi.clone().unwrap_or_default();
            let lut = rabi_amplitude_cal(&q.model, &s.chain, &q.base_envelope(), q.sample_rate, &cfg.grid())?;
            let code = lut.code_for(q.gate.theta.abs().min(PI))?;
            let before = pi_infidelity(&s.chain, q, q.nominal_peak()?)?;
            let after = pi_infidelity(&s.chain, q, code)?;
            out.qubit.as_mut().unwrap().peak_amplitude = Some(code);
            (json!({"lut": to_value(&lut)?, "peak_amplitude": code}), "infidelity", false, before, after)
        }
        Procedure::Iq => {
            let cfg = cal
                .iq
                .ok_or_else(|| Error::Config("procedure `iq` needs `calibration.iq.f_test`".into()))?;
            let fs = s.sample_rate()?;
            let corr = iq_cal(&s.chain, fs, cfg.f_test, cfg.n)?;
            let fixed = corr.apply(&s.chain);
            let b = image_rejection(&s.chain, fs, cfg.f_test, cfg.n)?;
            let a = image_rejection(&fixed, fs, cfg.f_test, cfg.n)?;
            out.chain = fixed;
            let ok = a.irr_db >= b.irr_db;
            let report = json!({
                "procedure": procedure.as_str(),
                "correction": to_value(&corr)?,
                "before": to_value(&b)?,
                "after": to_value(&a)?,
                "applied": ok,
            });
            if !ok {
                out.chain = s.chain.clone();
            }
            return Ok(CalibrationOutput { report, calibrated: out });
        }
        Procedure::PolarDelay => {
            let link = comm_link(s)?;
            let cfg = cal.polar_delay.unwrap_or_default();
            let a = polar_delay_align(&s.chain, link, cfg.resolution, cfg.search_range)?;
            let before = run_link(link, &s.chain)?.evm.evm_db;
            let fixed = with_amp_delay(&s.chain, a.best_delay)?;
            let after = run_link(link, &fixed)?.evm.evm_db;
            out.chain = fixed;
            (to_value(&a)?, "evm_db", false, before, after)
        }
        Procedure::Dpd => {
            let link = comm_link(s)?;
            let cfg = cal.dpd.clone().unwrap_or_default();
            let p = dpd_fit(&s.chain, &cfg.grid(), cfg.order, link.sample_rate())?;
            let before = run_link(link, &s.chain)?.evm.evm_db;
            let fixed = p.apply(&s.chain);
            let after = run_link(link, &fixed)?.evm.evm_db;
            out.chain = fixed;
            (to_value(&p)?, "evm_db", false, before, after)
        }
        Procedure::Leakage => {
            let cfg = cal.leakage.unwrap_or_default();
            let probe = burst_probe(cfg.cycles, cfg.period, s.sample_rate()?)?;
            let cancel = leakage_cancel(&s.chain, &probe)?;
            let raw = with_cancel(&s.chain, Complex64::new(0.0, 0.0))?;
            let before = on_off_ratio_db(&raw, &probe)?;
            let fixed = with_cancel(&s.chain, cancel)?;
            let after = on_off_ratio_db(&fixed, &probe)?;
            out.chain = fixed;
            (json!({"cancel": to_value(&cancel)?}), "on_off_ratio_db", true, before, after)
        }
    };
    let applied = no_worse(before, after, higher_is_better);
    if !applied {
        out = s.clone();
    }
    let report = json!({
        "procedure": procedure.as_str(),
        "correction": correction,
        "before": {metric: before},
        "after": {metric: after},
        "applied": applied,
    });
    Ok(CalibrationOutput { report, calibrated: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qpsk() -> Value {
        json!({
            "name": "qpsk",
            "side": "comm",
            "comm": {
                "scheme": {"scheme": "m_psk", "order": 4},
                "pulse": {"kind": "raised_cosine", "rolloff": 0.35, "span_symbols": 16, "samples_per_symbol": 8},
                "symbol_rate": 1e9,
                "n_symbols": 256,
                "seed": 1
            },
            "outputs": {"constellation": true, "eye": true, "psd": true}
        })
    }

    fn pi_pulse() -> Value {
        json!({
            "name": "pi",
            "side": "qubit",
            "qubit": {
                "model": {"levels": 2, "drive_gain": 3.0e8},
                "gate": {"theta": PI, "duration": 40e-9},
                "shape": "gaussian",
                "sample_rate": 2e9
            },
            "outputs": {"bloch": true}
        })
    }

    #[test]
    fn ideal_runs() {
        let out = run_scenario(&Scenario::from_value(qpsk()).unwrap()).unwrap();
        assert!(out.metrics["comm"]["evm"]["evm_db"].as_f64().unwrap() < -60.0);
        for f in ["metrics.json", "constellation.csv", "eye.csv", "psd.csv"] {
            assert!(out.files.contains_key(f), "{f}");
        }
        let q = run_scenario(&Scenario::from_value(pi_pulse()).unwrap()).unwrap();
        assert!(q.metrics["qubit"]["fidelity"]["infidelity"].as_f64().unwrap() < 1e-9);
        assert!(q.files.contains_key("bloch.csv"));
    }

    #[test]
    fn config_errors_name_the_key() {
        let mut v = qpsk();
        v["comm"]["bogus"] = json!(1);
        let e = Scenario::from_value(v).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");

        let mut v = qpsk();
        v["chain"] = json!({"stages": [{"kind": "phase_noise", "rate": 1e3}]});
        let e = Scenario::from_value(v).unwrap_err().to_string();
        assert!(e.contains("seed"), "{e}");

        let mut v = qpsk();
        v["side"] = json!("both");
        assert!(Scenario::from_value(v).is_err());
        assert!(Scenario::from_json("{not json").is_err());
    }

    #[test]
    fn round_trip_is_metric_identical() {
        let s = Scenario::from_value(qpsk()).unwrap();
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(run_scenario(&back).unwrap(), run_scenario(&s).unwrap());
    }

    #[test]
    fn sweep_rows_in_grid_order() {
        let mut t = pi_pulse();
        t["outputs"] = json!({});
        t["chain"] = json!({"stages": [{"kind": "amplitude_error", "eps": 0.0}]});
        let spec = SweepSpec {
            template: t,
            axes: vec![SweepAxis {
                path: "chain.stages.0.eps".into(),
                values: vec![json!(0.01), json!(-2.0), json!(0.02)],
            }],
        };
        let csv = run_sweep(&spec).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("chain.stages.0.eps,status,"));
        assert_eq!(lines.len(), 4);
        assert!(lines[2].contains("FAILED"));
        assert!(lines[1].contains(",ok,") && lines[3].contains(",ok,"));

        let mut bad = spec.clone();
        bad.axes[0].values.clear();
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.axes[0].path = "chain.stages.3.eps".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn procedure_names() {
        for p in Procedure::ALL {
            assert_eq!(p.as_str().parse::<Procedure>().unwrap(), p);
        }
        assert!("bogus".parse::<Procedure>().is_err());
    }

    #[test]
    fn leakage_calibration_applies() {
        let mut v = qpsk();
        v["chain"] = json!({"stages": [{"kind": "on_off_leakage", "off_ratio_db": 38.2}]});
        let s = Scenario::from_value(v).unwrap();
        let out = run_calibration(&s, Procedure::Leakage).unwrap();
        assert_eq!(out.report["applied"], json!(true));
        let after = out.report["after"]["on_off_ratio_db"].as_f64().unwrap();
        assert!(after >= 58.2);
        let again = run_calibration(&out.calibrated, Procedure::Leakage).unwrap();
        assert_eq!(again.report["correction"], out.report["correction"]);
    }
}
