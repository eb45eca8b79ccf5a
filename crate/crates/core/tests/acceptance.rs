//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! one PASS/FAIL line regardless of output capture; exits non-zero on any
//! failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use envsynth::architectures::{polar_chain, run_chain, synth_qubit_pulse, PolarConfig, StageSpec, TxChain};
use envsynth::calibration::polar_delay_align;
use envsynth::export::to_json_string;
use envsynth::impairments::iq_coefficients;
use envsynth::metrics::{evm_budget, image_rejection, run_link, CommLink};
use envsynth::modulation::{
    build_constellation, occupied_bandwidth, shape_filter, GateEnvelopeSpec, GateShape, PulseKind, PulseShape,
    Scheme,
};
use envsynth::qubit::{
    average_gate_fidelity, leakage_population, peak_for_angle, propagate, rabi_protocol, GateSpec, QubitModel,
};
use envsynth::scenario::{run_calibration, run_scenario, run_sweep, Procedure, Scenario, SweepSpec};
use envsynth::signal::{wrap_phase, ComplexEnvelope};
use envsynth::Complex64;
use serde_json::Value;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const FS_QUBIT: f64 = 2e9;

fn two_level_setup() -> (QubitModel, GateEnvelopeSpec) {
    (QubitModel::two_level(2.5e8), GateEnvelopeSpec::new(GateShape::Gaussian, 40e-9, 1.0))
}

fn gate_infidelity(model: &QubitModel, chain: &TxChain, theta: f64, genv: &GateEnvelopeSpec) -> Result<f64, String> {
    let peak = ok(peak_for_angle(model, genv, FS_QUBIT, theta))?;
    let gate = ok(GateSpec::new(theta, 0.0, genv.duration))?;
    let drive = ok(synth_qubit_pulse(chain, &gate, &genv.with_peak(peak), FS_QUBIT))?;
    let u = ok(propagate(model, &drive, 1))?;
    Ok(ok(average_gate_fidelity(&u, &gate))?.infidelity)
}

fn rel(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected.abs()
}

fn amplitude_coefficient() -> Check {
    let (model, genv) = two_level_setup();
    let mut worst = 0.0_f64;
    for eps in [0.005, 0.01, 0.02] {
        let chain = TxChain::identity().with_stage(StageSpec::AmplitudeError { eps });
        let got = gate_infidelity(&model, &chain, PI, &genv)?;
        let want = PI * PI / 6.0 * eps * eps;
        worst = worst.max(rel(got, want));
    }
    ensure!(worst < 0.05, "worst relative deviation {worst:.3e}");
    Ok(format!("worst relative deviation {worst:.2e}"))
}

fn phase_coefficient() -> Check {
    let (model, genv) = two_level_setup();
    let mut worst = 0.0_f64;
    for theta in [PI / 2.0, PI] {
        for phi in [0.005, 0.01, 0.02] {
            let chain = TxChain::identity().with_stage(StageSpec::StaticPhaseError { phi });
            let got = gate_infidelity(&model, &chain, theta, &genv)?;
            let want = 2.0 / 3.0 * (theta / 2.0).sin().powi(2) * phi * phi;
            worst = worst.max(rel(got, want));
        }
    }
    ensure!(worst < 0.05, "worst relative deviation {worst:.3e}");
    Ok(format!("worst relative deviation {worst:.2e}"))
}

fn rabi_law() -> Check {
    let (model, genv) = two_level_setup();
    let two_pi = ok(peak_for_angle(&model, &genv, FS_QUBIT, 2.0 * PI))?;
    let amps: Vec<f64> = (0..21).map(|k| two_pi * k as f64 / 20.0).collect();
    let p1 = ok(rabi_protocol(&model, &TxChain::identity(), &genv, FS_QUBIT, &amps))?;
    let worst = p1
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let theta = 2.0 * PI * k as f64 / 20.0;
            (p - (theta / 2.0).sin().powi(2)).abs()
        })
        .fold(0.0, f64::max);
    ensure!(worst < 1e-6, "max deviation {worst:.3e}");
    Ok(format!("max deviation {worst:.2e} over 21 points"))
}

fn link(scheme: Scheme, kind: PulseKind, rolloff: f64, sps: usize) -> CommLink {
    CommLink {
        scheme,
        pulse: PulseShape {
            kind,
            rolloff,
            span_symbols: 16,
            samples_per_symbol: sps,
        },
        symbol_rate: 1e9,
        n_symbols: 512,
        seed: 11,
        equalizer: None,
    }
}

fn qam16() -> Scheme {
    Scheme::SquareQam { order: 16 }
}

fn evm_additivity() -> Check {
    // 16 samples per symbol keeps the 5x-symbol-rate cutoff below Nyquist.
    let l = link(qam16(), PulseKind::RaisedCosine, 0.35, 16);
    let chain = TxChain::identity()
        .with_stage(StageSpec::AmplitudeError { eps: 0.02 })
        .with_stage(StageSpec::StaticPhaseError { phi: 0.02 })
        .with_stage(StageSpec::LoFeedthrough {
            offset: Complex64::new(0.02, 0.0),
        })
        .with_stage(StageSpec::BandwidthLimit {
            cutoff: 5.0 * l.symbol_rate,
        });
    let b = ok(evm_budget(&l, &chain))?;
    let d = rel(b.total_measured, b.total_predicted);
    ensure!(d < 0.10, "measured {:.5} vs RSS {:.5} ({d:.3})", b.total_measured, b.total_predicted);
    Ok(format!(
        "measured {:.5} vs RSS {:.5}, deviation {:.1}%",
        b.total_measured,
        b.total_predicted,
        100.0 * d
    ))
}

fn evm_identities() -> Check {
    let l = link(qam16(), PulseKind::RaisedCosine, 0.35, 8);
    let c = Complex64::new(0.05, -0.03);
    let cases = [
        (StageSpec::AmplitudeError { eps: 0.05 }, 0.05),
        (StageSpec::StaticPhaseError { phi: 0.1 }, 2.0 * (0.05_f64).sin()),
        (StageSpec::LoFeedthrough { offset: c }, c.norm()),
    ];
    let mut worst = 0.0_f64;
    for (stage, want) in cases {
        let run = ok(run_link(&l, &TxChain::identity().with_stage(stage)))?;
        worst = worst.max((run.evm.evm_rms - want).abs());
    }
    ensure!(worst < 1e-9, "worst absolute deviation {worst:.3e}");
    Ok(format!("worst absolute deviation {worst:.2e}"))
}

fn zero_isi() -> Check {
    let mut worst = f64::NEG_INFINITY;
    let mut bw = Vec::new();
    for beta in [0.25, 0.5, 1.0] {
        let l = link(qam16(), PulseKind::RaisedCosine, beta, 8);
        let run = ok(run_link(&l, &TxChain::identity()))?;
        worst = worst.max(run.evm.evm_db);
        bw.push(occupied_bandwidth(&shape_filter(&l.pulse), 8, 40.0));
    }
    ensure!(worst < -60.0, "worst loopback EVM {worst:.1} dB");
    ensure!(bw.windows(2).all(|w| w[1] > w[0]), "-40 dB bandwidths not increasing: {bw:?}");
    Ok(format!(
        "worst loopback EVM {worst:.1} dB; -40 dB bandwidth {:.3}/{:.3}/{:.3} x symbol rate",
        bw[0], bw[1], bw[2]
    ))
}

fn irr_closed_form() -> Check {
    let fs = 1e9;
    let f_test = 5e7;
    let n = 4096;
    let mut worst = 0.0_f64;
    for gain in [0.01, 0.03, 0.1] {
        for skew in [0.01, 0.03, 0.1] {
            let chain = TxChain::identity().with_stage(StageSpec::IqImbalance { gain, skew });
            let r = ok(image_rejection(&chain, fs, f_test, n))?;
            let (mu, nu) = iq_coefficients(gain, skew);
            let want = 20.0 * (mu.norm() / nu.norm()).log10();
            worst = worst.max((r.irr_db - want).abs());
        }
    }
    ensure!(worst < 0.1, "closed-form mismatch {worst:.3} dB");

    let impaired = TxChain::identity()
        .with_stage(StageSpec::IqImbalance { gain: 0.05, skew: 0.05 })
        .with_stage(StageSpec::LoFeedthrough {
            offset: Complex64::new(0.03, -0.02),
        });
    let corr = ok(envsynth::calibration::iq_cal(&impaired, fs, f_test, n))?;
    let after = ok(image_rejection(&corr.apply(&impaired), fs, f_test, n))?;
    ensure!(after.irr_db >= 42.0, "post-calibration IRR {:.1} dB", after.irr_db);
    ensure!(after.lo_rejection_db >= 41.0, "post-calibration carrier rejection {:.1} dB", after.lo_rejection_db);
    Ok(format!(
        "closed form within {worst:.1e} dB; calibrated IRR {:.0} dB, carrier rejection {:.0} dB",
        after.irr_db, after.lo_rejection_db
    ))
}

fn harmonic(multiplier: u32, fundamental: Vec<StageSpec>) -> TxChain {
    TxChain::identity().with_stage(StageSpec::Harmonic {
        multiplier,
        predivide: true,
        fundamental,
        rise_fall: 0.0,
        spurs: vec![],
        constant_impedance: true,
        state_errors: vec![],
    })
}

fn harmonic_law() -> Check {
    let fs = 1e9;
    let n = 2000;
    let cw = ok(ComplexEnvelope::new(vec![Complex64::new(1.0, 0.0); n], fs))?;
    let phi = 0.07;
    let mut worst_det = 0.0_f64;
    for m in [2u32, 3, 4] {
        let y = ok(run_chain(&harmonic(m, vec![StageSpec::StaticPhaseError { phi }]), &cw))?;
        let dev = y.samples().iter().map(|s| (wrap_phase(s.arg()) - m as f64 * phi).abs()).fold(0.0, f64::max);
        worst_det = worst_det.max(dev);
    }
    ensure!(worst_det < 1e-12, "deterministic deviation off by {worst_det:.3e} rad");

    // Wiener phase noise at the fundamental, variance rate * t. Each
    // multiplier gets its own independent ensemble of 200 seeds.
    let rate = 0.01 * fs / n as f64;
    let mut worst = 0.0_f64;
    for m in [2u32, 3, 4] {
        let mut acc = vec![0.0; n];
        for seed in (1..=200).map(|k| 1000 * m as u64 + k) {
            let y = ok(run_chain(&harmonic(m, vec![StageSpec::PhaseNoise { rate, seed }]), &cw))?;
            for (a, x) in acc.iter_mut().zip(y.samples()) {
                *a += x.arg().powi(2) / 200.0;
            }
        }
        // Pool the second half of the record against the analytic law.
        let (measured, law): (f64, f64) = (n / 2..n)
            .map(|k| (acc[k], (m * m) as f64 * rate * k as f64 / fs))
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        worst = worst.max(rel(measured, law));
    }
    ensure!(worst < 0.15, "ensemble variance off M^2 scaling by {:.1}%", 100.0 * worst);
    Ok(format!(
        "deterministic error {worst_det:.1e} rad; ensemble variance within {:.1}% of M^2 scaling (200 seeds)",
        100.0 * worst
    ))
}

fn polar_probe() -> CommLink {
    link(qam16(), PulseKind::RaisedCosine, 0.35, 16)
}

fn polar_alignment() -> Check {
    let probe = polar_probe();
    let chain = ok(polar_chain(&PolarConfig {
        delay_mismatch: 180e-12,
        ..Default::default()
    }))?;
    let a = ok(polar_delay_align(&chain, &probe, 50e-12, 400e-12))?;
    ensure!((a.best_delay - 180e-12).abs() <= 50e-12, "recovered {:.0} ps", a.best_delay * 1e12);

    let delays: Vec<f64> = (-4..=4).map(|k| k as f64 * 50e-12).collect();
    let mut evm = Vec::new();
    for &d in &delays {
        let ch = ok(polar_chain(&PolarConfig {
            delay_mismatch: d,
            ..Default::default()
        }))?;
        evm.push(ok(run_link(&probe, &ch))?.evm.evm_rms);
    }
    let c = 4;
    let up = (c..delays.len() - 1).all(|k| evm[k + 1] > evm[k]);
    let down = (1..=c).all(|k| evm[k - 1] > evm[k]);
    ensure!(up && down, "EVM not monotone in |delay|: {evm:?}");
    Ok(format!(
        "recovered {:.0} ps for 180 ps; EVM monotone over +-200 ps ({:.1} dB at 200 ps)",
        a.best_delay * 1e12,
        20.0 * evm[8].log10()
    ))
}

fn drag_property() -> Check {
    let alpha = -2.0 * PI * 200e6;
    let model = QubitModel::transmon(2.5e8, alpha);
    let genv = GateEnvelopeSpec::new(GateShape::Gaussian, 16e-9, 1.0);
    let fs = 8e9;
    let peak = ok(peak_for_angle(&model, &genv, fs, PI))?;
    let gate = ok(GateSpec::new(PI, 0.0, genv.duration))?;
    let run = |g: GateEnvelopeSpec| -> Result<(f64, f64), String> {
        let drive = ok(synth_qubit_pulse(&TxChain::identity(), &gate, &g.with_peak(peak), fs))?;
        let leak = ok(leakage_population(&model, &drive))?;
        let inf = ok(average_gate_fidelity(&ok(propagate(&model, &drive, 1))?, &gate))?.infidelity;
        Ok((leak, inf))
    };
    let (leak0, inf0) = run(genv)?;
    let (leak1, inf1) = run(genv.with_drag(1.0 / alpha))?;
    ensure!(leak1 < leak0, "leakage {leak1:.3e} with DRAG vs {leak0:.3e} without");
    ensure!(inf1 <= 1.1 * inf0, "infidelity {inf1:.3e} with DRAG vs {inf0:.3e} without");
    Ok(format!(
        "leakage {leak0:.2e} -> {leak1:.2e}; infidelity {inf0:.2e} -> {inf1:.2e}"
    ))
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn bundled(name: &str) -> Result<Value, String> {
    let text = ok(fs::read_to_string(scenarios_dir().join(name)))?;
    ok(serde_json::from_str(&text))
}

/// Largest absolute difference between numeric leaves of two trees with the
/// same shape; infinite if the shapes differ.
fn max_delta(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs(),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            x.iter().zip(y).map(|(p, q)| max_delta(p, q)).fold(0.0, f64::max)
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x
            .iter()
            .map(|(k, v)| y.get(k).map_or(f64::INFINITY, |w| max_delta(v, w)))
            .fold(0.0, f64::max),
        _ if a == b => 0.0,
        _ => f64::INFINITY,
    }
}

fn calibration_suite() -> Check {
    let mut dip = bundled("calibrate_rabi.json")?;
    // Rect gate so the local dip in the code map is seen undiluted.
    let table: Vec<f64> = (0..=64)
        .map(|k| {
            let u = k as f64 / 64.0;
            u - 0.06 * (-((u - 0.3) / 0.02).powi(2)).exp()
        })
        .collect();
    dip["chain"]["stages"][0]["table"] = serde_json::json!(table);
    dip["qubit"]["shape"] = serde_json::json!("rect");
    let rect_gain = {
        let g = GateEnvelopeSpec::new(GateShape::Rect, 40e-9, 1.0);
        ok(peak_for_angle(&QubitModel::two_level(1.0), &g, FS_QUBIT, PI))? / 0.6
    };
    dip["qubit"]["model"]["drive_gain"] = serde_json::json!(rect_gain);

    let cases: Vec<(&str, Value, Procedure)> = vec![
        ("rabi cubic", bundled("calibrate_rabi.json")?, Procedure::Rabi),
        ("rabi dip", dip, Procedure::Rabi),
        ("iq", bundled("calibrate_iq.json")?, Procedure::Iq),
        ("polar_delay", bundled("calibrate_polar_delay.json")?, Procedure::PolarDelay),
        ("dpd", bundled("calibrate_dpd.json")?, Procedure::Dpd),
        ("leakage", bundled("calibrate_leakage.json")?, Procedure::Leakage),
    ];
    let mut notes = Vec::new();
    for (label, cfg, procedure) in cases {
        let s = ok(Scenario::from_value(cfg))?;
        let first = ok(run_calibration(&s, procedure))?;
        let r = &first.report;
        ensure!(r["applied"] == Value::Bool(true), "{label}: correction degraded the training metric");
        let second = ok(run_calibration(&first.calibrated, procedure))?;
        let delta = max_delta(&r["correction"], &second.report["correction"]);
        ensure!(delta < 1e-6, "{label}: re-run changed the correction by {delta:.3e}");
        if procedure == Procedure::Rabi {
            let after = r["after"]["infidelity"].as_f64().unwrap();
            ensure!(after < 1e-4, "{label}: pi-pulse infidelity {after:.3e} after calibration");
            notes.push(format!("{label} {after:.1e}"));
        }
    }
    Ok(format!("5 procedures idempotent and non-degrading; Rabi infidelity {}", notes.join(", ")))
}

fn constellations() -> Check {
    let sum = ok(build_constellation(&Scheme::QpskSum { ratios: vec![2.0, 1.0] }))?;
    let qam = ok(build_constellation(&qam16()))?;
    let unmatched = sum
        .points()
        .iter()
        .map(|p| qam.points().iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    ensure!(sum.len() == 16 && unmatched < 1e-12, "qpsk_sum([2,1]) is {unmatched:.3e} off 16-QAM");

    let schemes = [
        Scheme::MAsk { order: 2 },
        Scheme::MAsk { order: 4 },
        Scheme::MAsk { order: 8 },
        Scheme::MPsk { order: 2 },
        Scheme::MPsk { order: 4 },
        Scheme::MPsk { order: 8 },
        Scheme::MPsk { order: 16 },
        Scheme::SquareQam { order: 4 },
        Scheme::SquareQam { order: 16 },
        Scheme::SquareQam { order: 64 },
        Scheme::SquareQam { order: 256 },
        Scheme::QpskSum { ratios: vec![2.0, 1.0] },
        Scheme::QpskSum { ratios: vec![1.0, 0.7] },
        Scheme::StarQam { rings: 2, phases: 8 },
        Scheme::StarQam { rings: 4, phases: 4 },
    ];
    let mut worst = 0.0_f64;
    for s in &schemes {
        let c = ok(build_constellation(s))?;
        worst = worst.max((c.rms() - 1.0).abs());
    }
    ensure!(worst < 1e-12, "RMS off unity by {worst:.3e}");
    Ok(format!(
        "qpsk_sum([2,1]) matches 16-QAM to {unmatched:.1e}; {} schemes unit-RMS to {worst:.1e}",
        schemes.len()
    ))
}

fn procedure_for(file: &str) -> Option<Procedure> {
    let stem = file.strip_prefix("calibrate_")?.strip_suffix(".json")?;
    stem.parse().ok()
}

fn determinism() -> Check {
    let mut names: Vec<String> = ok(fs::read_dir(scenarios_dir()))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    ensure!(!names.is_empty(), "no bundled scenarios");
    for name in &names {
        let text = ok(fs::read_to_string(scenarios_dir().join(name)))?;
        let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
            if name.starts_with("sweep") {
                let spec = ok(SweepSpec::from_json(&text))?;
                return Ok(vec![("sweep.csv".into(), ok(run_sweep(&spec))?.into_bytes())]);
            }
            let s = ok(Scenario::from_json(&text))?;
            let mut files: Vec<(String, Vec<u8>)> = ok(run_scenario(&s))?.files.into_iter().collect();
            if let Some(p) = procedure_for(name) {
                let out = ok(run_calibration(&s, p))?;
                files.push(("calibration.json".into(), to_json_string(&out.report).into_bytes()));
            }
            Ok(files)
        };
        let (a, b) = (run()?, run()?);
        ensure!(a == b, "{name}: outputs differ between runs");
    }
    Ok(format!("{} bundled configs byte-identical across runs", names.len()))
}

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Option<Duration>,
    check: fn() -> Check,
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, title: "amplitude-error infidelity law", budget: Some(s(1)), check: amplitude_coefficient },
        Criterion { id: 2, title: "axis-error infidelity law", budget: Some(s(1)), check: phase_coefficient },
        Criterion { id: 3, title: "Rabi oscillation law", budget: Some(s(5)), check: rabi_law },
        Criterion { id: 4, title: "EVM budget additivity", budget: Some(s(30)), check: evm_additivity },
        Criterion { id: 5, title: "EVM analytic identities", budget: None, check: evm_identities },
        Criterion { id: 6, title: "raised-cosine zero ISI and bandwidth", budget: None, check: zero_isi },
        Criterion { id: 7, title: "image rejection closed form and calibration", budget: None, check: irr_closed_form },
        Criterion { id: 8, title: "harmonic phase multiplication", budget: None, check: harmonic_law },
        Criterion { id: 9, title: "polar delay alignment", budget: None, check: polar_alignment },
        Criterion { id: 10, title: "DRAG leakage suppression", budget: Some(s(10)), check: drag_property },
        Criterion { id: 11, title: "calibration idempotence and non-degradation", budget: None, check: calibration_suite },
        Criterion { id: 12, title: "constellation construction", budget: None, check: constellations },
        Criterion { id: 13, title: "byte-deterministic outputs", budget: None, check: determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.2} s, budget {:.0} s", elapsed.as_secs_f64(), b.as_secs_f64())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} criterion {:>2} {}: {detail} [{:.2} s]",
            c.id,
            c.title,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
