//! End-to-end acceptance checks, one line per criterion. Runs without the
//! libtest harness so the lines are always printed; exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nope_core::attention::{attn_matrix, attn_steps, AttentionKind, AttentionMask, AttentionParams, MaskKind};
use nope_core::linear_attention::{duality_sweep, DualitySweep};
use nope_core::math::gaussian_init;
use nope_core::model::{ModelConfig, ModelParams, PeScheme};
use nope_core::probes::{
    blindness_suite, equivariance_suite, probe_full_position_sensitivity, symbolic_context, BlindnessSuite,
    EquivarianceSuite, ProbeSubject, ProbeTarget, SensitivitySuite, Tolerances, Verdict,
};
use nope_core::train::{finite_diff_report, gen_order_task, run_experiment, ExperimentSpec};
use nope_core::SeededRng;

const ROOT: u64 = 0;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Outcome, nope_core::Error>;

fn duality() -> Result<Outcome, nope_core::Error> {
    let r = duality_sweep(&DualitySweep {
        root_seed: ROOT,
        ..DualitySweep::default()
    })?;
    Ok(outcome(
        r.pass && r.trials.len() == 100,
        format!("100 trials, max gap {:.2e} (<= 1e-10)", r.max_gap),
    ))
}

fn step_matrix() -> Result<Outcome, nope_core::Error> {
    let mut worst = 0.0f64;
    for k in 0..200u64 {
        let mut rng = SeededRng::new(ROOT ^ (0x5eed_0000 + k));
        let d = 1 + rng.below(8);
        let t = 1 + rng.below(32);
        let params = AttentionParams::random(&mut rng, d, 1.0 / (d as f64).sqrt())?;
        let x = gaussian_init(&mut rng, d, t, 1.0)?;
        let stepped = attn_steps(&params, &x)?;
        let whole = attn_matrix(&params, &x, &AttentionMask::causal(t)?)?;
        worst = worst.max(stepped.max_abs_diff(&whole)?);
    }
    Ok(outcome(
        worst <= 1e-12,
        format!("200 trials, max gap {worst:.2e} (<= 1e-12)"),
    ))
}

fn equivariance() -> Result<Outcome, nope_core::Error> {
    let full = equivariance_suite(&EquivarianceSuite {
        tolerances: Tolerances::new(1e-10, 1e-6)?,
        root_seed: ROOT,
        ..EquivarianceSuite::default()
    })?;
    let causal = equivariance_suite(&EquivarianceSuite {
        mask: MaskKind::Causal,
        root_seed: ROOT,
        ..EquivarianceSuite::default()
    })?;
    let full_max = full.summary["max_distance"];
    let rate = causal.summary["violation_rate"];
    Ok(outcome(
        full.pass && full_max <= 1e-10 && causal.pass && rate >= 0.99,
        format!("full mask max distance {full_max:.2e} (<= 1e-10), causal violation rate {rate:.3} (>= 0.99)"),
    ))
}

fn blindness() -> Result<Outcome, nope_core::Error> {
    let mut worst = 0.0f64;
    let mut all = true;
    let mut rows = 0;
    for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
        for target in [ProbeTarget::RawStack, ProbeTarget::FullModel] {
            for t in 1..=5 {
                let r = blindness_suite(&BlindnessSuite {
                    subject: ProbeSubject {
                        target,
                        ..ProbeSubject::raw(1, 4, kind)
                    },
                    t,
                    seeds: 20,
                    sampled_perms: None,
                    root_seed: ROOT,
                    ..BlindnessSuite::default()
                })?;
                all &= r.pass;
                worst = worst.max(r.max_distance_at(t));
                rows += r.table.iter().filter(|row| row.position == t).count();
            }
        }
    }
    Ok(outcome(
        all && worst <= 1e-9,
        format!("softmax+linear, T<=5 exhaustive, {rows} final-position checks, max distance {worst:.2e} (<= 1e-9)"),
    ))
}

fn sensitivity() -> Result<Outcome, nope_core::Error> {
    let mut all = true;
    let mut equal = 0;
    let mut min_rate = 1.0f64;
    for target in [ProbeTarget::RawStack, ProbeTarget::FullModel] {
        for layers in [2, 3] {
            for d in [4, 8] {
                let r = probe_full_position_sensitivity(&SensitivitySuite {
                    subject: ProbeSubject {
                        target,
                        ..ProbeSubject::raw(layers, d, AttentionKind::Softmax)
                    },
                    trials: 100,
                    root_seed: ROOT,
                    ..SensitivitySuite::default()
                })?;
                all &= r.pass;
                equal += r.count(Verdict::Equal);
                min_rate = min_rate.min(r.summary["trials_all_different"] / 100.0);
            }
        }
    }
    Ok(outcome(
        all && equal == 0 && min_rate >= 0.99,
        format!("L in {{2,3}}, d in {{4,8}}, worst all-different rate {min_rate:.2} (>= 0.99), equal verdicts {equal}"),
    ))
}

fn figure1() -> Result<Outcome, nope_core::Error> {
    let a1 = symbolic_context(&["a", "b", "c"], 1)?;
    let b1 = symbolic_context(&["b", "a", "c"], 1)?;
    let a2 = symbolic_context(&["a", "b", "c"], 2)?;
    let b2 = symbolic_context(&["b", "a", "c"], 2)?;
    let layer1_equal_tail = a1[1] == b1[1] && a1[2] == b1[2];
    let layer2_all_differ = a2.iter().zip(&b2).all(|(x, y)| x != y);
    Ok(outcome(
        layer1_equal_tail && layer2_all_differ,
        format!("layer 1 equal at 2-3: {layer1_equal_tail}, layer 2 differs at 1-3: {layer2_all_differ}"),
    ))
}

fn gradients() -> Result<Outcome, nope_core::Error> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 4,
        d_ff: 8,
        vocab_size: 8,
        max_len: 6,
        pe_scheme: PeScheme::None,
        init_scale: Some(0.5),
        seed: ROOT,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg)?;
    let task = gen_order_task(8, 6, 8, ROOT)?;
    let r = finite_diff_report(&params, &cfg, &task.examples, 1e-5, 200, ROOT)?;
    Ok(outcome(
        r.coordinates >= 200 && r.max_relative_error <= 1e-4,
        format!(
            "{} coordinates over {} tensors, max relative error {:.2e} (<= 1e-4)",
            r.coordinates,
            r.per_tensor.len(),
            r.max_relative_error
        ),
    ))
}

fn separation() -> Result<Outcome, nope_core::Error> {
    let r = run_experiment(&ExperimentSpec::standard(ROOT))?;
    let mut ok = r.pass;
    let mut parts = Vec::new();
    for c in &r.cells {
        match &c.report {
            Some(rep) => {
                ok &= rep.wallclock_s < 60.0;
                parts.push(format!(
                    "{} paired {:.3} gap {:.1e} {:.1}s",
                    c.name, rep.paired_accuracy, rep.max_paired_logit_gap, rep.wallclock_s
                ));
            }
            None => {
                ok = false;
                parts.push(format!("{} diverged", c.name));
            }
        }
    }
    Ok(outcome(ok, parts.join("; ")))
}

fn strip_wallclock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wallclock_s");
            m.values_mut().for_each(strip_wallclock);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_wallclock),
        _ => {}
    }
}

fn canonical(json: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(json).expect("reports are valid JSON");
    strip_wallclock(&mut v);
    v.to_string()
}

fn determinism() -> Result<Outcome, nope_core::Error> {
    let probe = || {
        probe_full_position_sensitivity(&SensitivitySuite {
            root_seed: ROOT,
            ..SensitivitySuite::default()
        })
        .and_then(|r| r.to_json())
    };
    let probes_equal = probe()? == probe()?;
    let blind = || {
        blindness_suite(&BlindnessSuite {
            root_seed: ROOT,
            ..BlindnessSuite::default()
        })
        .and_then(|r| r.to_json())
    };
    let blind_equal = blind()? == blind()?;
    let experiment = || run_experiment(&ExperimentSpec::standard(ROOT)).and_then(|r| r.to_json());
    let experiments_equal = canonical(&experiment()?) == canonical(&experiment()?);
    Ok(outcome(
        probes_equal && blind_equal && experiments_equal,
        format!(
            "probe reports identical: {}, experiment report identical modulo wallclock: {experiments_equal}",
            probes_equal && blind_equal
        ),
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, Check, Duration); 9] = [
        ("duality", duality, Duration::from_secs(1)),
        ("step/matrix equivalence", step_matrix, Duration::from_secs(1)),
        ("full-mask equivariance", equivariance, Duration::from_secs(2)),
        ("one-layer blindness", blindness, Duration::from_secs(5)),
        ("full position-sensitivity", sensitivity, Duration::from_secs(10)),
        ("figure 1 context sets", figure1, Duration::from_millis(100)),
        ("gradient correctness", gradients, Duration::from_secs(5)),
        ("order task separation", separation, Duration::from_secs(180)),
        ("determinism", determinism, Duration::from_secs(400)),
    ];
    let mut failures = 0;
    for (i, (name, check, limit)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(o) => (o.ok && elapsed < *limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "criterion {} {:<26} {}  [{:.3}s / {:.1}s]  {detail}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        checks.len() - failures,
        checks.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
