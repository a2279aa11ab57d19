//! `nope-lab`: probes, duality checks, the order-task experiment and the
//! symbolic context diagram from the command line.
//!
//! Exit codes: 0 pass, 1 probe or threshold failure, 2 usage or config
//! error, 3 IO error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nope_core::attention::{AttentionKind, MaskKind};
use nope_core::io::write_atomic;
use nope_core::linear_attention::{duality_sweep, DualitySweep};
use nope_core::model::{forward, load_checkpoint, save_checkpoint, ModelConfig, ModelParams, PeScheme, TokenSequence};
use nope_core::probes::{
    blindness_suite, emit_figure1_diagram, equivariance_suite, probe_full_position_sensitivity, BlindnessSuite,
    EquivarianceSuite, ProbeReport, ProbeSubject, ProbeTarget, SensitivitySuite, Tolerances,
};
use nope_core::train::run_experiment;
use serde_json::json;

use crate::config::{parse_run_config, DEFAULT_EXPERIMENT};

const SEED_ENV: &str = "NOPE_LAB_SEED";
const PROBE_NAMES: &[&str] = &["equivariance", "one-layer-blindness", "full-sensitivity", "all"];

#[derive(Debug, Parser)]
#[command(
    name = "nope-lab",
    version,
    about = "Order-sensitivity probes and experiments for causal attention"
)]
struct Cli {
    /// Root seed; overrides NOPE_LAB_SEED and any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a named probe and write its JSON report.
    Probe(ProbeArgs),
    /// Compare the fast-weight and attention forms of linear attention.
    Duality(DualityArgs),
    /// Train the cells of an experiment config and check their thresholds.
    Experiment(ExperimentArgs),
    /// Print the nested context sets of two token sequences side by side.
    Figure1(Figure1Args),
    /// Save a freshly initialized model, load it back and compare.
    Checkpoint(CheckpointArgs),
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// equivariance, one-layer-blindness, full-sensitivity or all.
    #[arg(long)]
    name: String,
    /// Sequence length (default: 8 for equivariance, 4 for blindness, 3 for
    /// sensitivity).
    #[arg(long = "T")]
    t: Option<usize>,
    /// Random weight draws.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Stack depth for full-sensitivity (blindness always uses one layer).
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Trials for full-sensitivity.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// softmax or linear.
    #[arg(long, default_value = "softmax")]
    attention: AttentionKind,
    /// Probe full model layers (residual + feedforward) instead of bare attention.
    #[arg(long)]
    full_model: bool,
    /// Weight standard deviation (default depends on the target).
    #[arg(long)]
    weight_scale: Option<f64>,
    /// Permutations per seed for equivariance.
    #[arg(long, default_value_t = 50)]
    perms: usize,
    /// Mask for equivariance: full or causal.
    #[arg(long, default_value = "full")]
    mask: String,
    /// Sample this many permutations per seed in the blindness probe
    /// instead of enumerating all of them.
    #[arg(long)]
    sampled_perms: Option<usize>,
    #[arg(long, default_value_t = nope_core::probes::TAU_EQ)]
    tau_eq: f64,
    #[arg(long, default_value_t = nope_core::probes::TAU_DIFF)]
    tau_diff: f64,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DualityArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Fixed width; drawn from 1..=d-max per trial when omitted.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 8)]
    d_max: usize,
    #[arg(long, default_value_t = 32)]
    t_max: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Config file; the shipped default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `train.steps=500` or `cell L2-nope.lr=0.05`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Report path (overrides [run] out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-cell `step,loss` CSV files (overrides [run] curves).
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Print the shipped default config and exit.
    #[arg(long)]
    print_default: bool,
}

#[derive(Debug, Args)]
struct Figure1Args {
    /// Comma-separated tokens.
    #[arg(long, default_value = "a,b,c")]
    a: String,
    #[arg(long, default_value = "b,a,c")]
    b: String,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Checkpoint path; a temporary file when omitted.
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value = "none")]
    pe: PeScheme,
    #[arg(long, default_value = "softmax")]
    attention: AttentionKind,
}

/// A failed run with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<nope_core::Error> for Failure {
    fn from(e: nope_core::Error) -> Self {
        match e {
            nope_core::Error::Io(_) => Failure::io(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

type Outcome = Result<bool, Failure>;

fn root_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn write_output(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes()).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => {
            write_output(p, text)?;
            eprintln!("report written to {}", p.display());
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::usage(e.to_string()))
}

fn summarize(r: &ProbeReport) {
    let facts: Vec<String> = r
        .summary
        .iter()
        .map(|(k, v)| {
            if v.fract() == 0.0 && v.abs() < 1e15 {
                format!("{k}={v}")
            } else {
                format!("{k}={v:.3e}")
            }
        })
        .collect();
    eprintln!(
        "{}: {} ({})",
        r.probe,
        if r.pass { "pass" } else { "FAIL" },
        facts.join(", ")
    );
}

fn cmd_probe(args: &ProbeArgs, seed: u64) -> Outcome {
    if !PROBE_NAMES.contains(&args.name.as_str()) {
        return Err(Failure::usage(format!(
            "unknown probe '{}'; valid names: {}",
            args.name,
            PROBE_NAMES.join(", ")
        )));
    }
    let tolerances = Tolerances::new(args.tau_eq, args.tau_diff)?;
    let subject = |layers| ProbeSubject {
        target: if args.full_model {
            ProbeTarget::FullModel
        } else {
            ProbeTarget::RawStack
        },
        weight_scale: args.weight_scale,
        ..ProbeSubject::raw(layers, args.d, args.attention)
    };
    let mask = match args.mask.as_str() {
        "full" => MaskKind::Full,
        "causal" => MaskKind::Causal,
        m => return Err(Failure::usage(format!("unknown mask '{m}'; valid: full, causal"))),
    };
    let all = args.name == "all";
    let mut reports = Vec::new();
    if all || args.name == "equivariance" {
        let masks = if all {
            vec![MaskKind::Full, MaskKind::Causal]
        } else {
            vec![mask]
        };
        for mask in masks {
            reports.push(equivariance_suite(&EquivarianceSuite {
                d: args.d,
                t: args.t.unwrap_or(8),
                seeds: args.seeds,
                perms_per_seed: args.perms,
                mask,
                tolerances,
                root_seed: seed,
            })?);
        }
    }
    if all || args.name == "one-layer-blindness" {
        reports.push(blindness_suite(&BlindnessSuite {
            subject: subject(1),
            t: args.t.unwrap_or(4),
            seeds: args.seeds,
            sampled_perms: args.sampled_perms,
            tolerances,
            root_seed: seed,
        })?);
    }
    if all || args.name == "full-sensitivity" {
        reports.push(probe_full_position_sensitivity(&SensitivitySuite {
            subject: subject(args.layers),
            t: args.t.unwrap_or(3),
            trials: args.trials,
            tolerances,
            root_seed: seed,
            ..SensitivitySuite::default()
        })?);
    }
    reports.iter().for_each(summarize);
    let pass = reports.iter().all(|r| r.pass);
    let text = if reports.len() == 1 {
        reports[0].to_json()?
    } else {
        to_json(&json!({ "root_seed": seed, "reports": reports, "pass": pass }))?
    };
    emit(args.out.as_deref(), &text)?;
    Ok(pass)
}

fn cmd_duality(args: &DualityArgs, seed: u64) -> Outcome {
    if args.d == Some(0) || args.d_max == 0 || args.t_max == 0 || args.trials == 0 {
        return Err(Failure::usage("--d, --d-max, --t-max and --trials must be positive"));
    }
    let r = duality_sweep(&DualitySweep {
        trials: args.trials,
        d: args.d,
        d_max: args.d_max,
        t_max: args.t_max,
        tolerance: args.tol,
        root_seed: seed,
    })?;
    eprintln!(
        "duality: {} trials, max gap {:e}, tolerance {:e}: {}",
        r.trials.len(),
        r.max_gap,
        args.tol,
        if r.pass { "pass" } else { "FAIL" }
    );
    emit(args.out.as_deref(), &to_json(&r)?)?;
    Ok(r.pass)
}

fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn cmd_experiment(args: &ExperimentArgs, seed: Option<u64>) -> Outcome {
    if args.print_default {
        print!("{DEFAULT_EXPERIMENT}");
        return Ok(true);
    }
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::io(format!("cannot read {}: {e}", p.display())))?,
        None => DEFAULT_EXPERIMENT.to_string(),
    };
    let source = args
        .config
        .as_ref()
        .map_or("default config".to_string(), |p| p.display().to_string());
    let rc = parse_run_config(&text, &args.overrides, seed).map_err(|e| Failure::usage(format!("{source}: {e}")))?;
    rc.spec.check_coverage()?;
    let out = args.out.clone().or(rc.outputs.out);
    let curves = args.curves.clone().or(rc.outputs.curves);
    // fail on unwritable outputs before spending the training budget
    if let Some(dir) = &curves {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))?;
    }
    if let Some(p) = &out {
        let parent = p
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Failure::io(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }

    let report = run_experiment(&rc.spec)?;
    eprintln!("{report}");
    let text = to_json(&json!({ "root_seed": rc.seed, "experiment": report }))?;
    emit(out.as_deref(), &text)?;
    if let Some(dir) = &curves {
        for c in &report.cells {
            if let Some(r) = &c.report {
                write_output(&dir.join(format!("{}.csv", c.name)), &loss_csv(&r.loss_curve))?;
            }
        }
    }
    Ok(report.pass)
}

fn cmd_figure1(args: &Figure1Args) -> Outcome {
    let split = |s: &str| -> Vec<String> { s.split(',').map(|t| t.trim().to_string()).collect() };
    let (a, b) = (split(&args.a), split(&args.b));
    if a.len() != b.len() {
        return Err(Failure::usage(format!(
            "token lists have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if args.layers == 0 {
        return Err(Failure::usage("--layers must be at least 1"));
    }
    let diagram = emit_figure1_diagram(&a, &b, args.layers)?;
    let text = if args.json {
        diagram.to_json()?
    } else {
        diagram.to_string()
    };
    match &args.out {
        Some(p) => write_output(p, &text)?,
        None => print!("{text}{}", if args.json { "\n" } else { "" }),
    }
    Ok(true)
}

fn cmd_checkpoint(args: &CheckpointArgs, seed: u64) -> Outcome {
    let cfg = ModelConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        d_ff: 2 * args.d_model,
        pe_scheme: args.pe,
        attention_kind: args.attention,
        seed,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let params = ModelParams::init(&cfg)?;
    let tmp;
    let path = match &args.path {
        Some(p) => p.clone(),
        None => {
            tmp = std::env::temp_dir().join(format!("nope-lab-{}.ckpt", std::process::id()));
            tmp.clone()
        }
    };
    save_checkpoint(&path, &cfg, &params)?;
    let (cfg2, params2) = load_checkpoint(&path)?;
    if args.path.is_none() {
        let _ = std::fs::remove_file(&path);
    }
    let tensors_equal = params
        .tensors()
        .iter()
        .zip(params2.tensors())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let seq = TokenSequence::new((0..cfg.max_len).map(|i| i % cfg.vocab_size).collect(), &cfg)?;
    let logits_equal = forward(&params, &cfg, &seq, false)?.logits == forward(&params2, &cfg2, &seq, false)?.logits;
    let pass = cfg == cfg2 && tensors_equal && logits_equal;
    println!(
        "{}",
        to_json(&json!({
            "path": path.display().to_string(),
            "parameters": params.parameter_count(),
            "config_equal": cfg == cfg2,
            "tensors_bitwise_equal": tensors_equal,
            "logits_equal": logits_equal,
            "pass": pass,
        }))?
    );
    Ok(pass)
}

fn run(cli: Cli) -> Outcome {
    let seed = root_seed(cli.seed)?;
    let root = seed.unwrap_or(0);
    match &cli.command {
        Command::Probe(a) => cmd_probe(a, root),
        Command::Duality(a) => cmd_duality(a, root),
        Command::Experiment(a) => cmd_experiment(a, seed),
        Command::Figure1(a) => cmd_figure1(a),
        Command::Checkpoint(a) => cmd_checkpoint(a, root),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
