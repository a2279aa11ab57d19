//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers, `#` comments.
//!
//! `[run]`, `[task]`, `[model]` and `[train]` hold settings shared by every
//! cell; each `[cell NAME]` declares one training run and may override any
//! `[model]` or `[train]` key. Unknown sections and keys are errors, all
//! reported with their line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use nope_core::model::{ModelConfig, PeScheme};
use nope_core::rng::derive_seed;
use nope_core::train::{Expectation, ExperimentCell, ExperimentSpec, TaskSpec, TrainConfig};
use nope_core::AttentionKind;

/// The configuration shipped with the binary; reproduces
/// [`ExperimentSpec::standard`].
pub const DEFAULT_EXPERIMENT: &str = include_str!("../configs/experiment.ini");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based; 0 for errors not tied to a line.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone, Default)]
struct Section {
    line: usize,
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Default)]
struct Ini {
    sections: BTreeMap<String, Section>,
    /// Section names in file order, for cells.
    order: Vec<String>,
}

fn parse_ini(text: &str) -> Result<Ini, ConfigError> {
    let mut ini = Ini::default();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(line, "section header is missing ']'"))?
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            if name.is_empty() {
                return Err(err(line, "empty section name"));
            }
            if ini.sections.contains_key(&name) {
                return Err(err(line, format!("duplicate section [{name}]")));
            }
            ini.sections.insert(
                name.clone(),
                Section {
                    line,
                    entries: BTreeMap::new(),
                },
            );
            ini.order.push(name.clone());
            current = Some(name);
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected 'key = value', got '{content}'")))?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if key.is_empty() {
            return Err(err(line, "empty key"));
        }
        let section = current
            .as_ref()
            .ok_or_else(|| err(line, format!("key '{key}' appears before any section")))?;
        let entries = &mut ini.sections.get_mut(section).expect("inserted above").entries;
        if entries.contains_key(&key) {
            return Err(err(line, format!("duplicate key '{key}' in [{section}]")));
        }
        entries.insert(key, Entry { value, line });
    }
    Ok(ini)
}

fn parse<T: std::str::FromStr>(e: &Entry, key: &str) -> Result<T, ConfigError> {
    e.value
        .parse()
        .map_err(|_| err(e.line, format!("invalid value '{}' for '{key}'", e.value)))
}

fn parse_bool(e: &Entry, key: &str) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(err(e.line, format!("'{key}' must be true or false, got '{}'", e.value))),
    }
}

fn parse_optional_f64(e: &Entry, key: &str) -> Result<Option<f64>, ConfigError> {
    if matches!(e.value.as_str(), "none" | "default") {
        Ok(None)
    } else {
        parse::<f64>(e, key).map(Some)
    }
}

fn parse_expectation(e: &Entry) -> Result<Expectation, ConfigError> {
    let v = e.value.replace(' ', "");
    let bad = || {
        err(
            e.line,
            format!("expect must look like '>= 0.99' or '<= 0.55', got '{}'", e.value),
        )
    };
    if let Some(t) = v.strip_prefix(">=") {
        t.parse().map(Expectation::AtLeast).map_err(|_| bad())
    } else if let Some(t) = v.strip_prefix("<=") {
        t.parse().map(Expectation::AtMost).map_err(|_| bad())
    } else {
        Err(bad())
    }
}

const RUN_KEYS: &[&str] = &["seed", "out", "curves"];
const TASK_KEYS: &[&str] = &["vocab", "seq_len", "examples"];
const MODEL_KEYS: &[&str] = &[
    "d_model",
    "d_ff",
    "attention",
    "residual",
    "layer_norm",
    "scale_attention",
    "init_scale",
];
const TRAIN_KEYS: &[&str] = &["lr", "steps", "batch_size", "momentum", "clip_norm"];
const CELL_KEYS: &[&str] = &["layers", "pe", "expect", "blind"];

fn check_keys(section: &str, s: &Section, allowed: &[&[&str]]) -> Result<(), ConfigError> {
    for (k, e) in &s.entries {
        if !allowed.iter().any(|set| set.contains(&k.as_str())) {
            let valid: Vec<&str> = allowed.iter().flat_map(|s| s.iter().copied()).collect();
            return Err(err(
                e.line,
                format!("unknown key '{k}' in [{section}] (valid: {})", valid.join(", ")),
            ));
        }
    }
    Ok(())
}

fn apply_model(cfg: &mut ModelConfig, s: &Section) -> Result<(), ConfigError> {
    for (k, e) in &s.entries {
        match k.as_str() {
            "d_model" => cfg.d_model = parse(e, k)?,
            "d_ff" => cfg.d_ff = parse(e, k)?,
            "attention" => cfg.attention_kind = parse::<AttentionKind>(e, k)?,
            "residual" => cfg.use_residual = parse_bool(e, k)?,
            "layer_norm" => cfg.layer_norm = parse_bool(e, k)?,
            "scale_attention" => cfg.scale_attention = parse_bool(e, k)?,
            "init_scale" => cfg.init_scale = parse_optional_f64(e, k)?,
            _ => {}
        }
    }
    Ok(())
}

fn apply_train(cfg: &mut TrainConfig, s: &Section) -> Result<(), ConfigError> {
    for (k, e) in &s.entries {
        match k.as_str() {
            "lr" => cfg.lr = parse(e, k)?,
            "steps" => cfg.steps = parse(e, k)?,
            "batch_size" => cfg.batch_size = parse(e, k)?,
            "momentum" => cfg.momentum = parse(e, k)?,
            "clip_norm" => cfg.clip_norm = parse_optional_f64(e, k)?,
            _ => {}
        }
    }
    Ok(())
}

/// Where an experiment run writes its outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutputs {
    pub out: Option<PathBuf>,
    /// Directory receiving one `step,loss` CSV per cell.
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub spec: ExperimentSpec,
    pub outputs: RunOutputs,
}

/// Parses `text`, applying `overrides` (`section.key=value`, with cells
/// addressed as `cell NAME.key=value`) and an optional root-seed override.
pub fn parse_run_config(
    text: &str,
    overrides: &[String],
    seed_override: Option<u64>,
) -> Result<RunConfig, ConfigError> {
    let mut ini = parse_ini(text)?;
    for o in overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| err(0, format!("override '{o}' must look like section.key=value")))?;
        let (section, key) = path
            .rsplit_once('.')
            .ok_or_else(|| err(0, format!("override '{o}' must look like section.key=value")))?;
        let s = ini
            .sections
            .get_mut(section.trim())
            .ok_or_else(|| err(0, format!("override '{o}' names unknown section [{section}]")))?;
        s.entries.insert(
            key.trim().to_string(),
            Entry {
                value: value.trim().to_string(),
                line: 0,
            },
        );
    }

    let empty = Section::default();
    let get = |name: &str| ini.sections.get(name).unwrap_or(&empty);
    for name in &ini.order {
        if !matches!(name.as_str(), "run" | "task" | "model" | "train") && !name.starts_with("cell ") {
            return Err(err(
                ini.sections[name].line,
                format!("unknown section [{name}] (valid: run, task, model, train, cell NAME)"),
            ));
        }
    }
    let run = get("run");
    check_keys("run", run, &[RUN_KEYS])?;
    check_keys("task", get("task"), &[TASK_KEYS])?;
    check_keys("model", get("model"), &[MODEL_KEYS])?;
    check_keys("train", get("train"), &[TRAIN_KEYS])?;

    let mut seed: u64 = match run.entries.get("seed") {
        Some(e) => parse(e, "seed")?,
        None => 0,
    };
    if let Some(s) = seed_override {
        seed = s;
    }
    let outputs = RunOutputs {
        out: run.entries.get("out").map(|e| PathBuf::from(&e.value)),
        curves: run.entries.get("curves").map(|e| PathBuf::from(&e.value)),
    };

    let mut task = TaskSpec {
        seed: derive_seed(seed, "experiment/task"),
        ..TaskSpec::default()
    };
    for (k, e) in &get("task").entries {
        match k.as_str() {
            "vocab" => task.vocab_size = parse(e, k)?,
            "seq_len" => task.seq_len = parse(e, k)?,
            "examples" => task.n_examples = parse(e, k)?,
            _ => {}
        }
    }

    let mut base_model = ModelConfig {
        vocab_size: task.vocab_size,
        max_len: task.seq_len,
        ..ModelConfig::default()
    };
    apply_model(&mut base_model, get("model"))?;
    let mut base_train = TrainConfig::default();
    apply_train(&mut base_train, get("train"))?;

    let mut cells = Vec::new();
    for name in ini.order.iter().filter(|n| n.starts_with("cell ")) {
        let s = &ini.sections[name];
        let cell_name = name["cell ".len()..].trim().to_string();
        check_keys(name, s, &[CELL_KEYS, MODEL_KEYS, TRAIN_KEYS])?;
        let required = |k: &str| {
            s.entries
                .get(k)
                .ok_or_else(|| err(s.line, format!("[{name}] is missing required key '{k}'")))
        };
        let mut model = ModelConfig {
            n_layers: parse(required("layers")?, "layers")?,
            pe_scheme: match s.entries.get("pe") {
                Some(e) => parse::<PeScheme>(e, "pe")?,
                None => PeScheme::None,
            },
            seed: derive_seed(seed, &format!("experiment/{cell_name}/init")),
            ..base_model.clone()
        };
        apply_model(&mut model, s)?;
        let mut train = TrainConfig {
            seed: derive_seed(seed, &format!("experiment/{cell_name}/train")),
            ..base_train
        };
        apply_train(&mut train, s)?;
        let expect = parse_expectation(required("expect")?)?;
        let blind = match s.entries.get("blind") {
            Some(e) => parse_bool(e, "blind")?,
            None => false,
        };
        model.validate().map_err(|e| err(s.line, format!("[{name}]: {e}")))?;
        train.validate().map_err(|e| err(s.line, format!("[{name}]: {e}")))?;
        cells.push(ExperimentCell {
            name: cell_name,
            model,
            train,
            expect,
            expect_blind: blind,
        });
    }
    if cells.is_empty() {
        return Err(err(0, "config declares no [cell NAME] sections"));
    }
    Ok(RunConfig {
        seed,
        spec: ExperimentSpec { task, cells },
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_is_the_standard_experiment() {
        for seed in [0, 7, u64::MAX] {
            let rc = parse_run_config(DEFAULT_EXPERIMENT, &[], Some(seed)).unwrap();
            assert_eq!(rc.spec, ExperimentSpec::standard(seed));
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_run_config("[run]\nseed = 1\n[model]\nwidth = 3\n", &[], None).unwrap_err();
        assert_eq!(e.line, 4);
        assert!(e.message.contains("unknown key 'width'"));
        let e = parse_run_config("[run]\nseed = x\n", &[], None).unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_run_config("[run\n", &[], None).unwrap_err();
        assert_eq!(e.to_string(), "line 1: section header is missing ']'");
        let e = parse_run_config("seed = 1\n", &[], None).unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_run_config("[cell a]\nlayers = 1\n", &[], None).unwrap_err();
        assert!(e.message.contains("missing required key 'expect'"), "{e}");
        let e = parse_run_config("[bogus]\n", &[], None).unwrap_err();
        assert!(e.message.contains("unknown section"));
    }

    #[test]
    fn overrides_apply_to_sections_and_cells() {
        let rc = parse_run_config(
            DEFAULT_EXPERIMENT,
            &[
                "train.steps=10".into(),
                "cell L2-nope.lr=0.5".into(),
                "model.layer_norm=false".into(),
            ],
            None,
        )
        .unwrap();
        assert!(rc.spec.cells.iter().all(|c| c.train.steps == 10 && !c.model.layer_norm));
        let l2 = rc.spec.cells.iter().find(|c| c.name == "L2-nope").unwrap();
        assert_eq!(l2.train.lr, 0.5);
        assert!(parse_run_config(DEFAULT_EXPERIMENT, &["nosuch.k=1".into()], None).is_err());
        assert!(parse_run_config(DEFAULT_EXPERIMENT, &["train.bogus=1".into()], None).is_err());
    }

    #[test]
    fn comments_and_optional_values() {
        let rc = parse_run_config(
            "# top\n[train]\nclip_norm = none # off\n[cell x]\nlayers = 2\nexpect = >=0.9\ninit_scale = 0.2\n",
            &[],
            None,
        )
        .unwrap();
        let c = &rc.spec.cells[0];
        assert_eq!(c.train.clip_norm, None);
        assert_eq!(c.model.init_scale, Some(0.2));
        assert_eq!(c.expect, Expectation::AtLeast(0.9));
    }
}
