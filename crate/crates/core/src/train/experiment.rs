//! A matrix of training runs on one order task, each checked against an
//! accuracy expectation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PeScheme};
use crate::probes::TAU_EQ;
use crate::rng::derive_seed;
use crate::train::task::gen_order_task;
use crate::train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 8,
            seq_len: 6,
            n_examples: 2000,
            seed: 0,
        }
    }
}

/// Required outcome for a cell's paired accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Expectation {
    AtLeast(f64),
    AtMost(f64),
}

impl Expectation {
    pub fn holds(&self, accuracy: f64) -> bool {
        match *self {
            Expectation::AtLeast(t) => accuracy >= t,
            Expectation::AtMost(t) => accuracy <= t,
        }
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::AtLeast(t) => write!(f, ">= {t}"),
            Expectation::AtMost(t) => write!(f, "<= {t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub expect: Expectation,
    /// Also require pair members to keep identical logits (gap <= 1e-9)
    /// throughout training.
    pub expect_blind: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: TaskSpec,
    pub cells: Vec<ExperimentCell>,
}

impl ExperimentSpec {
    /// The three-cell comparison: one-layer NoPE, two-layer NoPE, and one
    /// layer with sinusoidal positions. Cell seeds are split from `root`.
    pub fn standard(root: u64) -> Self {
        let task = TaskSpec {
            seed: derive_seed(root, "experiment/task"),
            ..TaskSpec::default()
        };
        let model = |name: &str, layers: usize, pe: PeScheme| ModelConfig {
            n_layers: layers,
            d_model: 16,
            d_ff: 32,
            vocab_size: task.vocab_size,
            max_len: task.seq_len,
            pe_scheme: pe,
            // without it the one-layer PE cell sits on the ln 2 plateau
            // for tens of thousands of steps
            layer_norm: true,
            seed: derive_seed(root, &format!("experiment/{name}/init")),
            ..ModelConfig::default()
        };
        let train = |name: &str| TrainConfig {
            lr: 0.1,
            steps: 3000,
            batch_size: 32,
            seed: derive_seed(root, &format!("experiment/{name}/train")),
            momentum: 0.9,
            clip_norm: Some(1.0),
        };
        let cell = |name: &str, layers, pe, expect, blind| ExperimentCell {
            name: name.to_string(),
            model: model(name, layers, pe),
            train: train(name),
            expect,
            expect_blind: blind,
        };
        ExperimentSpec {
            task,
            cells: vec![
                cell("L1-nope", 1, PeScheme::None, Expectation::AtMost(0.55), true),
                cell("L2-nope", 2, PeScheme::None, Expectation::AtLeast(0.99), false),
                cell(
                    "L1-sinusoidal",
                    1,
                    PeScheme::Sinusoidal,
                    Expectation::AtLeast(0.99),
                    false,
                ),
            ],
        }
    }

    /// The matrix must contain a one-layer NoPE cell, a two-layer NoPE cell
    /// and a one-layer cell with positional encodings.
    pub fn check_coverage(&self) -> Result<()> {
        let has = |layers: usize, nope: bool| {
            self.cells
                .iter()
                .any(|c| c.model.n_layers == layers && (c.model.pe_scheme == PeScheme::None) == nope)
        };
        let mut missing = Vec::new();
        if !has(1, true) {
            missing.push("L=1 NoPE");
        }
        if !has(2, true) {
            missing.push("L=2 NoPE");
        }
        if !has(1, false) {
            missing.push("L=1 with positional encoding");
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "experiment is missing required cells: {}",
                missing.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellOutcome {
    Completed,
    Diverged { example_index: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub name: String,
    pub n_layers: usize,
    pub pe_scheme: PeScheme,
    pub expect: Expectation,
    pub expect_blind: bool,
    pub outcome: CellOutcome,
    pub report: Option<TrainReport>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub task: TaskSpec,
    pub cells: Vec<CellReport>,
    pub pass: bool,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>6} {:<11} {:>10} {:>9} {:>10} {:>10} {:>9}  {:<9} result",
            "cell", "layers", "pe", "final_loss", "accuracy", "paired_acc", "max_gap", "time_s", "expect"
        )?;
        for c in &self.cells {
            let pe = serde_json::to_value(c.pe_scheme)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let verdict = if c.pass { "pass" } else { "FAIL" };
            match (&c.outcome, &c.report) {
                (CellOutcome::Completed, Some(r)) => writeln!(
                    f,
                    "{:<16} {:>6} {:<11} {:>10.4} {:>9.4} {:>10.4} {:>10.2e} {:>9.2}  {:<9} {verdict}",
                    c.name,
                    c.n_layers,
                    pe,
                    r.final_loss,
                    r.accuracy,
                    r.paired_accuracy,
                    r.max_paired_logit_gap,
                    r.wallclock_s,
                    c.expect.to_string()
                )?,
                (CellOutcome::Diverged { example_index }, _) => writeln!(
                    f,
                    "{:<16} {:>6} {:<11} diverged (non-finite loss at example {example_index})  {verdict}",
                    c.name, c.n_layers, pe
                )?,
                _ => writeln!(f, "{:<16} no report  {verdict}", c.name)?,
            }
        }
        write!(f, "overall: {}", if self.pass { "pass" } else { "FAIL" })
    }
}

/// Trains every cell on the same task. A cell whose loss goes non-finite is
/// recorded as diverged and fails; the remaining cells still run.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.check_coverage()?;
    let t = spec.task;
    let task = gen_order_task(t.vocab_size, t.seq_len, t.n_examples, t.seed)?;
    let mut cells = Vec::with_capacity(spec.cells.len());
    for cell in &spec.cells {
        let (outcome, report) = match train(&cell.model, &cell.train, &task) {
            Ok(o) => (CellOutcome::Completed, Some(o.report)),
            Err(Error::NonFiniteLoss { index }) => (CellOutcome::Diverged { example_index: index }, None),
            Err(e) => return Err(e),
        };
        let pass = report.as_ref().is_some_and(|r| {
            cell.expect.holds(r.paired_accuracy) && (!cell.expect_blind || r.max_paired_logit_gap <= TAU_EQ)
        });
        cells.push(CellReport {
            name: cell.name.clone(),
            n_layers: cell.model.n_layers,
            pe_scheme: cell.model.pe_scheme,
            expect: cell.expect,
            expect_blind: cell.expect_blind,
            outcome,
            report,
            pass,
        });
    }
    let pass = cells.iter().all(|c| c.pass);
    Ok(ExperimentReport { task: t, cells, pass })
}
