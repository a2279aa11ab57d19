//! Executable checks for permutation invariance and position sensitivity.
//!
//! Distances are max-abs over the feature dimension, per position. A
//! distance `<= tol.eq` is "equal", `>= tol.diff` is "different", anything
//! in between is inconclusive. Inconclusive trials are rerun once with a
//! fresh seed and count as failures if they persist.
//!
//! Positions in reports are 1-based.

mod context;

pub use context::{
    context_layers, emit_figure1_diagram, symbolic_context, ContextSet, DiagramCell, DiagramLayer, Figure1Diagram,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::{attn_traced, AttentionKind, AttentionMask, AttentionParams, MaskKind};
use crate::error::{Error, Result};
use crate::math::{gaussian_init, Matrix};
use crate::model::{forward_hidden, ModelConfig, ModelParams, PeScheme};
use crate::rng::{derive_seed, SeededRng};

pub const TAU_EQ: f64 = 1e-9;
pub const TAU_DIFF: f64 = 1e-6;

/// Fraction of trials that must come out "different" everywhere.
pub const GENERIC_PASS_RATE: f64 = 0.99;

const RETRY_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Equal,
    Different,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eq: f64,
    pub diff: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            eq: TAU_EQ,
            diff: TAU_DIFF,
        }
    }
}

impl Tolerances {
    pub fn new(eq: f64, diff: f64) -> Result<Self> {
        if !(eq >= 0.0 && diff > eq) {
            return Err(Error::invalid(format!(
                "tolerances need 0 <= eq < diff, got eq={eq}, diff={diff}"
            )));
        }
        Ok(Self { eq, diff })
    }

    pub fn verdict(&self, distance: f64) -> Verdict {
        if distance <= self.eq {
            Verdict::Equal
        } else if distance >= self.diff {
            Verdict::Different
        } else {
            Verdict::Inconclusive
        }
    }
}

/// A permutation of time steps. Applying it to `X` gives `X'` whose column
/// `j` is column `mapping[j]` of `X` (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermutationSpec {
    mapping: Vec<usize>,
}

impl PermutationSpec {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        if n == 0 {
            return Err(Error::invalid("permutation must be non-empty"));
        }
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::invalid(format!("{mapping:?} is not a bijection on 0..{n}")));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    /// Swaps 0-based positions `i` and `j`.
    pub fn swap(n: usize, i: usize, j: usize) -> Result<Self> {
        if i >= n || j >= n {
            return Err(Error::invalid(format!("swap ({i},{j}) out of range for length {n}")));
        }
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.swap(i, j);
        Ok(Self { mapping })
    }

    /// Every permutation of `0..n` that keeps the last position in place, in
    /// lexicographic order.
    pub fn all_fixing_last(n: usize) -> Vec<Self> {
        if n == 0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut current: Vec<usize> = (0..n - 1).collect();
        loop {
            let mut mapping = current.clone();
            mapping.push(n - 1);
            out.push(Self { mapping });
            if !next_permutation(&mut current) {
                break;
            }
        }
        out
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn fixes_last(&self) -> bool {
        self.mapping.last() == Some(&(self.mapping.len() - 1))
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// First 0-based position the permutation moves.
    pub fn first_moved(&self) -> Option<usize> {
        self.mapping.iter().enumerate().position(|(i, &m)| i != m)
    }

    /// Whether `mapping[..=t]` is a permutation of `0..=t` with `t` fixed:
    /// the prefix multiset and the current token are both unchanged.
    pub fn preserves_prefix_at(&self, t: usize) -> bool {
        self.mapping[t] == t && self.mapping[..=t].iter().all(|&m| m <= t)
    }

    pub fn apply_columns(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.len() {
            return Err(Error::invalid(format!(
                "permutation of length {} applied to {} columns",
                self.len(),
                x.cols()
            )));
        }
        x.select_columns(&self.mapping)
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.mapping.iter().map(|m| m + 1).collect()
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub seed: u64,
    pub position: usize,
    pub distance: f64,
    /// `None` for positions reported without a verdict.
    pub verdict: Option<Verdict>,
    pub expected: Option<Verdict>,
}

impl ProbeRow {
    pub fn matches(&self) -> bool {
        match self.expected {
            Some(e) => self.verdict == Some(e),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub config: serde_json::Value,
    pub tolerances: Tolerances,
    pub seeds: Vec<u64>,
    pub table: Vec<ProbeRow>,
    pub summary: BTreeMap<String, f64>,
    pub pass: bool,
}

impl ProbeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn count(&self, verdict: Verdict) -> usize {
        self.table.iter().filter(|r| r.verdict == Some(verdict)).count()
    }

    /// Rows carrying an expectation.
    pub fn checks(&self) -> impl Iterator<Item = &ProbeRow> {
        self.table.iter().filter(|r| r.expected.is_some())
    }

    pub fn max_distance_at(&self, position: usize) -> f64 {
        self.table
            .iter()
            .filter(|r| r.position == position)
            .fold(0.0, |m, r| m.max(r.distance))
    }

    pub fn min_distance_at(&self, position: usize) -> f64 {
        self.table
            .iter()
            .filter(|r| r.position == position)
            .fold(f64::INFINITY, |m, r| m.min(r.distance))
    }
}

/// Anything that maps a `d x T` sequence to a `d x T` sequence.
pub trait SequenceMap {
    fn apply(&self, x: &Matrix) -> Result<Matrix>;
}

/// Stacked causal attention layers with nothing in between: no residuals,
/// no feedforward, no normalization.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layers: Vec<AttentionParams>,
    pub kind: AttentionKind,
}

impl AttentionStack {
    pub fn random(rng: &mut SeededRng, layers: usize, d: usize, kind: AttentionKind, scale: f64) -> Result<Self> {
        let layers = (0..layers)
            .map(|_| AttentionParams::random(rng, d, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, kind })
    }
}

impl SequenceMap for AttentionStack {
    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mask = AttentionMask::causal(x.cols())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = attn_traced(layer, &h, &mask, self.kind)?.output;
        }
        Ok(h)
    }
}

/// The full model's layer stack applied to already-embedded inputs.
#[derive(Debug, Clone)]
pub struct ModelStack {
    pub params: ModelParams,
    pub config: ModelConfig,
}

impl SequenceMap for ModelStack {
    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        forward_hidden(&self.params, &self.config, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Bare attention layers, exactly the masked matrix form.
    RawStack,
    /// Full model layers: residuals and ReLU feedforward, no normalization.
    FullModel,
}

/// How to build a random sequence processor for a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSubject {
    pub layers: usize,
    pub d: usize,
    pub kind: AttentionKind,
    pub target: ProbeTarget,
    /// Weight standard deviation; `None` means `1/sqrt(d)` for a raw stack
    /// and `0.3/sqrt(d)` for the full model. Unscaled
    /// logits on the residual stream saturate the softmax at `1/sqrt(d)`,
    /// while much smaller weights shrink linear-attention differences
    /// below the "different" threshold.
    pub weight_scale: Option<f64>,
}

impl ProbeSubject {
    pub fn raw(layers: usize, d: usize, kind: AttentionKind) -> Self {
        Self {
            layers,
            d,
            kind,
            target: ProbeTarget::RawStack,
            weight_scale: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 {
            return Err(Error::invalid("probe subject needs at least one layer and d >= 1"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        let default = match self.target {
            ProbeTarget::RawStack => 1.0,
            ProbeTarget::FullModel => 0.3,
        };
        self.weight_scale.unwrap_or(default / (self.d as f64).sqrt())
    }

    /// Builds the processor from `rng`; the caller keeps drawing inputs from
    /// the same generator.
    pub fn build(&self, rng: &mut SeededRng) -> Result<Box<dyn SequenceMap>> {
        self.validate()?;
        match self.target {
            ProbeTarget::RawStack => Ok(Box::new(AttentionStack::random(
                rng,
                self.layers,
                self.d,
                self.kind,
                self.scale(),
            )?)),
            ProbeTarget::FullModel => {
                let config = ModelConfig {
                    n_layers: self.layers,
                    d_model: self.d,
                    d_ff: 2 * self.d,
                    vocab_size: 1,
                    max_len: 1,
                    pe_scheme: PeScheme::None,
                    attention_kind: self.kind,
                    use_residual: true,
                    layer_norm: false,
                    scale_attention: false,
                    init_scale: Some(self.scale()),
                    seed: rng.below(usize::MAX) as u64,
                };
                let params = ModelParams::init(&config)?;
                Ok(Box::new(ModelStack { params, config }))
            }
        }
    }

    fn to_json(self) -> serde_json::Value {
        json!({
            "layers": self.layers,
            "d": self.d,
            "attention": self.kind,
            "target": self.target,
            "weight_scale": self.scale(),
        })
    }
}

fn random_input(rng: &mut SeededRng, d: usize, t: usize) -> Result<Matrix> {
    gaussian_init(rng, d, t, 1.0)
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Largest column-to-nearest-column distance between two sets of columns,
/// matching columns after sorting them lexicographically.
pub fn output_multiset_gap(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "output_multiset_gap",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let sorted = |m: &Matrix| {
        let mut cols: Vec<Vec<f64>> = (0..m.cols()).map(|j| m.column(j)).collect();
        cols.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        cols
    };
    let (ca, cb) = (sorted(a), sorted(b));
    Ok(ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| x.iter().zip(y).fold(0.0, |m: f64, (p, q)| m.max((p - q).abs())))
        .fold(0.0, f64::max))
}

fn equivariance_rows(
    params: &AttentionParams,
    x: &Matrix,
    perm: &PermutationSpec,
    mask: MaskKind,
    tol: Tolerances,
    seed: u64,
) -> Result<(Vec<ProbeRow>, f64)> {
    let m = AttentionMask::new(mask, x.cols())?;
    let y = attn_traced(params, x, &m, AttentionKind::Softmax)?.output;
    let y_perm = attn_traced(params, &perm.apply_columns(x)?, &m, AttentionKind::Softmax)?.output;
    let rows = perm
        .mapping()
        .iter()
        .enumerate()
        .map(|(j, &src)| {
            let distance = y_perm.column_distance(j, &y, src);
            ProbeRow {
                seed,
                position: j + 1,
                distance,
                verdict: Some(tol.verdict(distance)),
                expected: Some(Verdict::Equal),
            }
        })
        .collect();
    Ok((rows, output_multiset_gap(&y, &y_perm)?))
}

/// Compares `SelfAttn(X P)` with `SelfAttn(X) P` column by column. Passes when
/// every position is "equal".
pub fn probe_equivariance(
    params: &AttentionParams,
    x: &Matrix,
    perm: &PermutationSpec,
    mask: MaskKind,
    tol: Tolerances,
) -> Result<ProbeReport> {
    let (table, gap) = equivariance_rows(params, x, perm, mask, tol, 0)?;
    let pass = table.iter().all(ProbeRow::matches);
    Ok(ProbeReport {
        probe: "equivariance".into(),
        config: json!({ "mask": mask, "permutation": perm.one_based(), "d": x.rows(), "T": x.cols() }),
        tolerances: tol,
        seeds: vec![],
        table,
        summary: BTreeMap::from([("multiset_gap".to_string(), gap)]),
        pass,
    })
}

pub fn probe_equivariance_full_attention(
    params: &AttentionParams,
    x: &Matrix,
    perm: &PermutationSpec,
) -> Result<ProbeReport> {
    probe_equivariance(params, x, perm, MaskKind::Full, Tolerances::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceSuite {
    pub d: usize,
    pub t: usize,
    pub seeds: usize,
    pub perms_per_seed: usize,
    pub mask: MaskKind,
    pub tolerances: Tolerances,
    pub root_seed: u64,
}

impl Default for EquivarianceSuite {
    fn default() -> Self {
        Self {
            d: 4,
            t: 8,
            seeds: 20,
            perms_per_seed: 50,
            mask: MaskKind::Full,
            tolerances: Tolerances::default(),
            root_seed: 0,
        }
    }
}

/// Random params and inputs per seed, random non-identity permutations per
/// input. With a full mask the suite passes when every position is equal
/// and the output multiset is preserved; with a causal mask it passes when
/// at least 99% of permutations break equivariance somewhere.
pub fn equivariance_suite(suite: &EquivarianceSuite) -> Result<ProbeReport> {
    if suite.d == 0 || suite.t < 2 || suite.seeds == 0 || suite.perms_per_seed == 0 {
        return Err(Error::invalid(
            "equivariance suite needs d >= 1, T >= 2 and at least one trial",
        ));
    }
    let base = derive_seed(suite.root_seed, "probe/equivariance");
    let tol = suite.tolerances;
    let mut table = Vec::new();
    let mut seeds = Vec::new();
    let mut max_gap: f64 = 0.0;
    let (mut trials, mut violated) = (0usize, 0usize);
    for s in 0..suite.seeds {
        let seed = base.wrapping_add(s as u64);
        seeds.push(seed);
        let mut rng = SeededRng::new(seed);
        let params = AttentionParams::random(&mut rng, suite.d, 1.0 / (suite.d as f64).sqrt())?;
        let x = random_input(&mut rng, suite.d, suite.t)?;
        for _ in 0..suite.perms_per_seed {
            let perm = loop {
                let p = PermutationSpec::new(rng.permutation(suite.t))?;
                if !p.is_identity() {
                    break p;
                }
            };
            let (rows, gap) = equivariance_rows(&params, &x, &perm, suite.mask, tol, seed)?;
            trials += 1;
            if rows.iter().any(|r| r.verdict == Some(Verdict::Different)) {
                violated += 1;
            }
            max_gap = max_gap.max(gap);
            table.extend(rows);
        }
    }
    let violation_rate = fraction(violated, trials);
    let pass = match suite.mask {
        MaskKind::Full => table.iter().all(ProbeRow::matches) && max_gap <= tol.eq,
        MaskKind::Causal => violation_rate >= GENERIC_PASS_RATE,
    };
    let max_distance = table.iter().fold(0.0, |m: f64, r| m.max(r.distance));
    Ok(ProbeReport {
        probe: "equivariance".into(),
        config: json!({
            "d": suite.d,
            "T": suite.t,
            "seeds": suite.seeds,
            "perms_per_seed": suite.perms_per_seed,
            "mask": suite.mask,
            "root_seed": suite.root_seed,
            "expect": match suite.mask { MaskKind::Full => "equivariant", MaskKind::Causal => "not_equivariant" },
        }),
        tolerances: tol,
        seeds,
        table,
        summary: BTreeMap::from([
            ("trials".to_string(), trials as f64),
            ("violation_rate".to_string(), violation_rate),
            ("max_multiset_gap".to_string(), max_gap),
            ("max_distance".to_string(), max_distance),
        ]),
        pass,
    })
}

fn blindness_rows(
    f: &dyn SequenceMap,
    x: &Matrix,
    perm: &PermutationSpec,
    tol: Tolerances,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let y = f.apply(x)?;
    let y_perm = f.apply(&perm.apply_columns(x)?)?;
    Ok((0..x.cols())
        .map(|j| {
            let distance = y.column_distance(j, &y_perm, j);
            ProbeRow {
                seed,
                position: j + 1,
                distance,
                verdict: Some(tol.verdict(distance)),
                expected: perm.preserves_prefix_at(j).then_some(Verdict::Equal),
            }
        })
        .collect())
}

/// Compares outputs position by position under a permutation that keeps the
/// last token in place. Every position whose prefix multiset and token are
/// unchanged (always including the last) is expected to be equal; the rest
/// are reported with their verdicts.
pub fn probe_one_layer_blindness(
    f: &dyn SequenceMap,
    x: &Matrix,
    perm: &PermutationSpec,
    tol: Tolerances,
) -> Result<ProbeReport> {
    if !perm.fixes_last() {
        return Err(Error::invalid(format!(
            "permutation {:?} moves the last position",
            perm.one_based()
        )));
    }
    let table = blindness_rows(f, x, perm, tol, 0)?;
    let pass = table.iter().all(ProbeRow::matches);
    Ok(ProbeReport {
        probe: "one-layer-blindness".into(),
        config: json!({ "permutation": perm.one_based(), "d": x.rows(), "T": x.cols() }),
        tolerances: tol,
        seeds: vec![],
        table,
        summary: BTreeMap::new(),
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindnessSuite {
    pub subject: ProbeSubject,
    pub t: usize,
    pub seeds: usize,
    /// All `(T-1)!` permutations fixing the last position when `None`,
    /// otherwise this many random ones per seed.
    pub sampled_perms: Option<usize>,
    pub tolerances: Tolerances,
    pub root_seed: u64,
}

impl Default for BlindnessSuite {
    fn default() -> Self {
        Self {
            subject: ProbeSubject::raw(1, 4, AttentionKind::Softmax),
            t: 4,
            seeds: 20,
            sampled_perms: None,
            tolerances: Tolerances::default(),
            root_seed: 0,
        }
    }
}

pub fn blindness_suite(suite: &BlindnessSuite) -> Result<ProbeReport> {
    if suite.t == 0 || suite.seeds == 0 {
        return Err(Error::invalid("blindness suite needs T >= 1 and at least one seed"));
    }
    let base = derive_seed(suite.root_seed, "probe/one-layer-blindness");
    let exhaustive = suite.sampled_perms.is_none();
    let fixed = exhaustive.then(|| PermutationSpec::all_fixing_last(suite.t));
    let mut table = Vec::new();
    let mut seeds = Vec::new();
    let mut perms_checked = 0usize;
    for s in 0..suite.seeds {
        let seed = base.wrapping_add(s as u64);
        seeds.push(seed);
        let mut rng = SeededRng::new(seed);
        let f = suite.subject.build(&mut rng)?;
        let x = random_input(&mut rng, suite.subject.d, suite.t)?;
        let perms = match (&fixed, suite.sampled_perms) {
            (Some(all), _) => all.clone(),
            (None, Some(n)) => (0..n)
                .map(|_| {
                    let mut m = rng.permutation(suite.t - 1);
                    m.push(suite.t - 1);
                    PermutationSpec::new(m)
                })
                .collect::<Result<_>>()?,
            (None, None) => unreachable!(),
        };
        for perm in &perms {
            table.extend(blindness_rows(f.as_ref(), &x, perm, suite.tolerances, seed)?);
        }
        perms_checked += perms.len();
    }
    let last = suite.t;
    let pass = table.iter().all(ProbeRow::matches);
    let failures = table.iter().filter(|r| !r.matches()).count();
    let max_last = table
        .iter()
        .filter(|r| r.position == last)
        .fold(0.0, |m: f64, r| m.max(r.distance));
    Ok(ProbeReport {
        probe: "one-layer-blindness".into(),
        config: json!({
            "subject": suite.subject.to_json(),
            "T": suite.t,
            "seeds": suite.seeds,
            "exhaustive": exhaustive,
            "sampled_perms": suite.sampled_perms,
            "root_seed": suite.root_seed,
        }),
        tolerances: suite.tolerances,
        seeds,
        table,
        summary: BTreeMap::from([
            ("permutations_checked".to_string(), perms_checked as f64),
            ("max_last_position_distance".to_string(), max_last),
            ("failed_checks".to_string(), failures as f64),
        ]),
        pass,
    })
}

/// How the second input of a sensitivity trial is derived from the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Perturbation {
    /// Swap positions 1 and 2.
    SwapFirstTwo,
    /// A uniformly random non-identity permutation.
    RandomPermutation,
    /// Replace the input at this 1-based position with a fresh draw.
    Point { position: usize },
    /// Replace the input at a uniformly random position.
    RandomPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySuite {
    pub subject: ProbeSubject,
    pub t: usize,
    pub trials: usize,
    pub perturbation: Perturbation,
    pub tolerances: Tolerances,
    pub root_seed: u64,
}

impl Default for SensitivitySuite {
    fn default() -> Self {
        Self {
            subject: ProbeSubject::raw(2, 4, AttentionKind::Softmax),
            t: 3,
            trials: 100,
            perturbation: Perturbation::SwapFirstTwo,
            tolerances: Tolerances::default(),
            root_seed: 0,
        }
    }
}

fn perturb(rng: &mut SeededRng, x: &Matrix, p: Perturbation) -> Result<(Matrix, usize)> {
    let t = x.cols();
    match p {
        Perturbation::SwapFirstTwo => {
            if t < 2 {
                return Err(Error::invalid("swap of the first two positions needs T >= 2"));
            }
            Ok((PermutationSpec::swap(t, 0, 1)?.apply_columns(x)?, 0))
        }
        Perturbation::RandomPermutation => {
            if t < 2 {
                return Err(Error::invalid("a non-identity permutation needs T >= 2"));
            }
            let perm = loop {
                let p = PermutationSpec::new(rng.permutation(t))?;
                if !p.is_identity() {
                    break p;
                }
            };
            let first = perm.first_moved().expect("non-identity");
            Ok((perm.apply_columns(x)?, first))
        }
        Perturbation::Point { position } => {
            if position == 0 || position > t {
                return Err(Error::invalid(format!(
                    "point position {position} out of range 1..={t}"
                )));
            }
            let mut x2 = x.clone();
            let fresh = random_input(rng, x.rows(), 1)?;
            x2.set_column(position - 1, fresh.data())?;
            Ok((x2, position - 1))
        }
        Perturbation::RandomPoint => {
            let position = rng.below(t) + 1;
            perturb(rng, x, Perturbation::Point { position })
        }
    }
}

fn sensitivity_trial(suite: &SensitivitySuite, seed: u64) -> Result<Vec<ProbeRow>> {
    let mut rng = SeededRng::new(seed);
    let f = suite.subject.build(&mut rng)?;
    let x = random_input(&mut rng, suite.subject.d, suite.t)?;
    let (x2, first) = perturb(&mut rng, &x, suite.perturbation)?;
    let y = f.apply(&x)?;
    let y2 = f.apply(&x2)?;
    Ok((0..suite.t)
        .map(|j| {
            let distance = y.column_distance(j, &y2, j);
            let checked = j >= first;
            ProbeRow {
                seed,
                position: j + 1,
                distance,
                verdict: checked.then(|| suite.tolerances.verdict(distance)),
                expected: checked.then_some(Verdict::Different),
            }
        })
        .collect())
}

/// Random processors and inputs; the second input first differs at some
/// position `i` and every output at `j >= i` must be "different". Distances
/// at `j < i` are reported without a verdict. Passes when at least 99% of
/// trials are different everywhere, at least 99% of position checks are
/// different, and no check is "equal".
pub fn probe_full_position_sensitivity(suite: &SensitivitySuite) -> Result<ProbeReport> {
    if suite.t == 0 || suite.trials == 0 {
        return Err(Error::invalid("sensitivity suite needs T >= 1 and at least one trial"));
    }
    let base = derive_seed(suite.root_seed, "probe/full-sensitivity");
    let mut table = Vec::new();
    let mut seeds = Vec::new();
    let mut clean_trials = 0usize;
    let mut retries = 0usize;
    for k in 0..suite.trials {
        let mut seed = base.wrapping_add(k as u64);
        let mut rows = sensitivity_trial(suite, seed)?;
        if rows.iter().any(|r| r.verdict == Some(Verdict::Inconclusive)) {
            retries += 1;
            seed ^= RETRY_SALT;
            rows = sensitivity_trial(suite, seed)?;
        }
        if rows.iter().all(ProbeRow::matches) {
            clean_trials += 1;
        }
        seeds.push(seed);
        table.extend(rows);
    }
    let checks = table.iter().filter(|r| r.expected.is_some()).count();
    let different = table.iter().filter(|r| r.verdict == Some(Verdict::Different)).count();
    let equal = table.iter().filter(|r| r.verdict == Some(Verdict::Equal)).count();
    let inconclusive = table
        .iter()
        .filter(|r| r.verdict == Some(Verdict::Inconclusive))
        .count();
    let trial_rate = fraction(clean_trials, suite.trials);
    let check_rate = fraction(different, checks);
    let pass = trial_rate >= GENERIC_PASS_RATE && check_rate >= GENERIC_PASS_RATE && equal == 0;
    let min_checked = table
        .iter()
        .filter(|r| r.expected.is_some())
        .fold(f64::INFINITY, |m, r| m.min(r.distance));
    Ok(ProbeReport {
        probe: "full-sensitivity".into(),
        config: json!({
            "subject": suite.subject.to_json(),
            "T": suite.t,
            "trials": suite.trials,
            "perturbation": suite.perturbation,
            "root_seed": suite.root_seed,
        }),
        tolerances: suite.tolerances,
        seeds,
        table,
        summary: BTreeMap::from([
            ("trials_all_different".to_string(), clean_trials as f64),
            ("trial_pass_rate".to_string(), trial_rate),
            ("check_pass_rate".to_string(), check_rate),
            ("equal_checks".to_string(), equal as f64),
            ("inconclusive_checks".to_string(), inconclusive as f64),
            ("retried_trials".to_string(), retries as f64),
            (
                "min_checked_distance".to_string(),
                if min_checked.is_finite() { min_checked } else { 0.0 },
            ),
        ]),
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_bands() {
        let tol = Tolerances::default();
        assert_eq!(tol.verdict(0.0), Verdict::Equal);
        assert_eq!(tol.verdict(1e-9), Verdict::Equal);
        assert_eq!(tol.verdict(1e-7), Verdict::Inconclusive);
        assert_eq!(tol.verdict(1e-6), Verdict::Different);
        assert!(Tolerances::new(1e-6, 1e-9).is_err());
    }

    #[test]
    fn permutation_validation() {
        assert!(PermutationSpec::new(vec![0, 0]).is_err());
        assert!(PermutationSpec::new(vec![0, 2]).is_err());
        assert!(PermutationSpec::new(vec![]).is_err());
        let p = PermutationSpec::new(vec![1, 0, 2]).unwrap();
        assert!(p.fixes_last());
        assert!(!PermutationSpec::new(vec![2, 1, 0]).unwrap().fixes_last());
        assert_eq!(p.first_moved(), Some(0));
        assert!(!p.preserves_prefix_at(0));
        assert!(p.preserves_prefix_at(2));
    }

    #[test]
    fn enumerates_all_permutations_fixing_last() {
        let perms = PermutationSpec::all_fixing_last(4);
        assert_eq!(perms.len(), 6);
        assert!(perms.iter().all(PermutationSpec::fixes_last));
        let mut uniq = perms.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 6);
        assert_eq!(PermutationSpec::all_fixing_last(1).len(), 1);
        assert_eq!(PermutationSpec::all_fixing_last(5).len(), 24);
    }

    #[test]
    fn apply_columns_moves_columns() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let p = PermutationSpec::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.apply_columns(&x).unwrap().data(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn identity_permutation_has_zero_distance() {
        let mut rng = SeededRng::new(1);
        let params = AttentionParams::random(&mut rng, 4, 0.5).unwrap();
        let x = random_input(&mut rng, 4, 5).unwrap();
        let r = probe_equivariance_full_attention(&params, &x, &PermutationSpec::identity(5)).unwrap();
        assert!(r.pass);
        assert!(r.table.iter().all(|row| row.distance == 0.0));
    }

    #[test]
    fn blindness_rejects_moving_last() {
        let mut rng = SeededRng::new(1);
        let stack = AttentionStack::random(&mut rng, 1, 3, AttentionKind::Softmax, 0.5).unwrap();
        let x = random_input(&mut rng, 3, 3).unwrap();
        let perm = PermutationSpec::swap(3, 1, 2).unwrap();
        assert!(probe_one_layer_blindness(&stack, &x, &perm, Tolerances::default()).is_err());
    }

    #[test]
    fn blindness_swap_pattern() {
        let mut rng = SeededRng::new(21);
        let stack = AttentionStack::random(&mut rng, 1, 4, AttentionKind::Softmax, 0.5).unwrap();
        let x = random_input(&mut rng, 4, 3).unwrap();
        let r = probe_one_layer_blindness(
            &stack,
            &x,
            &PermutationSpec::swap(3, 0, 1).unwrap(),
            Tolerances::default(),
        )
        .unwrap();
        let verdicts: Vec<_> = r.table.iter().map(|row| row.verdict.unwrap()).collect();
        assert_eq!(verdicts, vec![Verdict::Different, Verdict::Different, Verdict::Equal]);
        assert!(r.pass);

        let id = probe_one_layer_blindness(&stack, &x, &PermutationSpec::identity(3), Tolerances::default()).unwrap();
        assert!(id.table.iter().all(|row| row.verdict == Some(Verdict::Equal)));
    }

    #[test]
    fn point_perturbation_at_last_position_differs() {
        for layers in 1..=3 {
            let suite = SensitivitySuite {
                subject: ProbeSubject::raw(layers, 4, AttentionKind::Softmax),
                t: 5,
                trials: 10,
                perturbation: Perturbation::Point { position: 5 },
                ..SensitivitySuite::default()
            };
            let r = probe_full_position_sensitivity(&suite).unwrap();
            assert!(r.pass, "layers={layers}");
            assert!(r
                .table
                .iter()
                .filter(|row| row.position < 5)
                .all(|row| row.distance == 0.0));
        }
    }

    #[test]
    fn multiset_gap_ignores_column_order() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = a.select_columns(&[2, 0, 1]).unwrap();
        assert_eq!(output_multiset_gap(&a, &b).unwrap(), 0.0);
    }
}
