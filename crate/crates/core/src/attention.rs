//! Single-head self-attention, in the incremental step form and the masked
//! matrix form.
//!
//! Logits are `K^T Q` with keys indexing rows and queries indexing columns,
//! so softmax runs down each column (over time). There is no `1/sqrt(d)`
//! scaling and no output projection unless [`AttentionParams::scaled`] is set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, gaussian_init, softmax_columns, Matrix};
use crate::rng::SeededRng;

/// Which attention nonlinearity a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Softmax,
    /// Softmax removed: `y_t = V_t K_t^T q_t`.
    Linear,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(AttentionKind::Softmax),
            "linear" => Ok(AttentionKind::Linear),
            other => Err(Error::invalid(format!(
                "unknown attention kind '{other}' (expected softmax or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Multiply logits by `1/sqrt(d)`.
    #[serde(default)]
    pub scaled: bool,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != (d, d) {
                return Err(Error::invalid(format!(
                    "{name} must be {d}x{d}, got {}x{}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            scaled: false,
        })
    }

    /// Gaussian weights with standard deviation `scale`, drawn in q, k, v order.
    pub fn random(rng: &mut SeededRng, d: usize, scale: f64) -> Result<Self> {
        let w_q = gaussian_init(rng, d, d, scale)?;
        let w_k = gaussian_init(rng, d, d, scale)?;
        let w_v = gaussian_init(rng, d, d, scale)?;
        Self::new(w_q, w_k, w_v)
    }

    pub fn with_scaling(mut self, scaled: bool) -> Self {
        self.scaled = scaled;
        self
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn logit_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    pub(crate) fn check_input(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.rows() != self.dim() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.w_q.shape(),
                right: x.shape(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Causal,
    Full,
}

/// `T x T` mask; entry `(i, j)` gates key `i` for query `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    materialized: Matrix,
}

impl AttentionMask {
    pub fn new(kind: MaskKind, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("attention mask size must be at least 1"));
        }
        let mut materialized = Matrix::filled(size, size, 1.0);
        if kind == MaskKind::Causal {
            for i in 0..size {
                for j in 0..i {
                    materialized.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        Ok(Self { kind, materialized })
    }

    pub fn causal(size: usize) -> Result<Self> {
        Self::new(MaskKind::Causal, size)
    }

    pub fn full(size: usize) -> Result<Self> {
        Self::new(MaskKind::Full, size)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.materialized.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.materialized
    }

    #[inline]
    pub fn allows(&self, key: usize, query: usize) -> bool {
        self.materialized.get(key, query) != f64::NEG_INFINITY
    }
}

pub fn make_mask(kind: MaskKind, size: usize) -> Result<AttentionMask> {
    AttentionMask::new(kind, size)
}

/// Keys and values seen so far (`K_t`, `V_t`), stored as columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl StepState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// `K_t` as a `d x t` matrix, `None` while empty.
    pub fn keys(&self) -> Option<Matrix> {
        (!self.keys.is_empty()).then(|| Matrix::from_columns(&self.keys).expect("non-empty columns"))
    }

    pub fn values(&self) -> Option<Matrix> {
        (!self.values.is_empty()).then(|| Matrix::from_columns(&self.values).expect("non-empty columns"))
    }
}

/// One autoregressive step: append `k_t`, `v_t` and return
/// `y_t = V_t softmax(K_t^T q_t)`.
pub fn attn_step(params: &AttentionParams, state: &mut StepState, x_t: &[f64]) -> Result<Vec<f64>> {
    let d = params.dim();
    if x_t.len() != d {
        return Err(Error::LengthMismatch {
            op: "attn_step",
            expected: d,
            actual: x_t.len(),
        });
    }
    if let Some(k) = state.keys.first() {
        if k.len() != d {
            return Err(Error::invalid(format!(
                "step state holds {}-dimensional keys but params are {d}-dimensional",
                k.len()
            )));
        }
    }
    let q = params.w_q.matvec(x_t)?;
    state.keys.push(params.w_k.matvec(x_t)?);
    state.values.push(params.w_v.matvec(x_t)?);

    let scale = params.logit_scale();
    let logits: Vec<f64> = state.keys.iter().map(|k| dot(k, &q) * scale).collect();
    let weights = softmax_columns(&Matrix::column_vector(&logits)?)?;

    let mut y = vec![0.0; d];
    for (a, v) in weights.data().iter().zip(&state.values) {
        for (yi, vi) in y.iter_mut().zip(v) {
            *yi += vi * a;
        }
    }
    Ok(y)
}

/// Runs [`attn_step`] over every column of `x` from a fresh state.
pub fn attn_steps(params: &AttentionParams, x: &Matrix) -> Result<Matrix> {
    params.check_input("attn_steps", x)?;
    let mut state = StepState::new();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.cols() {
        let y = attn_step(params, &mut state, &x.column(t))?;
        out.set_column(t, &y)?;
    }
    Ok(out)
}

/// Everything a masked attention pass computes, kept for backprop and
/// attention statistics.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention weights, keys by rows and queries by columns. For
    /// [`AttentionKind::Linear`] these are the raw masked scores.
    pub weights: Matrix,
    pub output: Matrix,
}

/// Matrix-form attention under `mask`. Masked logits are replaced by `-inf`
/// before the softmax; for linear attention they are zeroed.
pub fn attn_traced(
    params: &AttentionParams,
    x: &Matrix,
    mask: &AttentionMask,
    kind: AttentionKind,
) -> Result<AttentionTrace> {
    params.check_input("attn_matrix", x)?;
    if mask.size() != x.cols() {
        return Err(Error::invalid(format!(
            "mask size {} does not match sequence length {}",
            mask.size(),
            x.cols()
        )));
    }
    let q = params.w_q.matmul(x)?;
    let k = params.w_k.matmul(x)?;
    let v = params.w_v.matmul(x)?;
    let scale = params.logit_scale();
    let mut scores = k.t_matmul(&q)?;
    let t = x.cols();
    let fill = match kind {
        AttentionKind::Softmax => f64::NEG_INFINITY,
        AttentionKind::Linear => 0.0,
    };
    for i in 0..t {
        for j in 0..t {
            if mask.allows(i, j) {
                scores.set(i, j, scores.get(i, j) * scale);
            } else {
                scores.set(i, j, fill);
            }
        }
    }
    let weights = match kind {
        AttentionKind::Softmax => softmax_columns(&scores)?,
        AttentionKind::Linear => scores,
    };
    let output = v.matmul(&weights)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        weights,
        output,
    })
}

/// `Y = V softmax(mask(K^T Q))`.
pub fn attn_matrix(params: &AttentionParams, x: &Matrix, mask: &AttentionMask) -> Result<Matrix> {
    Ok(attn_traced(params, x, mask, AttentionKind::Softmax)?.output)
}
