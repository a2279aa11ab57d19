//! A small autoregressive transformer language model.
//!
//! Per layer: causal self-attention, then a position-wise ReLU feedforward
//! block, each optionally wrapped in a residual connection and preceded by
//! a non-affine layer norm. Positional encodings, when enabled, are added to
//! the token embeddings before the first layer.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::attention::{attn_traced, AttentionKind, AttentionMask, AttentionParams, AttentionTrace};
use crate::error::{Error, Result};
use crate::math::{gaussian_init, Matrix};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeScheme {
    None,
    Sinusoidal,
    LearnedAbsolute,
}

impl std::str::FromStr for PeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" | "nope" => Ok(PeScheme::None),
            "sinusoidal" | "sin" => Ok(PeScheme::Sinusoidal),
            "learned" | "learned_absolute" => Ok(PeScheme::LearnedAbsolute),
            other => Err(Error::invalid(format!(
                "unknown positional encoding '{other}' (expected none, sinusoidal or learned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pe_scheme: PeScheme,
    pub attention_kind: AttentionKind,
    pub use_residual: bool,
    pub layer_norm: bool,
    /// `1/sqrt(d)` logit scaling.
    pub scale_attention: bool,
    /// Standard deviation for all weight matrices; `None` means `0.1/sqrt(d)`.
    pub init_scale: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 8,
            max_len: 16,
            pe_scheme: PeScheme::None,
            attention_kind: AttentionKind::Softmax,
            use_residual: true,
            layer_norm: false,
            scale_attention: true,
            init_scale: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("init_scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn weight_scale(&self) -> f64 {
        self.init_scale.unwrap_or_else(|| 0.1 / (self.d_model as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub pe_table: Option<Matrix>,
    pub layers: Vec<LayerParams>,
    pub head: Matrix,
}

impl ModelParams {
    /// Draws all weights from the config seed. Biases start at zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::for_component(config.seed, "model-init");
        let (d, ff) = (config.d_model, config.d_ff);
        let scale = config.weight_scale();
        let embedding = gaussian_init(&mut rng, config.vocab_size, d, scale)?;
        let pe_table = match config.pe_scheme {
            PeScheme::None => None,
            PeScheme::Sinusoidal => Some(sinusoidal_table(config.max_len, d)?),
            PeScheme::LearnedAbsolute => Some(gaussian_init(&mut rng, config.max_len, d, scale)?),
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = AttentionParams::random(&mut rng, d, scale)?.with_scaling(config.scale_attention);
            layers.push(LayerParams {
                attn,
                ffn_w1: gaussian_init(&mut rng, ff, d, scale)?,
                ffn_b1: Matrix::zeros(ff, 1),
                ffn_w2: gaussian_init(&mut rng, d, ff, scale)?,
                ffn_b2: Matrix::zeros(d, 1),
            });
        }
        let head = gaussian_init(&mut rng, config.vocab_size, d, scale)?;
        Ok(Self {
            embedding,
            pe_table,
            layers,
            head,
        })
    }

    /// Same structure with every entry zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            embedding: z(&self.embedding),
            pe_table: self.pe_table.as_ref().map(z),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn: AttentionParams {
                        w_q: z(&l.attn.w_q),
                        w_k: z(&l.attn.w_k),
                        w_v: z(&l.attn.w_v),
                        scaled: l.attn.scaled,
                    },
                    ffn_w1: z(&l.ffn_w1),
                    ffn_b1: z(&l.ffn_b1),
                    ffn_w2: z(&l.ffn_w2),
                    ffn_b2: z(&l.ffn_b2),
                })
                .collect(),
            head: z(&self.head),
        }
    }

    /// Every parameter matrix with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(pe) = &self.pe_table {
            out.push(("pe_table".to_string(), pe));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.w_q"), &l.attn.w_q));
            out.push((format!("layers.{i}.w_k"), &l.attn.w_k));
            out.push((format!("layers.{i}.w_v"), &l.attn.w_v));
            out.push((format!("layers.{i}.ffn_w1"), &l.ffn_w1));
            out.push((format!("layers.{i}.ffn_b1"), &l.ffn_b1));
            out.push((format!("layers.{i}.ffn_w2"), &l.ffn_w2));
            out.push((format!("layers.{i}.ffn_b2"), &l.ffn_b2));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        if let Some(pe) = self.pe_table.as_mut() {
            out.push(pe);
        }
        for l in &mut self.layers {
            out.push(&mut l.attn.w_q);
            out.push(&mut l.attn.w_k);
            out.push(&mut l.attn.w_v);
            out.push(&mut l.ffn_w1);
            out.push(&mut l.ffn_b1);
            out.push(&mut l.ffn_w2);
            out.push(&mut l.ffn_b2);
        }
        out.push(&mut self.head);
        out
    }

    /// Whether the tensor at `index` (in [`ModelParams::tensors`] order) is
    /// updated by training. A sinusoidal table is fixed.
    pub fn is_trainable(&self, config: &ModelConfig, index: usize) -> bool {
        !(index == 1 && self.pe_table.is_some() && config.pe_scheme == PeScheme::Sinusoidal)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Checks that shapes agree with `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut expect = vec![("embedding".to_string(), (v, d))];
        match (config.pe_scheme, &self.pe_table) {
            (PeScheme::None, None) => {}
            (PeScheme::None, Some(_)) => return Err(Error::invalid("NoPE config but params carry a PE table")),
            (_, None) => return Err(Error::invalid("config expects a PE table but params have none")),
            (_, Some(_)) => expect.push(("pe_table".to_string(), (config.max_len, d))),
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::invalid(format!(
                "config has {} layers, params have {}",
                config.n_layers,
                self.layers.len()
            )));
        }
        for i in 0..config.n_layers {
            for (name, shape) in [
                ("w_q", (d, d)),
                ("w_k", (d, d)),
                ("w_v", (d, d)),
                ("ffn_w1", (ff, d)),
                ("ffn_b1", (ff, 1)),
                ("ffn_w2", (d, ff)),
                ("ffn_b2", (d, 1)),
            ] {
                expect.push((format!("layers.{i}.{name}"), shape));
            }
        }
        expect.push(("head".to_string(), (v, d)));
        for ((name, m), (ename, shape)) in self.tensors().into_iter().zip(expect) {
            debug_assert_eq!(name, ename);
            if m.shape() != shape {
                return Err(Error::invalid(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        Ok(())
    }
}

/// Token ids in `0..vocab_size`, `1 <= len <= max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, config: &ModelConfig) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence must not be empty"));
        }
        if tokens.len() > config.max_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max_len {}",
                tokens.len(),
                config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                config.vocab_size
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sinusoidal table, one row per position starting at 0:
/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(...)`.
pub fn sinusoidal_table(max_len: usize, d: usize) -> Result<Matrix> {
    if max_len == 0 || d == 0 {
        return Err(Error::invalid("positional table dimensions must be positive"));
    }
    let mut table = Matrix::zeros(max_len, d);
    for p in 0..max_len {
        for c in 0..d {
            let pair = (c / 2) as f64;
            let angle = p as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            table.set(p, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(table)
}

/// Table for `scheme`; learned tables draw from `rng` with standard deviation `scale`.
pub fn positional_table(scheme: PeScheme, max_len: usize, d: usize, rng: &mut SeededRng, scale: f64) -> Result<Matrix> {
    match scheme {
        PeScheme::None => Err(Error::invalid("no positional table for pe_scheme = none")),
        PeScheme::Sinusoidal => sinusoidal_table(max_len, d),
        PeScheme::LearnedAbsolute => gaussian_init(rng, max_len, d, scale),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

fn layer_norm(x: &Matrix) -> (Matrix, NormCache) {
    let (d, t) = x.shape();
    let mut xhat = Matrix::zeros(d, t);
    let mut inv_std = Vec::with_capacity(t);
    for j in 0..t {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, v) in col.iter().enumerate() {
            xhat.set(i, j, (v - mean) * inv);
        }
        inv_std.push(inv);
    }
    (xhat.clone(), NormCache { xhat, inv_std })
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub attn_in: Matrix,
    pub norm1: Option<NormCache>,
    pub attn: AttentionTrace,
    pub ffn_in: Matrix,
    pub norm2: Option<NormCache>,
    pub pre_act: Matrix,
    pub hidden: Matrix,
    pub output: Matrix,
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        let b = bias.get(i, 0);
        for v in m.row_mut(i) {
            *v += b;
        }
    }
}

pub(crate) fn layer_forward(
    layer: &LayerParams,
    config: &ModelConfig,
    x: &Matrix,
    mask: &AttentionMask,
) -> Result<LayerTrace> {
    let (attn_in, norm1) = if config.layer_norm {
        let (y, c) = layer_norm(x);
        (y, Some(c))
    } else {
        (x.clone(), None)
    };
    let attn = attn_traced(&layer.attn, &attn_in, mask, config.attention_kind)?;
    let mid = if config.use_residual {
        x.add(&attn.output)?
    } else {
        attn.output.clone()
    };
    let (ffn_in, norm2) = if config.layer_norm {
        let (y, c) = layer_norm(&mid);
        (y, Some(c))
    } else {
        (mid.clone(), None)
    };
    let mut pre_act = layer.ffn_w1.matmul(&ffn_in)?;
    add_bias(&mut pre_act, &layer.ffn_b1);
    let hidden = pre_act.map(|v| v.max(0.0));
    let mut ffn_out = layer.ffn_w2.matmul(&hidden)?;
    add_bias(&mut ffn_out, &layer.ffn_b2);
    let output = if config.use_residual {
        mid.add(&ffn_out)?
    } else {
        ffn_out
    };
    Ok(LayerTrace {
        attn_in,
        norm1,
        attn,
        ffn_in,
        norm2,
        pre_act,
        hidden,
        output,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    pub logits: Matrix,
}

impl Trace {
    pub fn top(&self) -> &Matrix {
        &self.layers.last().expect("at least one layer").output
    }
}

/// Token embeddings plus positional rows.
pub fn embed(params: &ModelParams, config: &ModelConfig, seq: &TokenSequence) -> Result<Matrix> {
    if seq.len() > config.max_len {
        return Err(Error::invalid(format!(
            "sequence of length {} exceeds max_len {}",
            seq.len(),
            config.max_len
        )));
    }
    let d = config.d_model;
    let mut x = Matrix::zeros(d, seq.len());
    for (t, &tok) in seq.tokens().iter().enumerate() {
        if tok >= config.vocab_size {
            return Err(Error::invalid(format!("token id {tok} out of range")));
        }
        let e = params.embedding.row(tok);
        match &params.pe_table {
            Some(pe) => {
                let p = pe.row(t);
                for i in 0..d {
                    x.set(i, t, e[i] + p[i]);
                }
            }
            None => x.set_column(t, e)?,
        }
    }
    Ok(x)
}

pub(crate) fn trace_hidden(params: &ModelParams, config: &ModelConfig, x: &Matrix) -> Result<Vec<LayerTrace>> {
    if x.rows() != config.d_model {
        return Err(Error::invalid(format!(
            "hidden input has {} rows, model width is {}",
            x.rows(),
            config.d_model
        )));
    }
    let mask = AttentionMask::causal(x.cols())?;
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = layers.last().map_or(x, |l| &l.output);
        let tr = layer_forward(layer, config, input, &mask)?;
        layers.push(tr);
    }
    Ok(layers)
}

pub(crate) fn trace(params: &ModelParams, config: &ModelConfig, seq: &TokenSequence) -> Result<Trace> {
    let x = embed(params, config, seq)?;
    let layers = trace_hidden(params, config, &x)?;
    let logits = params.head.matmul(&layers.last().expect("n_layers >= 1").output)?;
    Ok(Trace {
        tokens: seq.tokens().to_vec(),
        layers,
        logits,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `vocab x T`.
    pub logits: Matrix,
    /// Output of each layer, `d x T`.
    pub activations: Vec<Matrix>,
    /// Attention weight matrices per layer when captured.
    pub attention: Option<Vec<Matrix>>,
}

pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    seq: &TokenSequence,
    capture_attention: bool,
) -> Result<ForwardOutput> {
    let tr = trace(params, config, seq)?;
    let attention = capture_attention.then(|| tr.layers.iter().map(|l| l.attn.weights.clone()).collect());
    Ok(ForwardOutput {
        logits: tr.logits,
        activations: tr.layers.into_iter().map(|l| l.output).collect(),
        attention,
    })
}

/// Runs the layer stack on an already-embedded `d x T` input and returns the
/// top-layer activations.
pub fn forward_hidden(params: &ModelParams, config: &ModelConfig, x: &Matrix) -> Result<Matrix> {
    let mut layers = trace_hidden(params, config, x)?;
    Ok(layers.pop().expect("n_layers >= 1").output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttentionStats {
    pub layer: usize,
    /// Mean over query positions of the attention entropy (nats).
    pub mean_entropy: f64,
    /// Mean entropy divided by `ln t`, over positions `t >= 2`; 1 is uniform.
    pub mean_normalized_entropy: f64,
    /// Mean weight a query puts on its own position.
    pub mean_diagonal_mass: f64,
}

/// Per-layer attention entropy summary. Linear-attention scores are turned
/// into distributions by normalizing their absolute values.
pub fn attention_stats(output: &ForwardOutput) -> Result<Vec<LayerAttentionStats>> {
    let weights = output.attention.as_ref().ok_or(Error::StatsNotCaptured)?;
    Ok(weights
        .iter()
        .enumerate()
        .map(|(layer, w)| {
            let t = w.cols();
            let mut entropy_sum = 0.0;
            let mut norm_sum = 0.0;
            let mut diag_sum = 0.0;
            for j in 0..t {
                let col: Vec<f64> = w.column(j).iter().map(|v| v.abs()).collect();
                let total: f64 = col.iter().sum();
                let h = if total > 0.0 {
                    col.iter()
                        .map(|&a| a / total)
                        .filter(|&p| p > 0.0)
                        .map(|p| -p * p.ln())
                        .sum()
                } else {
                    0.0
                };
                entropy_sum += h;
                if j > 0 {
                    norm_sum += h / ((j + 1) as f64).ln();
                }
                diag_sum += if total > 0.0 { col[j] / total } else { 0.0 };
            }
            LayerAttentionStats {
                layer,
                mean_entropy: entropy_sum / t as f64,
                mean_normalized_entropy: if t > 1 { norm_sum / (t - 1) as f64 } else { 0.0 },
                mean_diagonal_mass: diag_sum / t as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(layers: usize, pe: PeScheme) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            d_model: 4,
            d_ff: 8,
            vocab_size: 5,
            max_len: 8,
            pe_scheme: pe,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sinusoidal_position_zero_alternates() {
        let t = sinusoidal_table(4, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoidal_rows_are_distinct() {
        for d in [2usize, 3, 8] {
            let t = sinusoidal_table(10_000, d).unwrap();
            let mut rows: Vec<Vec<u64>> = (0..t.rows())
                .map(|p| t.row(p).iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            rows.dedup();
            assert_eq!(rows.len(), 10_000, "duplicate rows for d={d}");
        }
    }

    #[test]
    fn learned_table_reproducible_and_none_rejected() {
        let a = positional_table(PeScheme::LearnedAbsolute, 5, 3, &mut SeededRng::new(1), 0.1).unwrap();
        let b = positional_table(PeScheme::LearnedAbsolute, 5, 3, &mut SeededRng::new(1), 0.1).unwrap();
        assert_eq!(a, b);
        assert!(positional_table(PeScheme::None, 5, 3, &mut SeededRng::new(1), 0.1).is_err());
    }

    #[test]
    fn single_token_forward_shapes() {
        let cfg = ModelConfig {
            vocab_size: 2,
            ..config(1, PeScheme::None)
        };
        let params = ModelParams::init(&cfg).unwrap();
        let seq = TokenSequence::new(vec![1], &cfg).unwrap();
        let out = forward(&params, &cfg, &seq, true).unwrap();
        assert_eq!(out.logits.shape(), (2, 1));
        assert_eq!(out.attention.unwrap()[0].data(), &[1.0]);
    }

    #[test]
    fn pe_changes_first_layer_inputs_where_rows_are_nonzero() {
        let nope = config(1, PeScheme::None);
        let sin = config(1, PeScheme::Sinusoidal);
        let p0 = ModelParams::init(&nope).unwrap();
        let p1 = ModelParams::init(&sin).unwrap();
        assert_eq!(p0.embedding, p1.embedding);
        let seq = TokenSequence::new(vec![0, 3, 2, 4], &nope).unwrap();
        let x0 = embed(&p0, &nope, &seq).unwrap();
        let x1 = embed(&p1, &sin, &seq).unwrap();
        for t in 0..4 {
            assert!(x0.column_distance(t, &x1, t) > 0.0);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = config(2, PeScheme::LearnedAbsolute);
        let params = ModelParams::init(&cfg).unwrap();
        let seq = TokenSequence::new(vec![0, 1, 2, 3], &cfg).unwrap();
        let a = forward(&params, &cfg, &seq, false).unwrap();
        let b = forward(&params, &cfg, &seq, false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn invalid_sequences_rejected() {
        let cfg = config(1, PeScheme::None);
        assert!(TokenSequence::new(vec![], &cfg).is_err());
        assert!(TokenSequence::new(vec![0; 9], &cfg).is_err());
        assert!(TokenSequence::new(vec![5], &cfg).is_err());
    }

    #[test]
    fn ffn_is_position_local() {
        let cfg = config(1, PeScheme::None);
        let params = ModelParams::init(&cfg).unwrap();
        let layer = &params.layers[0];
        let mut rng = SeededRng::new(12);
        let x = gaussian_init(&mut rng, 4, 5, 1.0).unwrap();
        let mut x2 = x.clone();
        x2.set_column(2, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let ffn = |m: &Matrix| {
            let mut z = layer.ffn_w1.matmul(m).unwrap();
            add_bias(&mut z, &layer.ffn_b1);
            let mut o = layer.ffn_w2.matmul(&z.map(|v| v.max(0.0))).unwrap();
            add_bias(&mut o, &layer.ffn_b2);
            o
        };
        let (a, b) = (ffn(&x), ffn(&x2));
        for t in 0..5 {
            let dist = a.column_distance(t, &b, t);
            if t == 2 {
                assert!(dist > 0.0);
            } else {
                assert_eq!(dist, 0.0);
            }
        }
    }

    #[test]
    fn entropy_of_uniform_and_one_hot() {
        let uniform = Matrix::filled(4, 1, 0.25);
        let one_hot = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        let out = ForwardOutput {
            logits: Matrix::zeros(1, 1),
            activations: vec![],
            attention: Some(vec![uniform, one_hot]),
        };
        let s = attention_stats(&out).unwrap();
        assert!((s[0].mean_entropy - 4f64.ln()).abs() < 1e-15);
        assert_eq!(s[1].mean_entropy, 0.0);
    }

    #[test]
    fn stats_require_capture() {
        let cfg = config(1, PeScheme::None);
        let params = ModelParams::init(&cfg).unwrap();
        let seq = TokenSequence::new(vec![0, 1], &cfg).unwrap();
        let out = forward(&params, &cfg, &seq, false).unwrap();
        assert!(matches!(attention_stats(&out), Err(Error::StatsNotCaptured)));
    }

    #[test]
    fn params_shape_check() {
        let cfg = config(2, PeScheme::Sinusoidal);
        let params = ModelParams::init(&cfg).unwrap();
        params.check(&cfg).unwrap();
        assert!(params.check(&config(3, PeScheme::Sinusoidal)).is_err());
        assert!(params.check(&config(2, PeScheme::None)).is_err());
        let expected = 5 * 4 + 8 * 4 + 2 * (3 * 16 + 8 * 4 + 8 + 4 * 8 + 4) + 5 * 4;
        assert_eq!(params.parameter_count(), expected);
    }
}
