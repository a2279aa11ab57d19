//! Reverse-mode gradients of the final-position cross-entropy, written out
//! by hand for every layer of the model.

use crate::attention::{AttentionKind, AttentionParams, AttentionTrace};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{trace, LayerParams, ModelConfig, ModelParams, NormCache, TokenSequence, Trace};
use crate::train::task::Example;

/// Log-softmax cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

fn rowsum_into(m: &Matrix, bias: &mut Matrix) {
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        bias.add_at(i, 0, s);
    }
}

fn norm_backward(dy: &Matrix, cache: &NormCache) -> Matrix {
    let (d, t) = dy.shape();
    let mut dx = Matrix::zeros(d, t);
    for j in 0..t {
        let mut mean_dy = 0.0;
        let mut mean_dy_xhat = 0.0;
        for i in 0..d {
            mean_dy += dy.get(i, j);
            mean_dy_xhat += dy.get(i, j) * cache.xhat.get(i, j);
        }
        mean_dy /= d as f64;
        mean_dy_xhat /= d as f64;
        for i in 0..d {
            let v = cache.inv_std[j] * (dy.get(i, j) - mean_dy - cache.xhat.get(i, j) * mean_dy_xhat);
            dx.set(i, j, v);
        }
    }
    dx
}

fn attention_backward(
    params: &AttentionParams,
    tr: &AttentionTrace,
    x: &Matrix,
    dy: &Matrix,
    kind: AttentionKind,
    grads: &mut AttentionParams,
) -> Result<Matrix> {
    let a = &tr.weights;
    let t = a.cols();
    let dv = dy.matmul_t(a)?;
    let da = tr.v.t_matmul(dy)?;
    let mut ds = Matrix::zeros(t, t);
    match kind {
        AttentionKind::Softmax => {
            for j in 0..t {
                let s: f64 = (0..t).map(|i| a.get(i, j) * da.get(i, j)).sum();
                for i in 0..t {
                    ds.set(i, j, a.get(i, j) * (da.get(i, j) - s));
                }
            }
        }
        AttentionKind::Linear => {
            // causal: key i visible to query j iff i <= j
            for j in 0..t {
                for i in 0..=j {
                    ds.set(i, j, da.get(i, j));
                }
            }
        }
    }
    let scale = params.logit_scale();
    if scale != 1.0 {
        ds = ds.scale(scale);
    }
    let dk = tr.q.matmul_t(&ds)?;
    let dq = tr.k.matmul(&ds)?;
    grads.w_q.add_assign(&dq.matmul_t(x)?)?;
    grads.w_k.add_assign(&dk.matmul_t(x)?)?;
    grads.w_v.add_assign(&dv.matmul_t(x)?)?;
    let mut dx = params.w_q.t_matmul(&dq)?;
    dx.add_assign(&params.w_k.t_matmul(&dk)?)?;
    dx.add_assign(&params.w_v.t_matmul(&dv)?)?;
    Ok(dx)
}

fn layer_backward(
    lp: &LayerParams,
    lt: &crate::model::LayerTrace,
    config: &ModelConfig,
    d_out: Matrix,
    g: &mut LayerParams,
) -> Result<Matrix> {
    g.ffn_w2.add_assign(&d_out.matmul_t(&lt.hidden)?)?;
    rowsum_into(&d_out, &mut g.ffn_b2);
    let mut d_pre = lp.ffn_w2.t_matmul(&d_out)?;
    for (dz, &z) in d_pre.data_mut().iter_mut().zip(lt.pre_act.data()) {
        if z <= 0.0 {
            *dz = 0.0;
        }
    }
    g.ffn_w1.add_assign(&d_pre.matmul_t(&lt.ffn_in)?)?;
    rowsum_into(&d_pre, &mut g.ffn_b1);
    let d_ffn_in = lp.ffn_w1.t_matmul(&d_pre)?;
    let mut d_mid = match &lt.norm2 {
        Some(c) => norm_backward(&d_ffn_in, c),
        None => d_ffn_in,
    };
    if config.use_residual {
        d_mid.add_assign(&d_out)?;
    }
    let d_attn_in = attention_backward(
        &lp.attn,
        &lt.attn,
        &lt.attn_in,
        &d_mid,
        config.attention_kind,
        &mut g.attn,
    )?;
    let mut d_in = match &lt.norm1 {
        Some(c) => norm_backward(&d_attn_in, c),
        None => d_attn_in,
    };
    if config.use_residual {
        d_in.add_assign(&d_mid)?;
    }
    Ok(d_in)
}

/// Accumulates `d loss / d params` for one traced example into `grads`,
/// given the gradient of the final-position logits.
pub(crate) fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    tr: &Trace,
    d_logits: &[f64],
    grads: &mut ModelParams,
) -> Result<()> {
    let top = tr.top();
    let (d, t) = top.shape();
    let last = t - 1;
    let top_last = top.column(last);
    for (v, &g) in d_logits.iter().enumerate() {
        for (h, &x) in grads.head.row_mut(v).iter_mut().zip(&top_last) {
            *h += g * x;
        }
    }
    let mut dh = Matrix::zeros(d, t);
    for (v, &g) in d_logits.iter().enumerate() {
        for (i, &w) in params.head.row(v).iter().enumerate() {
            dh.add_at(i, last, g * w);
        }
    }
    for l in (0..params.layers.len()).rev() {
        dh = layer_backward(&params.layers[l], &tr.layers[l], config, dh, &mut grads.layers[l])?;
    }
    for (pos, &tok) in tr.tokens.iter().enumerate() {
        let col = dh.column(pos);
        for (e, g) in grads.embedding.row_mut(tok).iter_mut().zip(&col) {
            *e += g;
        }
        if let Some(pe) = grads.pe_table.as_mut() {
            for (p, g) in pe.row_mut(pos).iter_mut().zip(&col) {
                *p += g;
            }
        }
    }
    Ok(())
}

/// Forward trace of one example. The sequence is validated first, so a
/// failing forward pass can only mean overflow and is reported as such.
pub(crate) fn example_trace(params: &ModelParams, config: &ModelConfig, ex: &Example, index: usize) -> Result<Trace> {
    let seq = TokenSequence::new(ex.tokens.clone(), config)?;
    trace(params, config, &seq).map_err(|_| Error::NonFiniteLoss { index })
}

/// Mean final-position cross-entropy over `batch`.
pub fn loss(params: &ModelParams, config: &ModelConfig, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must not be empty"));
    }
    let mut total = 0.0;
    for (index, ex) in batch.iter().enumerate() {
        let tr = example_trace(params, config, ex, index)?;
        let (l, _) = cross_entropy(&tr.logits.column(tr.logits.cols() - 1), ex.target);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}

/// Mean final-position cross-entropy and its gradient for every parameter.
/// Examples are reduced in batch order.
pub fn loss_and_grads(params: &ModelParams, config: &ModelConfig, batch: &[Example]) -> Result<(f64, ModelParams)> {
    let (l, g, _) = loss_grads_logits(params, config, batch)?;
    Ok((l, g))
}

/// As [`loss_and_grads`], also returning each example's final-position logits.
pub(crate) fn loss_grads_logits(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[Example],
) -> Result<(f64, ModelParams, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must not be empty"));
    }
    let n = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let mut all_logits = Vec::with_capacity(batch.len());
    for (index, ex) in batch.iter().enumerate() {
        if ex.target >= config.vocab_size {
            return Err(Error::invalid(format!("target {} out of vocabulary", ex.target)));
        }
        let tr = example_trace(params, config, ex, index)?;
        let logits = tr.logits.column(tr.logits.cols() - 1);
        let (l, mut g) = cross_entropy(&logits, ex.target);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total += l;
        g.iter_mut().for_each(|v| *v /= n);
        backward(params, config, &tr, &g, &mut grads)?;
        all_logits.push(logits);
    }
    Ok((total / n, grads, all_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PeScheme;

    fn small_config(pe: PeScheme) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 4,
            d_ff: 6,
            vocab_size: 5,
            max_len: 8,
            pe_scheme: pe,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (l, g) = cross_entropy(&[0.0; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_log_vocab() {
        let cfg = small_config(PeScheme::None);
        let mut params = ModelParams::init(&cfg).unwrap();
        params.head.fill(0.0);
        let batch = vec![Example {
            tokens: vec![0, 1, 2],
            target: 1,
            pair: 0,
        }];
        let (l, _) = loss_and_grads(&params, &cfg, &batch).unwrap();
        assert_eq!(l, 5f64.ln());
    }

    #[test]
    fn unused_pe_rows_get_zero_gradient() {
        let cfg = small_config(PeScheme::LearnedAbsolute);
        let params = ModelParams::init(&cfg).unwrap();
        let batch = vec![Example {
            tokens: vec![0, 3, 2],
            target: 1,
            pair: 0,
        }];
        let (_, g) = loss_and_grads(&params, &cfg, &batch).unwrap();
        let pe = g.pe_table.unwrap();
        for p in 3..8 {
            assert!(pe.row(p).iter().all(|&v| v == 0.0));
        }
        assert!(pe.row(0).iter().any(|&v| v != 0.0));
        // tokens never fed get no embedding gradient either
        assert!(g.embedding.row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_shapes_match_params() {
        let cfg = small_config(PeScheme::Sinusoidal);
        let params = ModelParams::init(&cfg).unwrap();
        let batch = vec![Example {
            tokens: vec![0, 3],
            target: 0,
            pair: 0,
        }];
        let (_, g) = loss_and_grads(&params, &cfg, &batch).unwrap();
        g.check(&cfg).unwrap();
    }

    #[test]
    fn non_finite_loss_reports_index() {
        let cfg = small_config(PeScheme::None);
        let mut params = ModelParams::init(&cfg).unwrap();
        params.head.set(0, 0, f64::NAN);
        let ex = Example {
            tokens: vec![0, 1],
            target: 0,
            pair: 0,
        };
        let batch = vec![ex.clone(), ex];
        assert!(matches!(
            loss_and_grads(&params, &cfg, &batch),
            Err(Error::NonFiniteLoss { index: 0 })
        ));
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = small_config(PeScheme::None);
        let params = ModelParams::init(&cfg).unwrap();
        assert!(loss_and_grads(&params, &cfg, &[]).is_err());
    }
}
