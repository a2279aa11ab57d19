//! Unnormalized linear attention in two forms.
//!
//! The fast weight programmer keeps a `d x d` matrix and adds `v_t (x) k_t`
//! every step; the attention form sums `v_tau (k_tau . q_t)` over the prefix.
//! The two are algebraically identical, and [`duality_check`] measures how far
//! apart they land in floating point.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::math::{dot, gaussian_init, outer, Matrix};
use crate::rng::{derive_seed, SeededRng};

/// The fast weight matrix `W_t` and the number of steps folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct FastWeightState {
    w: Matrix,
    t: usize,
}

impl FastWeightState {
    /// `W_0 = 0`.
    pub fn new(d: usize) -> Self {
        Self {
            w: Matrix::zeros(d, d),
            t: 0,
        }
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn steps(&self) -> usize {
        self.t
    }
}

/// `W_t = W_{t-1} + v_t (x) k_t`, then `y_t = W_t q_t`.
pub fn fwp_step(params: &AttentionParams, state: &mut FastWeightState, x_t: &[f64]) -> Result<Vec<f64>> {
    let d = params.dim();
    if x_t.len() != d {
        return Err(Error::LengthMismatch {
            op: "fwp_step",
            expected: d,
            actual: x_t.len(),
        });
    }
    if state.w.rows() != d {
        return Err(Error::ShapeMismatch {
            op: "fwp_step",
            left: params.w_q.shape(),
            right: state.w.shape(),
        });
    }
    let q = params.w_q.matvec(x_t)?;
    let k = params.w_k.matvec(x_t)?;
    let v = params.w_v.matvec(x_t)?;
    state.w.add_assign(&outer(&v, &k)?)?;
    state.t += 1;
    let y = state.w.matvec(&q)?;
    let scale = params.logit_scale();
    Ok(if scale == 1.0 {
        y
    } else {
        y.into_iter().map(|e| e * scale).collect()
    })
}

/// Recurrent form over a whole sequence; returns outputs and the final state.
pub fn fwp_run(params: &AttentionParams, x: &Matrix) -> Result<(Matrix, FastWeightState)> {
    params.check_input("fwp_run", x)?;
    let mut state = FastWeightState::new(params.dim());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.cols() {
        let y = fwp_step(params, &mut state, &x.column(t))?;
        out.set_column(t, &y)?;
    }
    Ok((out, state))
}

/// Attention form: column `t` is `sum_{tau <= t} v_tau (k_tau . q_t)`,
/// accumulated in ascending `tau`.
pub fn linear_attn_form(params: &AttentionParams, x: &Matrix) -> Result<Matrix> {
    params.check_input("linear_attn_form", x)?;
    let q = params.w_q.matmul(x)?;
    let k = params.w_k.matmul(x)?;
    let v = params.w_v.matmul(x)?;
    let (d, t_len) = x.shape();
    let scale = params.logit_scale();
    let mut out = Matrix::zeros(d, t_len);
    for t in 0..t_len {
        let q_t = q.column(t);
        let mut y = vec![0.0; d];
        for tau in 0..=t {
            let w = dot(&k.column(tau), &q_t) * scale;
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += v.get(i, tau) * w;
            }
        }
        out.set_column(t, &y)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub max_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Max elementwise gap between the recurrent and attention forms.
pub fn duality_check(params: &AttentionParams, x: &Matrix, tolerance: f64) -> Result<DualityReport> {
    let (recurrent, _) = fwp_run(params, x)?;
    let attention = linear_attn_form(params, x)?;
    let max_gap = recurrent.max_abs_diff(&attention)?;
    Ok(DualityReport {
        max_gap,
        tolerance,
        pass: max_gap <= tolerance,
    })
}

/// A seeded batch of duality checks over random sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualitySweep {
    pub trials: usize,
    /// Fixed width, or `None` to draw `d` uniformly from `1..=d_max`.
    pub d: Option<usize>,
    pub d_max: usize,
    /// Sequence lengths are drawn from `1..=t_max`.
    pub t_max: usize,
    pub tolerance: f64,
    pub root_seed: u64,
}

impl Default for DualitySweep {
    fn default() -> Self {
        DualitySweep {
            trials: 100,
            d: None,
            d_max: 8,
            t_max: 32,
            tolerance: 1e-10,
            root_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityTrial {
    pub seed: u64,
    pub d: usize,
    pub t: usize,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualitySweepReport {
    pub sweep: DualitySweep,
    pub trials: Vec<DualityTrial>,
    pub max_gap: f64,
    pub pass: bool,
}

/// Trial `k` uses seed `derive_seed(root, "duality") + k`, weights with
/// scale `1/sqrt(d)` and standard normal inputs.
pub fn duality_sweep(sweep: &DualitySweep) -> Result<DualitySweepReport> {
    if sweep.trials == 0 || sweep.d_max == 0 || sweep.t_max == 0 || sweep.d == Some(0) {
        return Err(Error::invalid("duality sweep needs positive trials, d and t_max"));
    }
    if sweep.tolerance.is_nan() || sweep.tolerance < 0.0 {
        return Err(Error::invalid(format!(
            "tolerance must be >= 0, got {}",
            sweep.tolerance
        )));
    }
    let base = derive_seed(sweep.root_seed, "duality");
    let mut trials = Vec::with_capacity(sweep.trials);
    for k in 0..sweep.trials as u64 {
        let seed = base.wrapping_add(k);
        let mut rng = SeededRng::new(seed);
        let d = sweep.d.unwrap_or_else(|| 1 + rng.below(sweep.d_max));
        let t = 1 + rng.below(sweep.t_max);
        let params = AttentionParams::random(&mut rng, d, 1.0 / (d as f64).sqrt())?;
        let x = gaussian_init(&mut rng, d, t, 1.0)?;
        let r = duality_check(&params, &x, sweep.tolerance)?;
        trials.push(DualityTrial {
            seed,
            d,
            t,
            max_gap: r.max_gap,
        });
    }
    let max_gap = trials.iter().map(|t| t.max_gap).fold(0.0, f64::max);
    Ok(DualitySweepReport {
        sweep: *sweep,
        trials,
        max_gap,
        pass: max_gap <= sweep.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gaussian_init;
    use crate::rng::SeededRng;

    fn unit_params() -> AttentionParams {
        let one = Matrix::identity(1);
        AttentionParams::new(one.clone(), one.clone(), one).unwrap()
    }

    #[test]
    fn default_sweep_passes_and_zero_tolerance_fails() {
        let r = duality_sweep(&DualitySweep::default()).unwrap();
        assert!(r.pass, "{}", r.max_gap);
        assert_eq!(r.trials.len(), 100);
        assert!(r
            .trials
            .iter()
            .all(|t| (1..=8).contains(&t.d) && (1..=32).contains(&t.t)));
        let strict = duality_sweep(&DualitySweep {
            tolerance: 0.0,
            ..DualitySweep::default()
        })
        .unwrap();
        assert!(!strict.pass && strict.max_gap > 0.0);
        assert!(duality_sweep(&DualitySweep {
            d: Some(0),
            ..DualitySweep::default()
        })
        .is_err());
    }

    #[test]
    fn scalar_fast_weight_example() {
        let p = unit_params();
        let mut s = FastWeightState::new(1);
        assert_eq!(s.weights().get(0, 0), 0.0);
        assert_eq!(fwp_step(&p, &mut s, &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(s.weights().get(0, 0), 1.0);
        assert_eq!(fwp_step(&p, &mut s, &[2.0]).unwrap(), vec![10.0]);
        assert_eq!(s.weights().get(0, 0), 5.0);
        assert_eq!(s.steps(), 2);
    }

    #[test]
    fn zero_input_leaves_zero_state() {
        let p = unit_params();
        let mut s = FastWeightState::new(1);
        assert_eq!(fwp_step(&p, &mut s, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(s.weights().get(0, 0), 0.0);
    }

    #[test]
    fn attention_form_scalar_example() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = linear_attn_form(&unit_params(), &x).unwrap();
        assert_eq!(y.data(), &[1.0, 10.0]);
    }

    #[test]
    fn attention_form_first_column_is_single_term() {
        let mut rng = SeededRng::new(1);
        let p = AttentionParams::random(&mut rng, 3, 0.7).unwrap();
        let x = gaussian_init(&mut rng, 3, 4, 1.0).unwrap();
        let y = linear_attn_form(&p, &x).unwrap();
        let x1 = x.column(0);
        let (q, k, v) = (
            p.w_q.matvec(&x1).unwrap(),
            p.w_k.matvec(&x1).unwrap(),
            p.w_v.matvec(&x1).unwrap(),
        );
        let w = dot(&k, &q);
        for (i, &vi) in v.iter().enumerate() {
            assert!((y.get(i, 0) - w * vi).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_sequence_gives_zero_output() {
        let mut rng = SeededRng::new(1);
        let p = AttentionParams::random(&mut rng, 3, 0.7).unwrap();
        let y = linear_attn_form(&p, &Matrix::zeros(3, 5)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn duality_scalar_is_exact() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let r = duality_check(&unit_params(), &x, 1e-10).unwrap();
        assert_eq!(r.max_gap, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn duality_random_instance() {
        let mut rng = SeededRng::new(77);
        let p = AttentionParams::random(&mut rng, 8, 1.0 / 8f64.sqrt()).unwrap();
        let x = gaussian_init(&mut rng, 8, 16, 1.0).unwrap();
        let r = duality_check(&p, &x, 1e-10).unwrap();
        assert!(r.pass, "gap {}", r.max_gap);
        // zero tolerance may fail on rounding; the gap is reported either way
        let strict = duality_check(&p, &x, 0.0).unwrap();
        assert_eq!(strict.max_gap, r.max_gap);
        assert_eq!(strict.pass, r.max_gap == 0.0);
    }

    #[test]
    fn state_is_bilinear_in_input_scale() {
        let mut rng = SeededRng::new(5);
        let p = AttentionParams::random(&mut rng, 4, 0.5).unwrap();
        let x = gaussian_init(&mut rng, 4, 7, 1.0).unwrap();
        let (_, s1) = fwp_run(&p, &x).unwrap();
        let (_, s2) = fwp_run(&p, &x.scale(2.0)).unwrap();
        let expected = s1.weights().scale(4.0);
        assert!(s2.weights().max_abs_diff(&expected).unwrap() <= 1e-10);

        let one = unit_params();
        let (_, a) = fwp_run(&one, &Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let (_, b) = fwp_run(&one, &Matrix::from_rows(&[[2.0, 4.0, 6.0]]).unwrap()).unwrap();
        assert_eq!(b.weights().get(0, 0), 4.0 * a.weights().get(0, 0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = unit_params();
        let mut s = FastWeightState::new(1);
        assert!(fwp_step(&p, &mut s, &[1.0, 1.0]).is_err());
        assert!(linear_attn_form(&p, &Matrix::zeros(2, 2)).is_err());
    }
}
