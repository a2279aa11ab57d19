//! Central finite differences against the analytic gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::SeededRng;
use crate::train::backprop::{loss, loss_and_grads};
use crate::train::task::Example;

pub const MIN_COORDINATES: usize = 200;
const DENOM_FLOOR: f64 = 1e-8;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    Ok(())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Max relative error of `grad` against central differences of `f` at `x`,
/// over every coordinate.
pub fn check_gradient<F: Fn(&[f64]) -> f64>(f: F, grad: &[f64], x: &[f64], epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if grad.len() != x.len() {
        return Err(Error::LengthMismatch {
            op: "check_gradient",
            expected: x.len(),
            actual: grad.len(),
        });
    }
    let mut p = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        p[i] = x[i] + epsilon;
        let up = f(&p);
        p[i] = x[i] - epsilon;
        let down = f(&p);
        p[i] = x[i];
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * epsilon)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_tensor: BTreeMap<String, f64>,
}

/// Samples at least `n_coords` trainable coordinates (floored at 200),
/// spread over every trainable tensor, and compares analytic gradients with
/// central differences of the batch loss.
pub fn finite_diff_report(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[Example],
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let (_, grads) = loss_and_grads(params, config, batch)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, m)| m.data().len()).collect();
    let trainable: Vec<usize> = (0..names.len()).filter(|&i| params.is_trainable(config, i)).collect();
    let total: usize = trainable.iter().map(|&i| sizes[i]).sum();
    let want = n_coords.max(MIN_COORDINATES).min(total);

    // every tensor gets a share proportional to its size, at least one
    let mut rng = SeededRng::new(seed);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for &i in &trainable {
        let share = ((want as f64 * sizes[i] as f64 / total as f64).ceil() as usize).clamp(1, sizes[i]);
        let mut idx = rng.permutation(sizes[i]);
        idx.truncate(share);
        idx.sort_unstable();
        picks.extend(idx.into_iter().map(|j| (i, j)));
    }

    let grad_tensors: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, m)| m.data().to_vec()).collect();
    let mut probe = params.clone();
    let mut per_tensor: BTreeMap<String, f64> = BTreeMap::new();
    let mut worst = 0.0f64;
    for &(t, j) in &picks {
        let orig = probe.tensors()[t].1.data()[j];
        probe.tensors_mut()[t].data_mut()[j] = orig + epsilon;
        let up = loss(&probe, config, batch)?;
        probe.tensors_mut()[t].data_mut()[j] = orig - epsilon;
        let down = loss(&probe, config, batch)?;
        probe.tensors_mut()[t].data_mut()[j] = orig;
        let err = relative_error(grad_tensors[t][j], (up - down) / (2.0 * epsilon));
        let e = per_tensor.entry(names[t].clone()).or_insert(0.0);
        *e = e.max(err);
        worst = worst.max(err);
    }
    Ok(GradCheckReport {
        epsilon,
        coordinates: picks.len(),
        max_relative_error: worst,
        per_tensor,
    })
}

/// Max relative error over a sample of at least 200 coordinates.
pub fn finite_diff_check(params: &ModelParams, config: &ModelConfig, batch: &[Example], epsilon: f64) -> Result<f64> {
    Ok(finite_diff_report(params, config, batch, epsilon, MIN_COORDINATES, config.seed)?.max_relative_error)
}
