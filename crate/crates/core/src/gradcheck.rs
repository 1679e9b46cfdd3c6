//! Central finite-difference checks for the analytic gradients in [`crate::model`].
//!
//! Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`. The floor keeps
//! exactly-zero analytic gradients (e.g. the temperature bias, whose effect
//! batch norm cancels) from being judged against pure round-off in `n`.

use crate::error::Result;
use crate::model::{backward, forward, input_gradient, loss_ce, ModelParams, Mode};
use crate::numerics::Matrix;

pub const STEP: f64 = 1e-6;
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GroupError {
    pub group: String,
    pub max_relative_error: f64,
}

fn train_loss(params: &ModelParams, batch: &Matrix, labels: &[usize]) -> Result<f64> {
    loss_ce(&forward(params, batch, Mode::Train)?, labels)
}

/// Worst relative error per trainable group.
pub fn check_parameters(params: &ModelParams, batch: &Matrix, labels: &[usize]) -> Result<Vec<GroupError>> {
    let trace = forward(params, batch, Mode::Train)?;
    let grads = backward(params, &trace, batch, labels)?;
    let mut out = Vec::new();
    for (gi, (name, analytic)) in grads.groups().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.groups_mut()[gi].1[k] += STEP;
            let mut minus = params.clone();
            minus.groups_mut()[gi].1[k] -= STEP;
            let num = (train_loss(&plus, batch, labels)? - train_loss(&minus, batch, labels)?) / (2.0 * STEP);
            worst = worst.max(relative_error(a, num));
        }
        out.push(GroupError {
            group: name,
            max_relative_error: worst,
        });
    }
    Ok(out)
}

/// Worst relative error of [`input_gradient`] for the predicted class of `x`.
pub fn check_input(params: &ModelParams, x: &[f64]) -> Result<f64> {
    let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec());
    let y = forward(params, &row(x)?, Mode::Eval)?.predictions()[0];
    let analytic = input_gradient(params, x, Some(y))?;
    let loss = |v: &[f64]| -> Result<f64> {
        let t = forward(params, &row(v)?, Mode::Eval)?;
        Ok(-t.probs.get(0, y).max(1e-300).ln())
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut a = x.to_vec();
        a[k] += STEP;
        let mut b = x.to_vec();
        b[k] -= STEP;
        let num = (loss(&a)? - loss(&b)?) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[k], num));
    }
    Ok(worst)
}
