//! Training losses: MSE, MAE and the channel-wise perceptual (CP) loss.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{decompose_backward, decompose_traced, FilterParams};
use crate::ops::{mae, mae_grad};
use crate::series::ChannelSeries;

/// A scalar loss together with its gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// `∂L/∂prediction`, same shape as the prediction.
    pub grad_pred: ChannelSeries,
    /// `∂L/∂θ`, only produced by the CP loss.
    pub grad_filter: Option<Array2<f64>>,
}

/// `mean((pred − target)²)` over all `C·N` entries.
pub fn mse_loss(pred: &ChannelSeries, target: &ChannelSeries) -> Result<LossOutput> {
    pred.check_same_shape(target, "mse")?;
    let n = (pred.channels() * pred.len()) as f64;
    let diff = pred.sub(target)?;
    let value = diff.dot(&diff) / n;
    Ok(LossOutput {
        value,
        grad_pred: diff.scale(2.0 / n),
        grad_filter: None,
    })
}

/// `mean(|pred − target|)`, with the `sign(0) = 0` subgradient.
pub fn mae_loss(pred: &ChannelSeries, target: &ChannelSeries) -> Result<LossOutput> {
    Ok(LossOutput {
        value: mae(pred, target)?,
        grad_pred: mae_grad(pred, target)?,
        grad_filter: None,
    })
}

/// Options for [`cp_loss_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CpOptions {
    /// Drop the kernel gradient that flows through the target's decomposition.
    pub detach_target: bool,
}

/// CP loss: decompose prediction and target with the same kernels and sum the
/// MAE of every pair of components (all `K` details plus the final
/// approximation, unweighted). Each component's MAE is normalized by its own
/// length.
pub fn cp_loss(
    pred: &ChannelSeries,
    target: &ChannelSeries,
    params: &FilterParams,
    scales: usize,
) -> Result<LossOutput> {
    cp_loss_with(pred, target, params, scales, CpOptions::default())
}

pub fn cp_loss_with(
    pred: &ChannelSeries,
    target: &ChannelSeries,
    params: &FilterParams,
    scales: usize,
    opts: CpOptions,
) -> Result<LossOutput> {
    pred.check_same_shape(target, "cp loss")?;
    let (pred_parts, pred_trace) = decompose_traced(pred, params, scales)?;
    let (target_parts, target_trace) = decompose_traced(target, params, scales)?;

    let mut value = 0.0;
    let mut grads = Vec::with_capacity(scales + 1);
    for (p, t) in pred_parts.components().zip(target_parts.components()) {
        value += mae(p, t)?;
        grads.push(mae_grad(p, t)?);
    }

    let (grad_pred, mut grad_filter) = decompose_backward(&grads, params, &pred_trace)?;
    if !opts.detach_target {
        // ∂|p − t|/∂t = −∂|p − t|/∂p
        let target_grads: Vec<_> = grads.iter().map(|g| g.scale(-1.0)).collect();
        let (_, gk) = decompose_backward(&target_grads, params, &target_trace)?;
        grad_filter += &gk;
    }
    Ok(LossOutput {
        value,
        grad_pred,
        grad_filter: Some(grad_filter),
    })
}

/// Which loss a model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Mae,
    Cp,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Cp => "cp",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "cp" | "cp_loss" | "cploss" => Ok(LossKind::Cp),
            other => Err(Error::Config(format!("unknown loss {other:?} (expected mse, mae or cp)"))),
        }
    }
}
