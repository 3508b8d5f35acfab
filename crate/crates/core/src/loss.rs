//! Pinball loss and the mean weighted quantile loss used both to fit and to
//! score ensembles.

use std::path::Path;

use ndarray::{ArrayView2, ArrayView3};

use crate::data::QuantileSpec;
use crate::error::{Error, Result};
use crate::format::{tau_label, write_csv_atomic};

/// `max{τ(z − ẑ), (1 − τ)(ẑ − z)}`.
#[inline]
pub fn pinball(z: f64, zhat: f64, tau: f64) -> f64 {
    let diff = z - zhat;
    (tau * diff).max((tau - 1.0) * diff)
}

/// Slope of the pinball loss in `ẑ`; ties take the `−τ` branch.
#[inline]
pub fn pinball_slope(z: f64, zhat: f64, tau: f64) -> f64 {
    if zhat > z {
        1.0 - tau
    } else {
        -tau
    }
}

fn check_shapes(pred: &ArrayView3<f64>, actuals: &ArrayView2<f64>, quantiles: &QuantileSpec) -> Result<()> {
    let (n, h, q) = pred.dim();
    if actuals.dim() != (n, h) || q != quantiles.len() {
        return Err(Error::DimensionMismatch(format!(
            "predictions {:?} against actuals {:?} with {} quantiles",
            pred.dim(),
            actuals.dim(),
            quantiles.len()
        )));
    }
    Ok(())
}

/// `Σ_{i,j} |z_{i,j}|`, rejecting an all-zero window.
pub fn abs_denominator(actuals: &ArrayView2<f64>) -> Result<f64> {
    let denom: f64 = actuals.iter().map(|z| z.abs()).sum();
    if denom > 0.0 {
        Ok(denom)
    } else {
        Err(Error::ZeroDenominator)
    }
}

/// Per-quantile terms `2 Σ_{i,j} pinball / Σ|z|`; their mean is the mean
/// weighted quantile loss.
pub fn quantile_losses(
    pred: ArrayView3<f64>,
    actuals: ArrayView2<f64>,
    quantiles: &QuantileSpec,
) -> Result<Vec<f64>> {
    check_shapes(&pred, &actuals, quantiles)?;
    let denom = abs_denominator(&actuals)?;
    let (n, h, _) = pred.dim();
    let out = quantiles
        .taus()
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..h {
                    total += pinball(actuals[[i, j]], pred[[i, j, k]], tau);
                }
            }
            2.0 * total / denom
        })
        .collect();
    Ok(out)
}

/// `(2/q) Σ_{i,j,k} pinball(z_{i,j}, ẑ_{i,j,k}, τ_k) / Σ_{i,j} |z_{i,j}|`.
pub fn mean_wql(
    pred: ArrayView3<f64>,
    actuals: ArrayView2<f64>,
    quantiles: &QuantileSpec,
) -> Result<f64> {
    check_shapes(&pred, &actuals, quantiles)?;
    let denom = abs_denominator(&actuals)?;
    let mut total = 0.0;
    for ((i, j, k), &zhat) in pred.indexed_iter() {
        total += pinball(actuals[[i, j]], zhat, quantiles.taus()[k]);
    }
    Ok(2.0 / quantiles.len() as f64 * total / denom)
}

/// Loss of one strategy on one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub strategy: String,
    pub window: usize,
    pub mean_wql: f64,
    pub per_quantile: Vec<f64>,
}

impl LossReport {
    pub fn compute(
        strategy: impl Into<String>,
        window: usize,
        pred: ArrayView3<f64>,
        actuals: ArrayView2<f64>,
        quantiles: &QuantileSpec,
    ) -> Result<Self> {
        Ok(Self {
            strategy: strategy.into(),
            window,
            mean_wql: mean_wql(pred, actuals, quantiles)?,
            per_quantile: quantile_losses(pred, actuals, quantiles)?,
        })
    }
}

/// Writes `strategy,window,tau,loss` rows, closing each report with a
/// `strategy,window,all,<mean_wql>` summary row.
pub fn write_loss_reports(path: &Path, reports: &[LossReport], quantiles: &QuantileSpec) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record(["strategy", "window", "tau", "loss"])?;
        for r in reports {
            let window = r.window.to_string();
            for (tau, loss) in quantiles.taus().iter().zip(&r.per_quantile) {
                w.write_record([r.strategy.as_str(), &window, &tau_label(*tau), &loss.to_string()])?;
            }
            w.write_record([r.strategy.as_str(), &window, "all", &r.mean_wql.to_string()])?;
        }
        Ok(())
    })
}
