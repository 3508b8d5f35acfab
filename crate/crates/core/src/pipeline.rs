//! Selecting a member of the stacking family on the middle backtest window,
//! refitting it, and scoring it on the last window next to the simple
//! baselines.

use std::path::Path;

use ndarray::{Array3, ArrayView4, Axis, Zip};
use rayon::prelude::*;

use crate::data::{write_predictions, BacktestProblem, QuantileSpec, WindowData};
use crate::error::{Error, Result};
use crate::format::write_csv_atomic;
use crate::loss::{mean_wql, write_loss_reports, LossReport};
use crate::objective::{combine, write_weights, Alpha, Weights};
use crate::optimize::{
    evaluate_alpha, fit_weights, search_alpha, write_search_report, AlphaSearch, AlphaSearchSpec,
    FitOptions, FitResult,
};

pub const OURS: &str = "Ours";
pub const UNREGULARIZED: &str = "Unregularized";
pub const MEAN: &str = "Mean";
pub const MEDIAN: &str = "Median";
pub const GLOBAL_BEST: &str = "GlobalBest";
pub const BEST_SINGLE: &str = "BestSingle";

/// Largest learner count for which every subset is enumerated.
pub const MAX_SUBSET_LEARNERS: usize = 20;

/// Which baselines to compute next to the selected ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Baselines {
    pub unregularized: bool,
    pub mean: bool,
    pub median: bool,
    pub global_best: bool,
    pub best_single: bool,
}

impl Default for Baselines {
    fn default() -> Self {
        Self {
            unregularized: true,
            mean: true,
            median: true,
            global_best: true,
            best_single: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineConfig {
    pub search: AlphaSearchSpec,
    pub fit: FitOptions,
    pub baselines: Baselines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Learner,
    Ensemble,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Learner => "learner",
            Role::Ensemble => "ensemble",
        }
    }
}

/// One row of the comparison table: a base learner or a combination
/// strategy, with its loss on window 1 and its report on window 2.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    pub name: String,
    pub role: Role,
    pub val_wql: f64,
    pub test: LossReport,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub alpha_hat: Alpha,
    pub search: AlphaSearch,
    /// Refit of the selected member on window 1; its weights are `w*`.
    pub fit: FitResult,
    /// `combine(w*, window-2 cubes)`, `N × h × q`.
    pub predictions: Array3<f64>,
    /// Base learners first, in input order, then the strategies.
    pub rows: Vec<StrategyRow>,
    pub unregularized_weights: Option<Weights>,
    pub global_best_subset: Option<Vec<usize>>,
    pub best_single: Option<usize>,
}

impl PipelineResult {
    pub fn w_star(&self) -> &Weights {
        &self.fit.weights
    }

    pub fn row(&self, name: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn test_wql(&self, name: &str) -> Option<f64> {
        self.row(name).map(|r| r.test.mean_wql)
    }
}

/// Element-wise aggregation across learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    Mean,
    Median,
}

/// Collapses the learner axis of an `m × N × h × q` tensor.
pub fn aggregate(kind: Aggregate, predictions: ArrayView4<f64>) -> Array3<f64> {
    match kind {
        Aggregate::Mean => {
            let (m, n, h, q) = predictions.dim();
            let mut out = Array3::zeros((n, h, q));
            for l in 0..m {
                out += &predictions.index_axis(Axis(0), l);
            }
            out / m as f64
        }
        Aggregate::Median => {
            let (m, n, h, q) = predictions.dim();
            let mut out = Array3::zeros((n, h, q));
            let mut buf = vec![0.0; m];
            Zip::indexed(&mut out).for_each(|(i, j, k), v| {
                for (l, slot) in buf.iter_mut().enumerate() {
                    *slot = predictions[[l, i, j, k]];
                }
                buf.sort_by(f64::total_cmp);
                *v = if m % 2 == 1 {
                    buf[m / 2]
                } else {
                    0.5 * (buf[m / 2 - 1] + buf[m / 2])
                };
            });
            out
        }
    }
}

/// Mean or median of all learners on `window`, scored against its actuals.
pub fn baseline(
    kind: Aggregate,
    window: &WindowData,
    window_index: usize,
    quantiles: &QuantileSpec,
) -> Result<LossReport> {
    let name = match kind {
        Aggregate::Mean => MEAN,
        Aggregate::Median => MEDIAN,
    };
    let combined = aggregate(kind, window.predictions.view());
    LossReport::compute(name, window_index, combined.view(), window.actuals.view(), quantiles)
}

/// A learner subset picked on window 1 and its simple-mean report on window 2.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetChoice {
    /// Learner indices, increasing.
    pub learners: Vec<usize>,
    pub val_wql: f64,
    pub report: LossReport,
}

fn subset_mean(window: &WindowData, learners: &[usize]) -> Array3<f64> {
    aggregate(Aggregate::Mean, window.predictions.select(Axis(0), learners).view())
}

fn mask_members(mask: u32, m: usize) -> Vec<usize> {
    (0..m).filter(|&l| mask & (1 << l) != 0).collect()
}

fn check_pair(val: &WindowData, test: &WindowData) -> Result<()> {
    if val.n_learners() != test.n_learners() {
        return Err(Error::DimensionMismatch(format!(
            "{} learners on the validation window but {} on the test window",
            val.n_learners(),
            test.n_learners()
        )));
    }
    Ok(())
}

/// Exhaustive search over non-empty learner subsets for the simple mean with
/// the lowest window-1 loss. Ties go to the smaller subset, then to the
/// lexicographically smaller index list.
pub fn baseline_global_best(
    val: &WindowData,
    test: &WindowData,
    test_index: usize,
    quantiles: &QuantileSpec,
) -> Result<SubsetChoice> {
    check_pair(val, test)?;
    let m = val.n_learners();
    if m > MAX_SUBSET_LEARNERS {
        return Err(Error::TooManyLearners(m));
    }
    let scored: Vec<(Vec<usize>, f64)> = (1u32..(1u32 << m))
        .into_par_iter()
        .map(|mask| {
            let members = mask_members(mask, m);
            let combined = subset_mean(val, &members);
            mean_wql(combined.view(), val.actuals.view(), quantiles).map(|loss| (members, loss))
        })
        .collect::<Result<_>>()?;
    let (learners, val_wql) = scored
        .into_iter()
        .min_by(|(a, la), (b, lb)| {
            la.total_cmp(lb)
                .then_with(|| a.len().cmp(&b.len()))
                .then_with(|| a.cmp(b))
        })
        .expect("at least one subset");
    let combined = subset_mean(test, &learners);
    let report = LossReport::compute(GLOBAL_BEST, test_index, combined.view(), test.actuals.view(), quantiles)?;
    Ok(SubsetChoice {
        learners,
        val_wql,
        report,
    })
}

/// The learner with the lowest window-1 loss (ties to the lowest index),
/// reported on window 2.
pub fn baseline_best_single(
    val: &WindowData,
    test: &WindowData,
    test_index: usize,
    quantiles: &QuantileSpec,
) -> Result<SubsetChoice> {
    check_pair(val, test)?;
    let mut best: Option<(usize, f64)> = None;
    for l in 0..val.n_learners() {
        let loss = mean_wql(
            val.predictions.index_axis(Axis(0), l),
            val.actuals.view(),
            quantiles,
        )?;
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((l, loss));
        }
    }
    let (learner, val_wql) = best.expect("at least one learner");
    let report = LossReport::compute(
        BEST_SINGLE,
        test_index,
        test.predictions.index_axis(Axis(0), learner),
        test.actuals.view(),
        quantiles,
    )?;
    Ok(SubsetChoice {
        learners: vec![learner],
        val_wql,
        report,
    })
}

/// Chooses `alpha` by fitting on window 0 and scoring on window 1, refits
/// the chosen member on window 1, and combines the window-2 cubes with the
/// refit weights. Baselines are scored on the same windows.
pub fn run_algorithm1(problem: &BacktestProblem, config: &PipelineConfig) -> Result<PipelineResult> {
    let quantiles = &problem.quantiles;
    let [w0, w1, w2] = &problem.windows;
    for (n, w) in problem.windows.iter().enumerate() {
        if w.n_learners() != problem.n_learners() {
            return Err(Error::DimensionMismatch(format!(
                "window {n} has {} learners, expected {}",
                w.n_learners(),
                problem.n_learners()
            )));
        }
    }

    let search = search_alpha(&config.search, w0, w1, quantiles, &config.fit)?;
    let alpha_hat = search.best;
    let fit = fit_weights(w1, quantiles, alpha_hat, &config.fit)?;
    let predictions = combine(&fit.weights, w2.predictions.view())?;

    let mut rows = Vec::new();
    for (l, name) in problem.learners.iter().enumerate() {
        let val_wql = mean_wql(w1.predictions.index_axis(Axis(0), l), w1.actuals.view(), quantiles)?;
        let test = LossReport::compute(
            name.as_str(),
            2,
            w2.predictions.index_axis(Axis(0), l),
            w2.actuals.view(),
            quantiles,
        )?;
        rows.push(StrategyRow {
            name: name.clone(),
            role: Role::Learner,
            val_wql,
            test,
        });
    }
    rows.push(StrategyRow {
        name: OURS.into(),
        role: Role::Ensemble,
        val_wql: search.best_loss,
        test: LossReport::compute(OURS, 2, predictions.view(), w2.actuals.view(), quantiles)?,
    });

    let mut unregularized_weights = None;
    if config.baselines.unregularized {
        let zero = Alpha::zero();
        let val_wql = match search.evaluations.iter().find(|e| e.alpha == zero) {
            Some(e) => e.val_wql,
            None => evaluate_alpha(zero, w0, w1, quantiles, &config.fit)?,
        };
        let refit = fit_weights(w1, quantiles, zero, &config.fit)?;
        let combined = combine(&refit.weights, w2.predictions.view())?;
        rows.push(StrategyRow {
            name: UNREGULARIZED.into(),
            role: Role::Ensemble,
            val_wql,
            test: LossReport::compute(UNREGULARIZED, 2, combined.view(), w2.actuals.view(), quantiles)?,
        });
        unregularized_weights = Some(refit.weights);
    }
    for (enabled, kind) in [
        (config.baselines.mean, Aggregate::Mean),
        (config.baselines.median, Aggregate::Median),
    ] {
        if enabled {
            let val = baseline(kind, w1, 1, quantiles)?;
            let test = baseline(kind, w2, 2, quantiles)?;
            rows.push(StrategyRow {
                name: test.strategy.clone(),
                role: Role::Ensemble,
                val_wql: val.mean_wql,
                test,
            });
        }
    }
    let mut global_best_subset = None;
    if config.baselines.global_best {
        let choice = baseline_global_best(w1, w2, 2, quantiles)?;
        rows.push(StrategyRow {
            name: GLOBAL_BEST.into(),
            role: Role::Ensemble,
            val_wql: choice.val_wql,
            test: choice.report,
        });
        global_best_subset = Some(choice.learners);
    }
    let mut best_single = None;
    if config.baselines.best_single {
        let choice = baseline_best_single(w1, w2, 2, quantiles)?;
        rows.push(StrategyRow {
            name: BEST_SINGLE.into(),
            role: Role::Ensemble,
            val_wql: choice.val_wql,
            test: choice.report,
        });
        best_single = Some(choice.learners[0]);
    }

    Ok(PipelineResult {
        alpha_hat,
        search,
        fit,
        predictions,
        rows,
        unregularized_weights,
        global_best_subset,
        best_single,
    })
}

/// Writes `strategy,role,val_wql,test_wql`, one row per learner and strategy.
pub fn write_comparison(path: &Path, rows: &[StrategyRow]) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record(["strategy", "role", "val_wql", "test_wql"])?;
        for r in rows {
            w.write_record([
                r.name.as_str(),
                r.role.as_str(),
                &r.val_wql.to_string(),
                &r.test.mean_wql.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// File names written by [`write_artifacts`].
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SEARCH_FILE: &str = "alpha_search.csv";

/// Writes weights, predictions, the comparison table, per-quantile losses
/// and the alpha search report into `dir`.
pub fn write_artifacts(dir: &Path, problem: &BacktestProblem, result: &PipelineResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_weights(
        &dir.join(WEIGHTS_FILE),
        result.w_star(),
        &problem.learners,
        &problem.items,
        &problem.quantiles,
    )?;
    write_predictions(
        &dir.join(PREDICTIONS_FILE),
        &result.predictions,
        &problem.items,
        &problem.quantiles,
    )?;
    write_comparison(&dir.join(COMPARISON_FILE), &result.rows)?;
    let reports: Vec<LossReport> = result.rows.iter().map(|r| r.test.clone()).collect();
    write_loss_reports(&dir.join(LOSSES_FILE), &reports, &problem.quantiles)?;
    write_search_report(&dir.join(SEARCH_FILE), &result.search)
}
