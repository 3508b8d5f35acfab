//! Fitting ensemble weights for a fixed `alpha` and choosing `alpha` on a
//! validation window.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{QuantileSpec, WindowData};
use crate::error::{Error, Result};
use crate::format::write_csv_atomic;
use crate::loss::mean_wql;
use crate::objective::{combine, weights_from_logits, Alpha, L1Target, Logits, Objective, Weights};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

/// Settings for the inner descent on the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Initial Adam learning rate in logit units.
    pub step_size: f64,
    /// Multiplier applied to the step after `patience` non-improving iterations.
    pub step_decay: f64,
    pub patience: usize,
    /// Minimum objective decrease that counts as an improvement.
    pub tol: f64,
    /// Descent stops once the decayed step falls below this.
    pub min_step: f64,
    pub l1_target: L1Target,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step_size: 0.5,
            step_decay: 0.5,
            patience: 25,
            tol: 1e-8,
            min_step: 1e-4,
            l1_target: L1Target::Logits,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::invalid("step_decay must lie in (0, 1]"));
        }
        if self.patience < 1 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !(self.tol >= 0.0) || !(self.min_step >= 0.0) {
            return Err(Error::invalid("tol and min_step must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: Weights,
    pub logits: Logits,
    /// Best objective value seen.
    pub objective: f64,
    pub iterations: usize,
    /// Best-so-far objective after each iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Minimizes the regularized objective over the logits from uniform weights
/// with Adam steps, halving the step (and returning to the incumbent) when
/// progress stalls. Returns the best iterate seen.
pub fn fit_weights(
    window: &WindowData,
    quantiles: &QuantileSpec,
    alpha: Alpha,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    let objective = Objective::new(window, quantiles, alpha, opts.l1_target)?;
    let mut work = objective.workspace();
    let size = {
        let (m, n, h, q) = objective.shape();
        m * n * h * q
    };

    let mut theta = vec![0.0; size];
    let mut grad = vec![0.0; size];
    let mut value = objective.evaluate(&theta, Some(&mut grad), &mut work);
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut best_theta = theta.clone();
    let mut best = value;
    let mut trace = vec![best];

    let mut first = vec![0.0; size];
    let mut second = vec![0.0; size];
    let mut t = 0i32;
    let mut step = opts.step_size;
    let mut stall = 0;
    let mut iterations = 0;

    for iter in 1..=opts.max_iters {
        iterations = iter;
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for f in 0..size {
            let g = grad[f];
            first[f] = ADAM_BETA1 * first[f] + (1.0 - ADAM_BETA1) * g;
            second[f] = ADAM_BETA2 * second[f] + (1.0 - ADAM_BETA2) * g * g;
            theta[f] -= step * (first[f] / c1) / ((second[f] / c2).sqrt() + ADAM_EPS);
        }
        value = objective.evaluate(&theta, Some(&mut grad), &mut work);
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iter });
        }

        if value < best - opts.tol {
            stall = 0;
        } else {
            stall += 1;
        }
        if value < best {
            best = value;
            best_theta.copy_from_slice(&theta);
        }
        trace.push(best);

        if stall >= opts.patience {
            step *= opts.step_decay;
            if step < opts.min_step {
                break;
            }
            stall = 0;
            t = 0;
            first.fill(0.0);
            second.fill(0.0);
            theta.copy_from_slice(&best_theta);
            objective.evaluate(&theta, Some(&mut grad), &mut work);
        }
    }

    let logits = Logits::new(
        ndarray::Array4::from_shape_vec(objective.shape(), best_theta).expect("shape matches"),
    )?;
    Ok(FitResult {
        weights: weights_from_logits(&logits),
        logits,
        objective: best,
        iterations,
        trace,
    })
}

/// Fits on `train`, applies the weights index-wise to `val` and returns the
/// validation mean weighted quantile loss.
pub fn evaluate_alpha(
    alpha: Alpha,
    train: &WindowData,
    val: &WindowData,
    quantiles: &QuantileSpec,
    opts: &FitOptions,
) -> Result<f64> {
    let fit = fit_weights(train, quantiles, alpha, opts)?;
    score_weights(&fit.weights, val, quantiles)
}

/// Mean weighted quantile loss of the weighted combination on `window`.
pub fn score_weights(weights: &Weights, window: &WindowData, quantiles: &QuantileSpec) -> Result<f64> {
    let combined = combine(weights, window.predictions.view())?;
    mean_wql(combined.view(), window.actuals.view(), quantiles)
}

/// The values every default-grid coordinate ranges over.
pub const DEFAULT_GRID_LEVELS: [f64; 4] = [0.0, 0.01, 0.1, 1.0];

/// `{0, 0.01, 0.1, 1}⁴` restricted to points with at most two nonzero
/// coordinates, in lexicographic order.
pub fn default_grid() -> Vec<Alpha> {
    full_grid()
        .into_iter()
        .filter(|a| a.values().iter().filter(|&&v| v != 0.0).count() <= 2)
        .collect()
}

/// Every point of `{0, 0.01, 0.1, 1}⁴`.
pub fn full_grid() -> Vec<Alpha> {
    let mut out = Vec::with_capacity(256);
    for &a in &DEFAULT_GRID_LEVELS {
        for &b in &DEFAULT_GRID_LEVELS {
            for &c in &DEFAULT_GRID_LEVELS {
                for &d in &DEFAULT_GRID_LEVELS {
                    out.push(Alpha::new([a, b, c, d]).expect("grid levels are valid"));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearchSpec {
    pub grid: Vec<Alpha>,
    pub refine: bool,
    pub refine_budget: usize,
    /// Upper bound of each coordinate; the lower bound is zero.
    pub upper: [f64; 4],
}

impl Default for AlphaSearchSpec {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            refine: false,
            refine_budget: 40,
            upper: [10.0; 4],
        }
    }
}

impl AlphaSearchSpec {
    pub fn grid_only(grid: Vec<Alpha>) -> Self {
        Self {
            grid,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::invalid("alpha grid is empty"));
        }
        if self.upper.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(Error::invalid("alpha upper bounds must be finite and nonnegative"));
        }
        for a in &self.grid {
            if a.values().iter().zip(&self.upper).any(|(v, u)| v > u) {
                return Err(Error::invalid(format!("grid point {a} exceeds the upper bounds")));
            }
        }
        Ok(())
    }

    fn clamp(&self, x: [f64; 4]) -> Alpha {
        let mut v = [0.0; 4];
        for d in 0..4 {
            v[d] = x[d].clamp(0.0, self.upper[d]);
        }
        Alpha::new(v).expect("clamped values are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSource {
    Grid,
    Refine,
}

impl EvalSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSource::Grid => "grid",
            EvalSource::Refine => "refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaEvaluation {
    pub alpha: Alpha,
    pub val_wql: f64,
    pub source: EvalSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearch {
    pub best: Alpha,
    pub best_loss: f64,
    /// Every evaluation in the order performed.
    pub evaluations: Vec<AlphaEvaluation>,
}

/// Lowest loss wins; exact ties go to the lexicographically smallest alpha.
pub fn argmin_alpha<'a, I>(evals: I) -> Option<(Alpha, f64)>
where
    I: IntoIterator<Item = (&'a Alpha, f64)>,
{
    evals
        .into_iter()
        .min_by(|(a, la), (b, lb)| la.total_cmp(lb).then_with(|| a.lex_cmp(b)))
        .map(|(a, l)| (*a, l))
}

/// Scores every grid point (concurrently; results are order-independent),
/// optionally refines from the grid winner with a clamped Nelder–Mead search,
/// and returns the overall argmin.
pub fn search_alpha(
    spec: &AlphaSearchSpec,
    train: &WindowData,
    val: &WindowData,
    quantiles: &QuantileSpec,
    opts: &FitOptions,
) -> Result<AlphaSearch> {
    spec.validate()?;
    let losses: Vec<f64> = spec
        .grid
        .par_iter()
        .map(|&alpha| evaluate_alpha(alpha, train, val, quantiles, opts))
        .collect::<Result<_>>()?;
    let mut evaluations: Vec<AlphaEvaluation> = spec
        .grid
        .iter()
        .zip(&losses)
        .map(|(&alpha, &val_wql)| AlphaEvaluation {
            alpha,
            val_wql,
            source: EvalSource::Grid,
        })
        .collect();

    if spec.refine && spec.refine_budget > 0 {
        let (start, start_loss) =
            argmin_alpha(evaluations.iter().map(|e| (&e.alpha, e.val_wql))).expect("grid is non-empty");
        let mut refined = Vec::new();
        nelder_mead(spec, start, start_loss, |alpha| {
            let loss = evaluate_alpha(alpha, train, val, quantiles, opts)?;
            refined.push(AlphaEvaluation {
                alpha,
                val_wql: loss,
                source: EvalSource::Refine,
            });
            Ok(loss)
        })?;
        evaluations.extend(refined);
    }

    let (best, best_loss) =
        argmin_alpha(evaluations.iter().map(|e| (&e.alpha, e.val_wql))).expect("at least one evaluation");
    Ok(AlphaSearch {
        best,
        best_loss,
        evaluations,
    })
}

/// Nelder–Mead in alpha space with every trial point clamped to the box.
/// Spends at most `spec.refine_budget` evaluations.
fn nelder_mead<F>(spec: &AlphaSearchSpec, start: Alpha, start_loss: f64, mut eval: F) -> Result<()>
where
    F: FnMut(Alpha) -> Result<f64>,
{
    const DIM: usize = 4;
    let mut budget = spec.refine_budget;
    let mut call = |x: [f64; DIM], budget: &mut usize| -> Result<Option<([f64; DIM], f64)>> {
        if *budget == 0 {
            return Ok(None);
        }
        *budget -= 1;
        let a = spec.clamp(x);
        Ok(Some((a.values(), eval(a)?)))
    };

    let x0 = start.values();
    let mut simplex: Vec<([f64; DIM], f64)> = vec![(x0, start_loss)];
    for d in 0..DIM {
        let step = (0.5 * x0[d]).max(0.01);
        let mut x = x0;
        x[d] = if x0[d] + step <= spec.upper[d] {
            x0[d] + step
        } else {
            x0[d] - step
        };
        match call(x, &mut budget)? {
            Some(v) => simplex.push(v),
            None => return Ok(()),
        }
    }

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[DIM].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| (0..DIM).map(|d| (x[d] - simplex[0].0[d]).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread.abs() < 1e-12 && size < 1e-6 {
            return Ok(());
        }

        let mut centroid = [0.0; DIM];
        for (x, _) in &simplex[..DIM] {
            for d in 0..DIM {
                centroid[d] += x[d] / DIM as f64;
            }
        }
        let along = |t: f64| -> [f64; DIM] {
            let mut p = [0.0; DIM];
            for d in 0..DIM {
                p[d] = centroid[d] + t * (simplex[DIM].0[d] - centroid[d]);
            }
            p
        };

        let Some(reflected) = call(along(-1.0), &mut budget)? else {
            return Ok(());
        };
        if reflected.1 < simplex[0].1 {
            let Some(expanded) = call(along(-2.0), &mut budget)? else {
                simplex[DIM] = reflected;
                return Ok(());
            };
            simplex[DIM] = if expanded.1 < reflected.1 { expanded } else { reflected };
            continue;
        }
        if reflected.1 < simplex[DIM - 1].1 {
            simplex[DIM] = reflected;
            continue;
        }
        let t = if reflected.1 < simplex[DIM].1 { -0.5 } else { 0.5 };
        let Some(contracted) = call(along(t), &mut budget)? else {
            return Ok(());
        };
        if contracted.1 < simplex[DIM].1.min(reflected.1) {
            simplex[DIM] = contracted;
            continue;
        }
        let best = simplex[0].0;
        for v in simplex.iter_mut().skip(1) {
            let mut x = [0.0; DIM];
            for d in 0..DIM {
                x[d] = best[d] + 0.5 * (v.0[d] - best[d]);
            }
            match call(x, &mut budget)? {
                Some(nv) => *v = nv,
                None => return Ok(()),
            }
        }
    }
}

/// Reads an alpha grid CSV with header `alpha1,alpha2,alpha3,alpha4`.
pub fn load_alpha_grid(path: &Path) -> Result<Vec<Alpha>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["alpha1", "alpha2", "alpha3", "alpha4"] {
        return Err(parse_err(1, "expected header `alpha1,alpha2,alpha3,alpha4`".into()));
    }
    let mut grid = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut v = [0.0; 4];
        for (d, slot) in v.iter_mut().enumerate() {
            let raw = rec.get(d).ok_or_else(|| parse_err(line, "expected four columns".into()))?;
            *slot = raw
                .parse()
                .map_err(|_| parse_err(line, format!("`{raw}` is not a number")))?;
        }
        grid.push(Alpha::new(v).map_err(|e| parse_err(line, e.to_string()))?);
    }
    if grid.is_empty() {
        return Err(parse_err(1, "alpha grid file has no rows".into()));
    }
    Ok(grid)
}

/// Writes `alpha1,alpha2,alpha3,alpha4,val_wql,evals,source`, where `evals`
/// is the running evaluation count.
pub fn write_search_report(path: &Path, search: &AlphaSearch) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record(["alpha1", "alpha2", "alpha3", "alpha4", "val_wql", "evals", "source"])?;
        for (n, e) in search.evaluations.iter().enumerate() {
            let [a, b, c, d] = e.alpha.values();
            w.write_record([
                a.to_string(),
                b.to_string(),
                c.to_string(),
                d.to_string(),
                e.val_wql.to_string(),
                (n + 1).to_string(),
                e.source.as_str().to_string(),
            ])?;
        }
        Ok(())
    })
}
