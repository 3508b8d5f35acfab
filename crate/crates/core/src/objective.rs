//! Softmax-parameterized ensemble weights, the weighted combination of
//! learner forecasts, the entropy and L1 regularizers, and the regularized
//! training objective with its analytic subgradient.
//!
//! Tensors are laid out `m × N × h × q` (learner, item, step, quantile).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView4, Axis};

use crate::data::{QuantileSpec, WindowData};
use crate::error::{Error, Result};
use crate::format::{sig, tau_label, write_csv_atomic};
use crate::loss::{abs_denominator, mean_wql, pinball, pinball_slope};

/// Regularization strengths: entropy across items, steps and quantiles,
/// then the L1 strength.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Alpha([f64; 4]);

impl Alpha {
    pub fn new(values: [f64; 4]) -> Result<Self> {
        if values.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::invalid(format!(
                "alpha components must be finite and nonnegative, got {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub const fn zero() -> Self {
        Self([0.0; 4])
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }

    pub fn entropy(&self, axis: WeightAxis) -> f64 {
        self.0[axis.index() - 1]
    }

    pub fn l1(&self) -> f64 {
        self.0[3]
    }

    /// Lexicographic comparison, used to break ties deterministically.
    pub fn lex_cmp(&self, other: &Alpha) -> std::cmp::Ordering {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "({a}, {b}, {c}, {d})")
    }
}

/// What the fourth regularizer penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum L1Target {
    /// `Σ|θ|`, pulling logits toward zero (uniform weights).
    #[default]
    Logits,
    /// `Σ|w|`, which is constant `N·h·q` on the simplex.
    Weights,
}

impl FromStr for L1Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(L1Target::Logits),
            "weights" => Ok(L1Target::Weights),
            other => Err(Error::invalid(format!(
                "unknown L1 target `{other}` (expected logits or weights)"
            ))),
        }
    }
}

/// Axis along which an entropy regularizer asks weights to be constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightAxis {
    Items,
    Steps,
    Quantiles,
}

impl WeightAxis {
    pub const ALL: [WeightAxis; 3] = [WeightAxis::Items, WeightAxis::Steps, WeightAxis::Quantiles];

    /// Array axis in the `m × N × h × q` layout.
    pub fn index(self) -> usize {
        match self {
            WeightAxis::Items => 1,
            WeightAxis::Steps => 2,
            WeightAxis::Quantiles => 3,
        }
    }
}

/// Unconstrained parameters behind the ensemble weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Array4<f64>);

impl Logits {
    pub fn new(theta: Array4<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(Self(theta.as_standard_layout().into_owned()))
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        Self(Array4::zeros(shape))
    }

    pub fn array(&self) -> &Array4<f64> {
        &self.0
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }
}

/// Ensemble weights; for every `(i, j, k)` the learner axis lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Array4<f64>);

impl Weights {
    pub fn new(w: Array4<f64>) -> Result<Self> {
        let ok = w
            .lanes(Axis(0))
            .into_iter()
            .all(|lane| lane.iter().all(|v| (0.0..=1.0).contains(v)) && (lane.sum() - 1.0).abs() <= 1e-9);
        if !ok {
            return Err(Error::invalid("weights must be nonnegative and sum to one across learners"));
        }
        Ok(Self(w))
    }

    pub fn uniform(shape: (usize, usize, usize, usize)) -> Self {
        Self(Array4::from_elem(shape, 1.0 / shape.0 as f64))
    }

    /// All mass on `learner` at every cell.
    pub fn one_hot(shape: (usize, usize, usize, usize), learner: usize) -> Self {
        Self(Array4::from_shape_fn(shape, |(l, _, _, _)| {
            if l == learner {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f64> {
        self.0
    }
}

/// Softmax across learners at every cell, with max-subtraction.
pub fn weights_from_logits(theta: &Logits) -> Weights {
    let mut w = theta.0.clone();
    for mut lane in w.lanes_mut(Axis(0)) {
        let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|t| (t - max).exp());
        let total = lane.sum();
        lane.mapv_inplace(|e| e / total);
    }
    Weights(w)
}

/// `Ẑ_{i,j,k} = Σ_l w^(l)_{i,j,k} ẑ^(l)_{i,j,k}`.
pub fn combine(weights: &Weights, predictions: ArrayView4<f64>) -> Result<Array3<f64>> {
    if weights.0.dim() != predictions.dim() {
        return Err(Error::DimensionMismatch(format!(
            "weights {:?} against predictions {:?}",
            weights.0.dim(),
            predictions.dim()
        )));
    }
    Ok((&weights.0 * &predictions).sum_axis(Axis(0)))
}

/// `Σ σ log σ` where `σ` is the softmax of the weights along `axis`, taken
/// separately within every group of the other three indices.
pub fn axis_entropy(weights: &Weights, axis: WeightAxis) -> f64 {
    let mut total = 0.0;
    for lane in weights.0.lanes(Axis(axis.index())) {
        let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = max + lane.iter().map(|&w| (w - max).exp()).sum::<f64>().ln();
        for &w in lane.iter() {
            let log_sigma = w - log_z;
            total += log_sigma.exp() * log_sigma;
        }
    }
    total
}

/// Largest within-group spread (max − min) of the weights along `axis`.
pub fn axis_range(weights: &Weights, axis: WeightAxis) -> f64 {
    weights
        .0
        .lanes(Axis(axis.index()))
        .into_iter()
        .map(|lane| {
            let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let min = lane.fold(f64::INFINITY, |a, &b| a.min(b));
            max - min
        })
        .fold(0.0, f64::max)
}

pub fn l1_term(theta: &Logits, weights: &Weights, target: L1Target) -> f64 {
    match target {
        L1Target::Logits => theta.0.iter().map(|t| t.abs()).sum(),
        L1Target::Weights => weights.0.iter().map(|w| w.abs()).sum(),
    }
}

/// Regularized mean weighted quantile loss, assembled from its parts.
pub fn objective(
    theta: &Logits,
    alpha: Alpha,
    l1: L1Target,
    window: &WindowData,
    quantiles: &QuantileSpec,
) -> Result<f64> {
    let weights = weights_from_logits(theta);
    let combined = combine(&weights, window.predictions.view())?;
    let mut value = mean_wql(combined.view(), window.actuals.view(), quantiles)?;
    for axis in WeightAxis::ALL {
        let a = alpha.entropy(axis);
        if a > 0.0 {
            value += a * axis_entropy(&weights, axis);
        }
    }
    if alpha.l1() > 0.0 {
        value += alpha.l1() * l1_term(theta, &weights, l1);
    }
    Ok(value)
}

/// A subgradient of [`objective`] with respect to the logits.
pub fn objective_gradient(
    theta: &Logits,
    alpha: Alpha,
    l1: L1Target,
    window: &WindowData,
    quantiles: &QuantileSpec,
) -> Result<Array4<f64>> {
    let objective = Objective::new(window, quantiles, alpha, l1)?;
    let mut grad = Array4::zeros(theta.0.dim());
    let mut work = objective.workspace();
    objective.evaluate(
        theta.as_slice(),
        Some(grad.as_slice_mut().expect("standard layout")),
        &mut work,
    );
    Ok(grad)
}

struct EntropyGroups {
    alpha: f64,
    stride: usize,
    len: usize,
    bases: Vec<usize>,
}

/// Scratch buffers reused across evaluations.
pub struct Workspace {
    weights: Vec<f64>,
    exp_weights: Vec<f64>,
    grad_weights: Vec<f64>,
    dloss: Vec<f64>,
}

/// The objective for one window and one `alpha`, evaluated in a single fused
/// pass over flat buffers. Used by the optimizer.
pub struct Objective {
    shape: (usize, usize, usize, usize),
    predictions: Vec<f64>,
    actuals: Vec<f64>,
    taus: Vec<f64>,
    scale: f64,
    entropy: Vec<EntropyGroups>,
    l1_alpha: f64,
    l1: L1Target,
}

impl Objective {
    pub fn new(window: &WindowData, quantiles: &QuantileSpec, alpha: Alpha, l1: L1Target) -> Result<Self> {
        let shape = window.predictions.dim();
        let (m, n, h, q) = shape;
        if q != quantiles.len() {
            return Err(Error::DimensionMismatch(format!(
                "{q} predicted quantiles but {} configured",
                quantiles.len()
            )));
        }
        let denom = abs_denominator(&window.actuals.view())?;
        let total = m * n * h * q;
        let entropy = WeightAxis::ALL
            .iter()
            .filter(|&&axis| alpha.entropy(axis) > 0.0)
            .map(|&axis| {
                let (stride, len) = match axis {
                    WeightAxis::Items => (h * q, n),
                    WeightAxis::Steps => (q, h),
                    WeightAxis::Quantiles => (1, q),
                };
                EntropyGroups {
                    alpha: alpha.entropy(axis),
                    stride,
                    len,
                    bases: (0..total).filter(|f| (f / stride) % len == 0).collect(),
                }
            })
            .collect();
        Ok(Self {
            shape,
            predictions: window.predictions.iter().copied().collect(),
            actuals: window.actuals.iter().copied().collect(),
            taus: quantiles.taus().to_vec(),
            scale: 2.0 / (q as f64 * denom),
            entropy,
            l1_alpha: alpha.l1(),
            l1,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn workspace(&self) -> Workspace {
        let (m, n, h, q) = self.shape;
        let total = m * n * h * q;
        Workspace {
            weights: vec![0.0; total],
            exp_weights: vec![0.0; total],
            grad_weights: vec![0.0; total],
            dloss: vec![0.0; n * h * q],
        }
    }

    pub fn value(&self, theta: &Logits) -> f64 {
        let mut work = self.workspace();
        self.evaluate(theta.as_slice(), None, &mut work)
    }

    /// Returns the objective at `theta`, writing a subgradient into `grad`
    /// when given.
    pub fn evaluate(&self, theta: &[f64], grad: Option<&mut [f64]>, work: &mut Workspace) -> f64 {
        let (m, n, h, q) = self.shape;
        let cells = n * h * q;
        let w = &mut work.weights;

        for c in 0..cells {
            let mut max = f64::NEG_INFINITY;
            for l in 0..m {
                max = max.max(theta[l * cells + c]);
            }
            let mut total = 0.0;
            for l in 0..m {
                let e = (theta[l * cells + c] - max).exp();
                w[l * cells + c] = e;
                total += e;
            }
            for l in 0..m {
                w[l * cells + c] /= total;
            }
        }

        let mut loss = 0.0;
        for c in 0..cells {
            let mut zhat = 0.0;
            for l in 0..m {
                zhat += w[l * cells + c] * self.predictions[l * cells + c];
            }
            let z = self.actuals[c / q];
            let tau = self.taus[c % q];
            loss += pinball(z, zhat, tau);
            work.dloss[c] = self.scale * pinball_slope(z, zhat, tau);
        }
        let mut value = self.scale * loss;

        let gw = &mut work.grad_weights;
        for (f, g) in gw.iter_mut().enumerate() {
            *g = work.dloss[f % cells] * self.predictions[f];
        }

        if !self.entropy.is_empty() {
            for (e, &wf) in work.exp_weights.iter_mut().zip(w.iter()) {
                *e = wf.exp();
            }
            for group in &self.entropy {
                let mut term = 0.0;
                for &base in &group.bases {
                    let idx = |s: usize| base + s * group.stride;
                    let z: f64 = (0..group.len).map(|s| work.exp_weights[idx(s)]).sum();
                    let log_z = z.ln();
                    let mut ent = 0.0;
                    for s in 0..group.len {
                        let f = idx(s);
                        ent += work.exp_weights[f] / z * (w[f] - log_z);
                    }
                    term += ent;
                    for s in 0..group.len {
                        let f = idx(s);
                        let sigma = work.exp_weights[f] / z;
                        gw[f] += group.alpha * sigma * (w[f] - log_z - ent);
                    }
                }
                value += group.alpha * term;
            }
        }

        if self.l1_alpha > 0.0 {
            value += self.l1_alpha
                * match self.l1 {
                    L1Target::Logits => theta.iter().map(|t| t.abs()).sum::<f64>(),
                    L1Target::Weights => w.iter().map(|x| x.abs()).sum::<f64>(),
                };
        }

        if let Some(grad) = grad {
            for c in 0..cells {
                let mut dot = 0.0;
                for l in 0..m {
                    dot += w[l * cells + c] * gw[l * cells + c];
                }
                for l in 0..m {
                    let f = l * cells + c;
                    grad[f] = w[f] * (gw[f] - dot);
                }
            }
            if self.l1_alpha > 0.0 && self.l1 == L1Target::Logits {
                for (g, &t) in grad.iter_mut().zip(theta) {
                    if t != 0.0 {
                        *g += self.l1_alpha * t.signum();
                    }
                }
            }
        }
        value
    }
}

/// Writes `learner,item,step,tau,weight` rows with 12 significant digits.
pub fn write_weights(
    path: &Path,
    weights: &Weights,
    learners: &[String],
    items: &[String],
    quantiles: &QuantileSpec,
) -> Result<()> {
    let (m, n, _, q) = weights.0.dim();
    if m != learners.len() || n != items.len() || q != quantiles.len() {
        return Err(Error::DimensionMismatch(format!(
            "weights {:?} for {} learners, {} items, {} quantiles",
            weights.0.dim(),
            learners.len(),
            items.len(),
            quantiles.len()
        )));
    }
    let labels: Vec<String> = quantiles.taus().iter().map(|&t| tau_label(t)).collect();
    write_csv_atomic(path, |wr| {
        wr.write_record(["learner", "item", "step", "tau", "weight"])?;
        for ((l, i, j, k), v) in weights.0.indexed_iter() {
            wr.write_record([
                learners[l].as_str(),
                items[i].as_str(),
                &(j + 1).to_string(),
                &labels[k],
                &sig(*v, 12),
            ])?;
        }
        Ok(())
    })
}

/// `true` when every learner row sums to one within `tol`.
pub fn is_on_simplex(weights: &Weights, tol: f64) -> bool {
    let sums = weights.0.sum_axis(Axis(0));
    let nonneg = weights.0.iter().all(|&w| w >= 0.0);
    nonneg && sums.iter().all(|s| (s - 1.0).abs() <= tol)
}
