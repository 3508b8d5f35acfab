//! Seeded synthetic panels, simulated base learners, heteroscedastic noise
//! injection along one tensor axis, and the oracle-gap experiment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{
    BacktestProblem, BacktestSplit, CubeSet, ForecastCube, PanelDataset, QuantileSpec, NUM_WINDOWS,
};
use crate::error::{Error, Result};
use crate::format::write_csv_atomic;
use crate::objective::Alpha;
use crate::optimize::{default_grid, fit_weights, score_weights, search_alpha, AlphaSearchSpec, FitOptions};

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PANEL_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
/// Learner `l` on window `n` draws from stream `LEARNER_STREAM + l·3 + n`.
const LEARNER_STREAM: u64 = 16;

/// Amplitudes of the panel generator. Each item draws its own level, slope,
/// seasonal amplitude and phase scaled by these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelComponents {
    pub level: f64,
    pub trend: f64,
    pub season: f64,
    pub period: f64,
    pub noise: f64,
}

impl Default for PanelComponents {
    fn default() -> Self {
        Self {
            level: 10.0,
            trend: 0.05,
            season: 3.0,
            period: 12.0,
            noise: 1.0,
        }
    }
}

/// `y[i, t] = a_i + b_i·t + c_i·sin(2πt/period + φ_i) + noise·e[i, t]` with
/// `a_i = level·U(1, 2)`, `b_i = trend·U(−1, 1)`, `c_i = season·U(0.5, 1.5)`,
/// `φ_i ~ U(0, 2π)` and standard normal `e`.
pub fn gen_panel(seed: u64, n_items: usize, len: usize, components: &PanelComponents) -> Result<PanelDataset> {
    if n_items == 0 || len == 0 {
        return Err(Error::invalid("synthetic panel needs at least one item and one timestamp"));
    }
    if !(components.period > 0.0) {
        return Err(Error::invalid("seasonal period must be positive"));
    }
    let mut rng = rng_for(seed, PANEL_STREAM);
    let width = n_items.to_string().len();
    let items = (1..=n_items).map(|i| format!("item_{i:0width$}")).collect();
    let mut values = Array2::zeros((n_items, len));
    for mut row in values.rows_mut() {
        let level = components.level * rng.random_range(1.0..2.0);
        let slope = components.trend * rng.random_range(-1.0..1.0);
        let amplitude = components.season * rng.random_range(0.5..1.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (t, v) in row.iter_mut().enumerate() {
            let t = (t + 1) as f64;
            let e: f64 = rng.sample(StandardNormal);
            *v = level
                + slope * t
                + amplitude * (std::f64::consts::TAU * t / components.period + phase).sin()
                + components.noise * e;
        }
    }
    PanelDataset::new(items, values)
}

/// How a simulated learner forms its point forecast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearnerKind {
    /// The realized future values.
    Exact,
    /// The realized future values shifted by `bias`.
    Biased { bias: f64 },
    /// Repeats the last `period` observed values (`period = 1` is the naive
    /// last-value forecast).
    Lagged { period: usize },
    /// The realized future values plus Gaussian noise of standard deviation
    /// `noise`, drawn per item and step.
    Noisy { noise: f64 },
}

/// A simulated learner: a point forecast plus quantile offsets
/// `spread·Φ⁻¹(τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimLearnerSpec {
    pub kind: LearnerKind,
    pub spread: f64,
}

impl SimLearnerSpec {
    pub fn new(kind: LearnerKind, spread: f64) -> Result<Self> {
        let spec = Self { kind, spread };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid(format!("spread must be finite and nonnegative, got {}", self.spread)));
        }
        match self.kind {
            LearnerKind::Biased { bias } if !bias.is_finite() => {
                Err(Error::invalid("bias must be finite"))
            }
            LearnerKind::Lagged { period: 0 } => Err(Error::invalid("lag period must be at least 1")),
            LearnerKind::Noisy { noise } if !(noise >= 0.0 && noise.is_finite()) => {
                Err(Error::invalid("noise scale must be finite and nonnegative"))
            }
            _ => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LearnerKind::Exact => "exact",
            LearnerKind::Biased { .. } => "biased",
            LearnerKind::Lagged { .. } => "lagged",
            LearnerKind::Noisy { .. } => "noisy",
        }
    }
}

impl fmt::Display for SimLearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LearnerKind::Exact => write!(f, "exact")?,
            LearnerKind::Biased { bias } => write!(f, "biased/bias={bias}")?,
            LearnerKind::Lagged { period } => write!(f, "lagged/period={period}")?,
            LearnerKind::Noisy { noise } => write!(f, "noisy/noise={noise}")?,
        }
        if self.spread != 0.0 {
            write!(f, "/spread={}", self.spread)?;
        }
        Ok(())
    }
}

/// Parses `kind[/key=value]*`, e.g. `exact`, `biased/bias=10`,
/// `lagged/period=12/spread=1`, `noisy/noise=2/spread=1.5`.
impl FromStr for SimLearnerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('/');
        let kind = parts.next().unwrap_or_default();
        let mut spread = 0.0;
        let mut bias = 0.0;
        let mut period = 1usize;
        let mut noise = 1.0;
        for part in parts {
            let (key, raw) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value in learner spec `{s}`, got `{part}`")))?;
            let num = || {
                raw.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("`{raw}` is not a number in learner spec `{s}`")))
            };
            match (kind, key) {
                (_, "spread") => spread = num()?,
                ("biased", "bias") => bias = num()?,
                ("noisy", "noise") => noise = num()?,
                ("lagged", "period") => {
                    period = raw
                        .parse()
                        .map_err(|_| Error::invalid(format!("lag period `{raw}` is not a positive integer")))?
                }
                _ => return Err(Error::invalid(format!("unknown parameter `{key}` for learner kind `{kind}`"))),
            }
        }
        let kind = match kind {
            "exact" => LearnerKind::Exact,
            "biased" => LearnerKind::Biased { bias },
            "lagged" => LearnerKind::Lagged { period },
            "noisy" => LearnerKind::Noisy { noise },
            other => {
                return Err(Error::invalid(format!(
                    "unknown learner kind `{other}` (expected exact, biased, lagged or noisy)"
                )))
            }
        };
        Self::new(kind, spread)
    }
}

/// Parses a comma-separated list of learner specs.
pub fn parse_learners(list: &str) -> Result<Vec<SimLearnerSpec>> {
    list.split(',').map(str::parse).collect()
}

/// Four learners of mixed skill: a noisy oracle, a seasonal naive, a biased
/// oracle and a last-value naive.
pub fn default_learners() -> Vec<SimLearnerSpec> {
    vec![
        SimLearnerSpec {
            kind: LearnerKind::Noisy { noise: 1.5 },
            spread: 1.5,
        },
        SimLearnerSpec {
            kind: LearnerKind::Lagged { period: 12 },
            spread: 1.5,
        },
        SimLearnerSpec {
            kind: LearnerKind::Biased { bias: 2.0 },
            spread: 1.0,
        },
        SimLearnerSpec {
            kind: LearnerKind::Lagged { period: 1 },
            spread: 2.0,
        },
    ]
}

/// Distinct display names `<kind>_<position>`.
pub fn learner_names(specs: &[SimLearnerSpec]) -> Vec<String> {
    specs
        .iter()
        .enumerate()
        .map(|(l, s)| format!("{}_{}", s.kind_name(), l + 1))
        .collect()
}

fn standard_normal_quantiles(quantiles: &QuantileSpec) -> Vec<f64> {
    let normal = Normal::standard();
    quantiles.taus().iter().map(|&t| normal.inverse_cdf(t)).collect()
}

/// Produces every learner's cube on every backtest window from the panel.
pub fn simulate_learners(
    panel: &PanelDataset,
    split: &BacktestSplit,
    specs: &[SimLearnerSpec],
    quantiles: &QuantileSpec,
    seed: u64,
) -> Result<CubeSet> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one simulated learner is required"));
    }
    if panel.len() != split.len() {
        return Err(Error::DimensionMismatch(format!(
            "split built for length {} applied to panel of length {}",
            split.len(),
            panel.len()
        )));
    }
    let names = learner_names(specs);
    let offsets = standard_normal_quantiles(quantiles);
    let (n, h, q) = (panel.n_items(), split.horizon(), quantiles.len());
    let y = panel.values();
    let mut cubes = Vec::with_capacity(specs.len() * NUM_WINDOWS);
    for (l, spec) in specs.iter().enumerate() {
        spec.validate()?;
        for window in 0..NUM_WINDOWS {
            let mut rng = rng_for(seed, LEARNER_STREAM + (l * NUM_WINDOWS + window) as u64);
            let hist_end = split.train_range(window).end;
            let start = split.window_range(window).start - 1;
            let mut values = Array3::zeros((n, h, q));
            for i in 0..n {
                for j in 0..h {
                    let point = match spec.kind {
                        LearnerKind::Exact => y[[i, start + j]],
                        LearnerKind::Biased { bias } => y[[i, start + j]] + bias,
                        LearnerKind::Lagged { period } => {
                            let p = period.min(hist_end);
                            y[[i, hist_end - p + j % p]]
                        }
                        LearnerKind::Noisy { noise } => {
                            let e: f64 = rng.sample(StandardNormal);
                            y[[i, start + j]] + noise * e
                        }
                    };
                    for k in 0..q {
                        values[[i, j, k]] = point + spec.spread * offsets[k];
                    }
                }
            }
            cubes.push(ForecastCube::new(names[l].clone(), window, values)?);
        }
    }
    CubeSet::new(names, cubes)
}

/// Population standard deviation over steps for each `(item, quantile)`.
pub fn prediction_std(cube: &ForecastCube) -> Array2<f64> {
    let (n, _, q) = cube.values.dim();
    let mut out = Array2::zeros((n, q));
    for i in 0..n {
        for k in 0..q {
            out[[i, k]] = cube.values.slice(ndarray::s![i, .., k]).std(0.0);
        }
    }
    out
}

/// Axis along which injected noise varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Time,
    Items,
    Quantiles,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::Time, NoiseMode::Items, NoiseMode::Quantiles];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Time => "time",
            NoiseMode::Items => "items",
            NoiseMode::Quantiles => "quantiles",
        }
    }

    /// Number of scale variables drawn per learner.
    fn n_draws(self, n_items: usize, n_quantiles: usize) -> usize {
        match self {
            NoiseMode::Time => 1,
            NoiseMode::Items => n_items,
            NoiseMode::Quantiles => n_quantiles,
        }
    }

    fn draw_upper(self) -> f64 {
        match self {
            NoiseMode::Time => 0.5,
            NoiseMode::Items | NoiseMode::Quantiles => 2.0,
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(NoiseMode::Time),
            "items" => Ok(NoiseMode::Items),
            "quantiles" => Ok(NoiseMode::Quantiles),
            other => Err(Error::invalid(format!(
                "unknown noise mode `{other}` (expected time, items or quantiles)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub seed: u64,
}

/// Per-cell noise standard deviations `N × h × q` for one learner, given its
/// scale draws (`1`, `N` or `q` of them depending on the mode) and its
/// step-wise standard deviations `s` (`N × q`).
pub fn noise_scales(mode: NoiseMode, draws: &[f64], s: &Array2<f64>, horizon: usize) -> Result<Array3<f64>> {
    let (n, q) = s.dim();
    if draws.len() != mode.n_draws(n, q) {
        return Err(Error::DimensionMismatch(format!(
            "{} scale draws for {mode} noise over {n} items and {q} quantiles",
            draws.len()
        )));
    }
    let h = horizon as f64;
    Ok(Array3::from_shape_fn((n, horizon, q), |(i, j, k)| match mode {
        NoiseMode::Time => 2.0 * (j + 1) as f64 * draws[0] * s[[i, k]] / h,
        NoiseMode::Items => draws[i] * s[[i, k]],
        NoiseMode::Quantiles => 2.0 * draws[k] * s[[i, k]],
    }))
}

/// Noise drawn for one learner and added to all of its windows.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedNoise {
    pub draws: Vec<f64>,
    pub scales: Array3<f64>,
    pub noise: Array3<f64>,
}

/// Draws each learner's scale variables and one realized Gaussian noise
/// tensor (standard deviation per cell from [`noise_scales`], `s` taken from
/// the window-0 cube) and adds that same tensor to the learner's cube on
/// every window. Learners are processed in order from one seeded stream.
pub fn inject_noise(cubes: &mut CubeSet, spec: &NoiseSpec) -> Result<Vec<InjectedNoise>> {
    let mut rng = rng_for(spec.seed, NOISE_STREAM);
    let mut injected = Vec::with_capacity(cubes.learners().len());
    for l in 0..cubes.learners().len() {
        let base = cubes.get(l, 0).ok_or_else(|| Error::MissingWindow {
            learner: cubes.learners()[l].clone(),
            window: 0,
        })?;
        let s = prediction_std(base);
        let (n, h, q) = base.values.dim();
        let draws: Vec<f64> = (0..spec.mode.n_draws(n, q))
            .map(|_| rng.random_range(0.0..spec.mode.draw_upper()))
            .collect();
        injected.push(realize(spec.mode, draws, &s, h, &mut rng)?);
    }
    apply_noise(cubes, &injected)?;
    Ok(injected)
}

fn realize(mode: NoiseMode, draws: Vec<f64>, s: &Array2<f64>, horizon: usize, rng: &mut ChaCha8Rng) -> Result<InjectedNoise> {
    let scales = noise_scales(mode, &draws, s, horizon)?;
    let noise = scales.mapv(|eps| {
        let z: f64 = rng.sample(StandardNormal);
        eps * z
    });
    Ok(InjectedNoise { draws, scales, noise })
}

/// Adds `injected[l].noise` to learner `l`'s cube on every window.
pub fn apply_noise(cubes: &mut CubeSet, injected: &[InjectedNoise]) -> Result<()> {
    let names = cubes.learners().to_vec();
    if injected.len() != names.len() {
        return Err(Error::DimensionMismatch(format!(
            "noise for {} learners applied to {}",
            injected.len(),
            names.len()
        )));
    }
    for cube in cubes.cubes_mut() {
        let l = names.iter().position(|n| n == &cube.learner).expect("cube learner is registered");
        if cube.values.dim() != injected[l].noise.dim() {
            return Err(Error::DimensionMismatch(format!(
                "noise {:?} for cube {:?}",
                injected[l].noise.dim(),
                cube.values.dim()
            )));
        }
        cube.values += &injected[l].noise;
    }
    Ok(())
}

/// Knobs for one synthetic run.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub len: usize,
    pub horizon: usize,
    pub quantiles: QuantileSpec,
    pub components: PanelComponents,
    pub learners: Vec<SimLearnerSpec>,
    pub noise: Option<NoiseMode>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 20,
            len: 60,
            horizon: 8,
            quantiles: QuantileSpec::default(),
            components: PanelComponents::default(),
            learners: default_learners(),
            noise: None,
        }
    }
}

/// Panel, cubes and assembled problem for one synthetic run.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub panel: PanelDataset,
    pub cubes: CubeSet,
    pub problem: BacktestProblem,
}

/// Generates the panel, simulates the learners and optionally injects noise,
/// all from `seed`.
pub fn synth_problem(config: &SynthConfig, seed: u64) -> Result<SynthData> {
    let panel = gen_panel(seed, config.n_items, config.len, &config.components)?;
    let split = BacktestSplit::new(panel.len(), config.horizon)?;
    let mut cubes = simulate_learners(&panel, &split, &config.learners, &config.quantiles, seed)?;
    if let Some(mode) = config.noise {
        inject_noise(&mut cubes, &NoiseSpec { mode, seed })?;
    }
    let problem = BacktestProblem::assemble(&panel, &split, &cubes, &config.quantiles)?;
    Ok(SynthData { panel, cubes, problem })
}

/// Settings of the oracle-gap experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GapConfig {
    pub synth: SynthConfig,
    pub grid: Vec<Alpha>,
    pub fit: FitOptions,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                noise: Some(NoiseMode::Items),
                ..SynthConfig::default()
            },
            grid: default_grid(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub rep: usize,
    pub alpha_hat: Alpha,
    pub val_wql: f64,
    /// Smallest validation loss over the grid.
    pub val_min: f64,
    pub test_ours: f64,
    /// Smallest test loss over the grid.
    pub test_oracle: f64,
    pub gap: f64,
    pub rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub mode: Option<NoiseMode>,
    pub rows: Vec<GapRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl GapReport {
    pub fn median_gap(&self) -> f64 {
        median(&mut self.rows.iter().map(|r| r.gap).collect::<Vec<_>>())
    }

    pub fn median_rel_gap(&self) -> f64 {
        median(&mut self.rows.iter().map(|r| r.rel_gap).collect::<Vec<_>>())
    }

    /// Fraction of repetitions whose relative gap is at most `limit`.
    pub fn fraction_within(&self, limit: f64) -> f64 {
        self.rows.iter().filter(|r| r.rel_gap <= limit).count() as f64 / self.rows.len() as f64
    }

    /// Repetitions where the selected alpha attains the grid's smallest
    /// validation loss.
    pub fn validation_dominance(&self) -> usize {
        self.rows.iter().filter(|r| r.val_wql == r.val_min).count()
    }
}

/// Runs the experiment once per repetition with seed `seed + rep`: selects
/// alpha on window 1 as usual, then refits every grid point on window 1 and
/// scores it on window 2 to find the grid oracle.
pub fn oracle_gap_experiment(config: &GapConfig, repetitions: usize, seed: u64) -> Result<GapReport> {
    if repetitions == 0 {
        return Err(Error::invalid("at least one repetition is required"));
    }
    let search_spec = AlphaSearchSpec::grid_only(config.grid.clone());
    let rows = (0..repetitions)
        .into_par_iter()
        .map(|rep| gap_repetition(config, &search_spec, rep, seed.wrapping_add(rep as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GapReport {
        mode: config.synth.noise,
        rows,
    })
}

fn gap_repetition(config: &GapConfig, search_spec: &AlphaSearchSpec, rep: usize, seed: u64) -> Result<GapRow> {
    let data = synth_problem(&config.synth, seed)?;
    let problem = &data.problem;
    let [w0, w1, w2] = &problem.windows;
    let search = search_alpha(search_spec, w0, w1, &problem.quantiles, &config.fit)?;
    let val_min = search
        .evaluations
        .iter()
        .map(|e| e.val_wql)
        .fold(f64::INFINITY, f64::min);
    let mut test_ours = f64::NAN;
    let mut test_oracle = f64::INFINITY;
    for &alpha in &config.grid {
        let fit = fit_weights(w1, &problem.quantiles, alpha, &config.fit)?;
        let loss = score_weights(&fit.weights, w2, &problem.quantiles)?;
        if alpha == search.best {
            test_ours = loss;
        }
        test_oracle = test_oracle.min(loss);
    }
    let gap = test_ours - test_oracle;
    let rel_gap = if gap == 0.0 { 0.0 } else { gap / test_oracle };
    Ok(GapRow {
        rep,
        alpha_hat: search.best,
        val_wql: search.best_loss,
        val_min,
        test_ours,
        test_oracle,
        gap,
        rel_gap,
    })
}

/// Writes `rep,mode,alpha_hat1..4,test_wql_ours,test_wql_oracle,gap,rel_gap`
/// per repetition and a final `summary` row holding the mean test losses and
/// the median gap and relative gap.
pub fn write_gap_report(path: &Path, report: &GapReport) -> Result<()> {
    let mode = report.mode.map_or("none", NoiseMode::as_str);
    write_csv_atomic(path, |w| {
        w.write_record([
            "rep",
            "mode",
            "alpha_hat1",
            "alpha_hat2",
            "alpha_hat3",
            "alpha_hat4",
            "test_wql_ours",
            "test_wql_oracle",
            "gap",
            "rel_gap",
        ])?;
        for r in &report.rows {
            let [a, b, c, d] = r.alpha_hat.values();
            w.write_record([
                r.rep.to_string(),
                mode.to_string(),
                a.to_string(),
                b.to_string(),
                c.to_string(),
                d.to_string(),
                r.test_ours.to_string(),
                r.test_oracle.to_string(),
                r.gap.to_string(),
                r.rel_gap.to_string(),
            ])?;
        }
        let n = report.rows.len() as f64;
        let mean_ours = report.rows.iter().map(|r| r.test_ours).sum::<f64>() / n;
        let mean_oracle = report.rows.iter().map(|r| r.test_oracle).sum::<f64>() / n;
        w.write_record([
            "summary".to_string(),
            mode.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            mean_ours.to_string(),
            mean_oracle.to_string(),
            report.median_gap().to_string(),
            report.median_rel_gap().to_string(),
        ])?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::mean_wql;
    use ndarray::Axis;

    #[test]
    fn zero_amplitudes_give_a_zero_panel() {
        let zero = PanelComponents {
            level: 0.0,
            trend: 0.0,
            season: 0.0,
            period: 12.0,
            noise: 0.0,
        };
        let panel = gen_panel(3, 4, 10, &zero).unwrap();
        assert!(panel.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn panels_are_seeded() {
        let c = PanelComponents::default();
        assert_eq!(gen_panel(7, 3, 20, &c).unwrap(), gen_panel(7, 3, 20, &c).unwrap());
        for seed in 0..100 {
            assert_ne!(gen_panel(seed, 3, 20, &c).unwrap(), gen_panel(seed + 1, 3, 20, &c).unwrap());
        }
    }

    fn small() -> (PanelDataset, BacktestSplit, QuantileSpec) {
        let panel = gen_panel(1, 3, 30, &PanelComponents::default()).unwrap();
        let split = BacktestSplit::new(30, 4).unwrap();
        (panel, split, QuantileSpec::default())
    }

    #[test]
    fn exact_learner_reproduces_actuals() {
        let (panel, split, q) = small();
        let specs = [SimLearnerSpec::new(LearnerKind::Exact, 0.0).unwrap()];
        let cubes = simulate_learners(&panel, &split, &specs, &q, 5).unwrap();
        for n in 0..NUM_WINDOWS {
            let actuals = split.actuals(&panel, n).unwrap().values;
            let cube = &cubes.get(0, n).unwrap().values;
            for k in 0..q.len() {
                assert_eq!(cube.index_axis(Axis(2), k), actuals);
            }
            assert_eq!(mean_wql(cube.view(), actuals.view(), &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn biased_learner_is_shifted_exact() {
        let (panel, split, q) = small();
        let specs = [
            SimLearnerSpec::new(LearnerKind::Exact, 0.7).unwrap(),
            SimLearnerSpec::new(LearnerKind::Biased { bias: 10.0 }, 0.7).unwrap(),
        ];
        let cubes = simulate_learners(&panel, &split, &specs, &q, 5).unwrap();
        for n in 0..NUM_WINDOWS {
            let diff = &cubes.get(1, n).unwrap().values - &cubes.get(0, n).unwrap().values;
            assert!(diff.iter().all(|d| (d - 10.0).abs() < 1e-12));
        }
    }

    #[test]
    fn lagged_learner_repeats_history() {
        let (panel, split, q) = small();
        let specs = [SimLearnerSpec::new(LearnerKind::Lagged { period: 1 }, 0.0).unwrap()];
        let cubes = simulate_learners(&panel, &split, &specs, &q, 5).unwrap();
        let last = split.train_range(2).end;
        let cube = &cubes.get(0, 2).unwrap().values;
        assert!(cube.iter().zip(cube.indexed_iter()).all(|(&v, ((i, _, _), _))| v == panel.values()[[i, last - 1]]));
    }

    #[test]
    fn quantile_offsets_follow_the_normal_quantiles() {
        let (panel, split, q) = small();
        let specs = [SimLearnerSpec::new(LearnerKind::Exact, 2.0).unwrap()];
        let cubes = simulate_learners(&panel, &split, &specs, &q, 5).unwrap();
        let cube = &cubes.get(0, 0).unwrap().values;
        let z = 1.2815515655446004;
        assert!((cube[[0, 0, 2]] - cube[[0, 0, 1]] - 2.0 * z).abs() < 1e-9);
        assert!((cube[[0, 0, 1]] - cube[[0, 0, 0]] - 2.0 * z).abs() < 1e-9);
    }

    #[test]
    fn learner_spec_strings_round_trip() {
        for s in ["exact", "biased/bias=10", "lagged/period=12/spread=1", "noisy/noise=2/spread=1.5"] {
            let spec: SimLearnerSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("oracle".parse::<SimLearnerSpec>().is_err());
        assert!("lagged/period=0".parse::<SimLearnerSpec>().is_err());
        assert!("exact/bias=1".parse::<SimLearnerSpec>().is_err());
        assert!("noisy/noise=-1".parse::<SimLearnerSpec>().is_err());
        assert_eq!(parse_learners("exact,biased/bias=10").unwrap().len(), 2);
    }

    #[test]
    fn prediction_std_examples() {
        let cube = |v: Vec<f64>| ForecastCube::new("a", 0, Array3::from_shape_vec((1, v.len(), 1), v).unwrap()).unwrap();
        assert_eq!(prediction_std(&cube(vec![5.0, 5.0, 5.0]))[[0, 0]], 0.0);
        assert!((prediction_std(&cube(vec![1.0, 3.0]))[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((prediction_std(&cube(vec![0.0, 0.0, 6.0]))[[0, 0]] - 2.828427).abs() < 1e-6);
    }

    #[test]
    fn noise_scale_formulas() {
        let s = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let h = 4;
        let time = noise_scales(NoiseMode::Time, &[0.25], &s, h).unwrap();
        assert!((time[[1, h - 1, 2]] - 2.0 * 0.25 * 6.0).abs() < 1e-12);
        assert!((time[[1, 0, 2]] - 2.0 * 0.25 * 6.0 / h as f64).abs() < 1e-12);
        for j in 1..h {
            assert!(time[[0, j, 0]] > time[[0, j - 1, 0]]);
        }

        let items = noise_scales(NoiseMode::Items, &[0.5, 1.5], &s, h).unwrap();
        for j in 0..h {
            assert_eq!(items[[1, j, 1]], 1.5 * 5.0);
        }
        let quant = noise_scales(NoiseMode::Quantiles, &[0.5, 1.0, 1.5], &s, h).unwrap();
        for j in 0..h {
            assert_eq!(quant[[0, j, 2]], 2.0 * 1.5 * 3.0);
        }

        for mode in NoiseMode::ALL {
            let zeros = vec![0.0; mode.n_draws(2, 3)];
            assert!(noise_scales(mode, &zeros, &s, h).unwrap().iter().all(|&e| e == 0.0));
        }
        assert!(noise_scales(NoiseMode::Items, &[1.0], &s, h).is_err());
    }

    #[test]
    fn zero_draws_leave_cubes_unchanged() {
        let (panel, split, q) = small();
        let cubes = simulate_learners(&panel, &split, &default_learners(), &q, 5).unwrap();
        let mut noisy = cubes.clone();
        let mut rng = rng_for(0, NOISE_STREAM);
        let injected: Vec<InjectedNoise> = (0..cubes.learners().len())
            .map(|l| {
                let s = prediction_std(cubes.get(l, 0).unwrap());
                realize(NoiseMode::Items, vec![0.0; 3], &s, 4, &mut rng).unwrap()
            })
            .collect();
        apply_noise(&mut noisy, &injected).unwrap();
        assert_eq!(noisy, cubes);
    }

    #[test]
    fn injected_noise_is_shared_across_windows() {
        let (panel, split, q) = small();
        let clean = simulate_learners(&panel, &split, &default_learners(), &q, 5).unwrap();
        for mode in NoiseMode::ALL {
            let mut a = clean.clone();
            let mut b = clean.clone();
            let spec = NoiseSpec { mode, seed: 11 };
            inject_noise(&mut a, &spec).unwrap();
            inject_noise(&mut b, &spec).unwrap();
            assert_eq!(a, b);
            for l in 0..clean.learners().len() {
                let added: Vec<Array3<f64>> = (0..NUM_WINDOWS)
                    .map(|n| &a.get(l, n).unwrap().values - &clean.get(l, n).unwrap().values)
                    .collect();
                for n in 1..NUM_WINDOWS {
                    for (x, y) in added[0].iter().zip(added[n].iter()) {
                        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn single_point_grid_has_no_gap() {
        let config = GapConfig {
            synth: SynthConfig {
                n_items: 4,
                len: 30,
                horizon: 4,
                ..SynthConfig::default()
            },
            grid: vec![Alpha::zero()],
            fit: FitOptions {
                max_iters: 200,
                ..FitOptions::default()
            },
        };
        let report = oracle_gap_experiment(&config, 2, 9).unwrap();
        assert!(report.rows.iter().all(|r| r.gap == 0.0 && r.rel_gap == 0.0));
        assert_eq!(report.validation_dominance(), 2);
    }
}
