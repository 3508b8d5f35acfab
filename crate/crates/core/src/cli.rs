//! Command-line interface: argument definitions, JSON config merging and the
//! four subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::bounds::{oracle_rhs, BoundInputs, Covering};
use crate::data::{
    load_cubes, load_panel, load_predictions, make_backtest_splits, write_cubes, write_panel,
    BacktestProblem, CubeSet, QuantileSpec, NUM_WINDOWS,
};
use crate::error::{Error, Result};
use crate::format::sig;
use crate::loss::{write_loss_reports, LossReport};
use crate::objective::{Alpha, L1Target};
use crate::optimize::{default_grid, full_grid, load_alpha_grid, AlphaSearchSpec, FitOptions};
use crate::pipeline::{run_algorithm1, write_artifacts, Baselines, PipelineConfig, PipelineResult, COMPARISON_FILE};
use crate::synthetic::{
    default_learners, oracle_gap_experiment, parse_learners, synth_problem, write_gap_report, GapConfig,
    NoiseMode, PanelComponents, SynthConfig,
};

#[derive(Debug, Parser)]
#[command(name = "qstack", version, about = "Regularized stacking of quantile forecasts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select, fit and score an ensemble from a panel and forecast cubes.
    Ensemble(EnsembleArgs),
    /// Generate synthetic data, simulate learners and run the pipeline on it.
    Synth(SynthArgs),
    /// Evaluate the cross-validation oracle-inequality bound.
    Bound(BoundArgs),
    /// Score a predictions file against a panel's backtest window.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat JSON file with defaults for any of the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Comma-separated quantile levels, e.g. `0.1,0.5,0.9`.
    #[arg(long)]
    pub quantiles: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Alpha grid CSV, or one of the presets `default`, `zero`, `full`.
    #[arg(long)]
    pub alpha_grid: Option<String>,
    /// Refine the best grid point with a Nelder–Mead search.
    #[arg(long)]
    pub refine: bool,
    #[arg(long)]
    pub refine_budget: Option<usize>,
    #[arg(long, value_enum)]
    pub l1_target: Option<L1TargetArg>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Comma-separated baselines to compute: unregularized, mean, median,
    /// global-best, best-single, or `none`.
    #[arg(long)]
    pub baselines: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum L1TargetArg {
    Logits,
    Weights,
}

impl From<L1TargetArg> for L1Target {
    fn from(a: L1TargetArg) -> Self {
        match a {
            L1TargetArg::Logits => L1Target::Logits,
            L1TargetArg::Weights => L1Target::Weights,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    None,
    Time,
    Items,
    Quantiles,
}

impl ModeArg {
    fn noise(self) -> Option<NoiseMode> {
        match self {
            ModeArg::None => None,
            ModeArg::Time => Some(NoiseMode::Time),
            ModeArg::Items => Some(NoiseMode::Items),
            ModeArg::Quantiles => Some(NoiseMode::Quantiles),
        }
    }
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Panel CSV with header `item,t,value`.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Forecast cube CSV(s) with header `learner,window,item,step,tau,value`.
    #[arg(long, num_args = 1..)]
    pub cubes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Number of runs, with seeds `seed, seed + 1, ...`.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub n_items: Option<usize>,
    /// Series length.
    #[arg(long)]
    pub len: Option<usize>,
    /// Comma-separated learner specs such as `exact,biased/bias=10,lagged/period=12/spread=1`.
    #[arg(long)]
    pub learners: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub trend: Option<f64>,
    #[arg(long)]
    pub season: Option<f64>,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub panel_noise: Option<f64>,
    /// Run the oracle-gap experiment with this many repetitions instead.
    #[arg(long)]
    pub oracle_gap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// First Bernstein number.
    #[arg(long = "m")]
    pub bernstein_m: f64,
    /// Second Bernstein number.
    #[arg(long = "v")]
    pub bernstein_v: f64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub p: f64,
    /// Validation sample size.
    #[arg(long)]
    pub n1: f64,
    /// Covering scale.
    #[arg(long)]
    pub eps: f64,
    /// Smallest expected loss over the family.
    #[arg(long)]
    pub mean_loss: f64,
    #[arg(long)]
    pub oracle_loss: f64,
    /// Explicit covering number.
    #[arg(long = "covering", conflicts_with = "finite")]
    pub covering: Option<f64>,
    /// Size of a finite family (drops the eps term).
    #[arg(long)]
    pub finite: Option<usize>,
    /// Lipschitz constant, for deriving the covering bound.
    #[arg(long)]
    pub ell: Option<f64>,
    /// Radius of the ball containing the index set.
    #[arg(long = "radius")]
    pub radius: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Extra algorithms the guarantee should also cover.
    #[arg(long, default_value_t = 0)]
    pub extra: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Predictions CSV with header `item,step,tau,value`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Backtest window the predictions cover.
    #[arg(long)]
    pub window: Option<usize>,
}

/// Flat JSON run configuration; every field is optional and flags override it.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    pub cubes: Option<Vec<PathBuf>>,
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub quantiles: Option<Vec<f64>>,
    pub alpha_grid: Option<String>,
    pub refine: Option<bool>,
    pub refine_budget: Option<usize>,
    pub l1_target: Option<String>,
    pub max_iters: Option<usize>,
    pub baselines: Option<String>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub runs: Option<usize>,
    pub n_items: Option<usize>,
    pub len: Option<usize>,
    pub learners: Option<String>,
    pub level: Option<f64>,
    pub trend: Option<f64>,
    pub season: Option<f64>,
    pub period: Option<f64>,
    pub panel_noise: Option<f64>,
    pub oracle_gap: Option<usize>,
    pub window: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::invalid(format!("--{flag} is required (as a flag or in --config)")))
}

fn resolve_quantiles(flag: &Option<String>, config: &RunConfig) -> Result<QuantileSpec> {
    match (flag, &config.quantiles) {
        (Some(list), _) => QuantileSpec::parse(list),
        (None, Some(taus)) => QuantileSpec::new(taus.clone()),
        (None, None) => Ok(QuantileSpec::default()),
    }
}

/// Resolves a grid preset name or loads a grid file.
pub fn resolve_alpha_grid(name: &str) -> Result<Vec<Alpha>> {
    match name {
        "default" => Ok(default_grid()),
        "zero" => Ok(vec![Alpha::zero()]),
        "full" => Ok(full_grid()),
        path => load_alpha_grid(Path::new(path)),
    }
}

fn parse_baselines(list: &str) -> Result<Baselines> {
    let mut b = Baselines {
        unregularized: false,
        mean: false,
        median: false,
        global_best: false,
        best_single: false,
    };
    for name in list.split(',').map(str::trim) {
        match name {
            "none" => {}
            "all" => b = Baselines::default(),
            "unregularized" => b.unregularized = true,
            "mean" => b.mean = true,
            "median" => b.median = true,
            "global-best" => b.global_best = true,
            "best-single" => b.best_single = true,
            other => return Err(Error::invalid(format!("unknown baseline `{other}`"))),
        }
    }
    Ok(b)
}

fn resolve_pipeline(fit: &FitArgs, config: &RunConfig) -> Result<PipelineConfig> {
    let grid_name = fit
        .alpha_grid
        .clone()
        .or_else(|| config.alpha_grid.clone())
        .unwrap_or_else(|| "default".into());
    let mut search = AlphaSearchSpec::grid_only(resolve_alpha_grid(&grid_name)?);
    search.refine = fit.refine || config.refine.unwrap_or(false);
    if let Some(budget) = fit.refine_budget.or(config.refine_budget) {
        search.refine_budget = budget;
    }
    let mut opts = FitOptions::default();
    if let Some(target) = fit.l1_target {
        opts.l1_target = target.into();
    } else if let Some(target) = &config.l1_target {
        opts.l1_target = target.parse()?;
    }
    if let Some(iters) = fit.max_iters.or(config.max_iters) {
        opts.max_iters = iters;
    }
    let baselines = match fit.baselines.as_ref().or(config.baselines.as_ref()) {
        Some(list) => parse_baselines(list)?,
        None => Baselines::default(),
    };
    search.validate()?;
    opts.validate()?;
    Ok(PipelineConfig {
        search,
        fit: opts,
        baselines,
    })
}

/// Runs the parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ensemble(args) => cmd_ensemble(&args, out),
        Command::Synth(args) => cmd_synth(&args, out),
        Command::Bound(args) => cmd_bound(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn print_result(out: &mut dyn Write, problem: &BacktestProblem, result: &PipelineResult) -> Result<()> {
    writeln!(out, "selected alpha: {}", result.alpha_hat).map_err(io_out)?;
    if let Some(subset) = &result.global_best_subset {
        let names: Vec<&str> = subset.iter().map(|&l| problem.learners[l].as_str()).collect();
        writeln!(out, "global best subset: {}", names.join(", ")).map_err(io_out)?;
    }
    if let Some(l) = result.best_single {
        writeln!(out, "best single learner: {}", problem.learners[l]).map_err(io_out)?;
    }
    writeln!(out, "{:<16} {:>12} {:>12}", "strategy", "val_wql", "test_wql").map_err(io_out)?;
    for row in &result.rows {
        writeln!(
            out,
            "{:<16} {:>12} {:>12}",
            row.name,
            sig(row.val_wql, 6),
            sig(row.test.mean_wql, 6)
        )
        .map_err(io_out)?;
    }
    Ok(())
}

fn merge_cubes(sets: Vec<CubeSet>) -> Result<CubeSet> {
    let mut learners: Vec<String> = Vec::new();
    let mut cubes = Vec::new();
    for set in sets {
        for name in set.learners() {
            if !learners.contains(name) {
                learners.push(name.clone());
            }
        }
        cubes.extend(set.cubes().iter().cloned());
    }
    CubeSet::new(learners, cubes)
}

pub fn cmd_ensemble(args: &EnsembleArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(&args.common)?;
    let panel_path = require(args.panel.clone().or(config.panel.clone()), "panel")?;
    let cube_paths = if args.cubes.is_empty() {
        require(config.cubes.clone(), "cubes")?
    } else {
        args.cubes.clone()
    };
    let out_dir = require(args.common.out.clone().or(config.out.clone()), "out")?;
    let horizon = require(args.common.horizon.or(config.horizon), "horizon")?;
    let quantiles = resolve_quantiles(&args.common.quantiles, &config)?;
    let pipeline = resolve_pipeline(&args.fit, &config)?;

    let panel = load_panel(&panel_path)?;
    let split = make_backtest_splits(&panel, horizon)?;
    let sets = cube_paths
        .iter()
        .map(|p| load_cubes(p, panel.items(), horizon, &quantiles))
        .collect::<Result<Vec<_>>>()?;
    let cubes = merge_cubes(sets)?;
    let crossings = cubes.quantile_crossings();
    if crossings > 0 {
        eprintln!("warning: {crossings} quantile crossings in the input forecasts");
    }
    let problem = BacktestProblem::assemble(&panel, &split, &cubes, &quantiles)?;
    let result = run_algorithm1(&problem, &pipeline)?;
    write_artifacts(&out_dir, &problem, &result)?;
    print_result(out, &problem, &result)
}

fn resolve_synth(args: &SynthArgs, config: &RunConfig) -> Result<SynthConfig> {
    let defaults = SynthConfig::default();
    let mode = match (args.mode, &config.mode) {
        (Some(m), _) => m.noise(),
        (None, Some(name)) if name == "none" => None,
        (None, Some(name)) => Some(name.parse()?),
        (None, None) => None,
    };
    let learners = match args.learners.as_ref().or(config.learners.as_ref()) {
        Some(list) => parse_learners(list)?,
        None => default_learners(),
    };
    let c = PanelComponents::default();
    Ok(SynthConfig {
        n_items: args.n_items.or(config.n_items).unwrap_or(defaults.n_items),
        len: args.len.or(config.len).unwrap_or(defaults.len),
        horizon: args.common.horizon.or(config.horizon).unwrap_or(defaults.horizon),
        quantiles: resolve_quantiles(&args.common.quantiles, config)?,
        components: PanelComponents {
            level: args.level.or(config.level).unwrap_or(c.level),
            trend: args.trend.or(config.trend).unwrap_or(c.trend),
            season: args.season.or(config.season).unwrap_or(c.season),
            period: args.period.or(config.period).unwrap_or(c.period),
            noise: args.panel_noise.or(config.panel_noise).unwrap_or(c.noise),
        },
        learners,
        noise: mode,
    })
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(&args.common)?;
    let synth = resolve_synth(args, &config)?;
    let pipeline = resolve_pipeline(&args.fit, &config)?;
    let out_dir = require(args.common.out.clone().or(config.out.clone()), "out")?;
    let seed = args.common.seed.or(config.seed).unwrap_or(0);
    let mode_name = synth.noise.map_or("none", NoiseMode::as_str);

    if let Some(reps) = args.oracle_gap.or(config.oracle_gap) {
        let gap = GapConfig {
            synth,
            grid: pipeline.search.grid.clone(),
            fit: pipeline.fit.clone(),
        };
        let report = oracle_gap_experiment(&gap, reps, seed)?;
        let path = out_dir.join("oracle_gap.csv");
        write_gap_report(&path, &report)?;
        writeln!(
            out,
            "mode {mode_name}: median gap {}, median relative gap {}, within 5%: {}/{}, validation dominance: {}/{}",
            sig(report.median_gap(), 6),
            sig(report.median_rel_gap(), 6),
            report.rows.iter().filter(|r| r.rel_gap <= 0.05).count(),
            report.rows.len(),
            report.validation_dominance(),
            report.rows.len()
        )
        .map_err(io_out)?;
        return Ok(());
    }

    let runs = args.runs.or(config.runs).unwrap_or(1);
    if runs == 0 {
        return Err(Error::invalid("--runs must be at least 1"));
    }
    for r in 0..runs {
        let run_seed = seed.wrapping_add(r as u64);
        let data = synth_problem(&synth, run_seed)?;
        let dir = out_dir.join(format!("seed_{run_seed}"));
        write_panel(&dir.join("panel.csv"), &data.panel)?;
        write_cubes(&dir.join("cubes.csv"), &data.cubes, data.panel.items(), &synth.quantiles)?;
        let result = run_algorithm1(&data.problem, &pipeline)?;
        write_artifacts(&dir, &data.problem, &result)?;
        writeln!(out, "run seed {run_seed} (mode {mode_name}): {}", dir.join(COMPARISON_FILE).display())
            .map_err(io_out)?;
        print_result(out, &data.problem, &result)?;
    }
    Ok(())
}

pub fn cmd_bound(args: &BoundArgs, out: &mut dyn Write) -> Result<()> {
    let covering = match (args.finite, args.covering, args.ell, args.radius, args.dim) {
        (Some(size), _, _, _, _) => Covering::Finite(size),
        (None, Some(n), _, _, _) => Covering::Count(n),
        (None, None, Some(lipschitz), Some(radius), Some(dim)) => Covering::Ball {
            lipschitz,
            radius,
            dim,
        },
        _ => {
            return Err(Error::invalid(
                "give --covering, --finite, or all of --ell, --radius and --dim",
            ))
        }
    };
    let inputs = BoundInputs {
        bernstein_m: args.bernstein_m,
        bernstein_v: args.bernstein_v,
        delta: args.delta,
        p: args.p,
        n1: args.n1,
        eps: args.eps,
        mean_loss: args.mean_loss,
        covering,
    };
    let rhs = oracle_rhs(&inputs, args.oracle_loss, args.extra)?;
    let covering_line = match covering {
        Covering::Ball {
            lipschitz,
            radius,
            dim,
        } => format!(
            "{} (derived from ell={lipschitz}, K={radius}, dim={dim}, eps={})",
            sig(rhs.covering, 6),
            args.eps
        ),
        Covering::Finite(size) => format!("{size} (finite family)"),
        Covering::Count(n) => sig(n, 6),
    };
    writeln!(out, "covering N:  {covering_line}").map_err(io_out)?;
    writeln!(out, "oracle term: {}", sig(rhs.oracle_term, 6)).map_err(io_out)?;
    writeln!(out, "B_f term:    {}", sig(rhs.bf_term, 6)).map_err(io_out)?;
    writeln!(out, "eps term:    {}", sig(rhs.eps_term, 6)).map_err(io_out)?;
    writeln!(out, "total:       {}", sig(rhs.total, 6)).map_err(io_out)?;
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(&args.common)?;
    let panel_path = require(args.panel.clone().or(config.panel.clone()), "panel")?;
    let pred_path = require(args.predictions.clone().or(config.predictions.clone()), "predictions")?;
    let horizon = require(args.common.horizon.or(config.horizon), "horizon")?;
    let window = args.window.or(config.window).unwrap_or(NUM_WINDOWS - 1);
    if window >= NUM_WINDOWS {
        return Err(Error::invalid(format!("--window must be 0, 1 or 2, got {window}")));
    }
    let quantiles = resolve_quantiles(&args.common.quantiles, &config)?;
    let panel = load_panel(&panel_path)?;
    let split = make_backtest_splits(&panel, horizon)?;
    let predictions = load_predictions(&pred_path, panel.items(), horizon, &quantiles)?;
    let actuals = split.actuals(&panel, window)?;
    let report = LossReport::compute("predictions", window, predictions.view(), actuals.values.view(), &quantiles)?;
    for (tau, loss) in quantiles.taus().iter().zip(&report.per_quantile) {
        writeln!(out, "tau {tau}: {}", sig(*loss, 6)).map_err(io_out)?;
    }
    writeln!(out, "mean_wql: {}", sig(report.mean_wql, 6)).map_err(io_out)?;
    if let Some(dir) = args.common.out.clone().or(config.out.clone()) {
        write_loss_reports(&dir.join("eval.csv"), &[report], &quantiles)?;
    }
    Ok(())
}
