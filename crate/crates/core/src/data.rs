//! Panels, backtest splits and forecast cubes, plus the CSV formats they are
//! exchanged in.
//!
//! Timestamps are 1-based throughout the public surface, matching the panel
//! file format. Arrays are 0-based internally.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::format::{tau_label, write_csv_atomic};

/// Number of backtest windows carved from the tail of every series.
pub const NUM_WINDOWS: usize = 3;

/// Ordered quantile levels, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSpec {
    taus: Vec<f64>,
}

impl QuantileSpec {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::invalid("at least one quantile level is required"));
        }
        for &t in &taus {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid(format!("quantile level {t} outside (0, 1)")));
            }
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("quantile levels must be strictly increasing"));
        }
        let labels: Vec<String> = taus.iter().map(|&t| tau_label(t)).collect();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(
                "quantile levels must be distinct at six decimals",
            ));
        }
        Ok(Self { taus })
    }

    /// Parses a comma-separated list such as `0.1,0.5,0.9`.
    pub fn parse(list: &str) -> Result<Self> {
        let taus = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad quantile level `{}`", s.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(taus)
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Index of the level whose six-decimal label equals `label`'s.
    pub fn position(&self, tau: f64) -> Option<usize> {
        let label = tau_label(tau);
        self.taus.iter().position(|&t| tau_label(t) == label)
    }
}

impl Default for QuantileSpec {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.5, 0.9],
        }
    }
}

/// `N` equal-length series indexed by item identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    items: Vec<String>,
    values: Array2<f64>,
}

impl PanelDataset {
    pub fn new(items: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("panel has no items"));
        }
        if items.len() != values.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} item identifiers for {} series",
                items.len(),
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::invalid("panel series are empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("panel contains non-finite values"));
        }
        Ok(Self { items, values })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// `N × T` matrix of observations.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observations on the inclusive 1-based range.
    pub fn slice(&self, range: TimeRange) -> ArrayView2<'_, f64> {
        self.values.slice(s![.., range.start - 1..range.end])
    }
}

/// Inclusive, 1-based range of timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub start: usize,
    pub end: usize,
}

impl TimeRange {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

/// The three nested (history, backtest window) pairs taken from the tail of
/// a panel of length `len`: window `n` covers
/// `[len - (3 - n)·h + 1, len - (2 - n)·h]` and its history is everything
/// before it. Window 2 ends at the last observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BacktestSplit {
    len: usize,
    horizon: usize,
}

impl BacktestSplit {
    pub fn new(len: usize, horizon: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::InvalidHorizon(horizon));
        }
        // The earliest window still needs one observation of history.
        let needed = NUM_WINDOWS * horizon + 1;
        if len < needed {
            return Err(Error::SplitTooShort {
                len,
                horizon,
                needed,
            });
        }
        Ok(Self { len, horizon })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn train_range(&self, window: usize) -> TimeRange {
        assert!(window < NUM_WINDOWS, "window index {window} out of range");
        TimeRange {
            start: 1,
            end: self.len - (NUM_WINDOWS - window) * self.horizon,
        }
    }

    pub fn window_range(&self, window: usize) -> TimeRange {
        let train = self.train_range(window);
        TimeRange {
            start: train.end + 1,
            end: train.end + self.horizon,
        }
    }

    pub fn actuals(&self, panel: &PanelDataset, window: usize) -> Result<ActualsWindow> {
        if panel.len() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "split built for length {} applied to panel of length {}",
                self.len,
                panel.len()
            )));
        }
        ActualsWindow::new(window, panel.slice(self.window_range(window)).to_owned())
    }
}

pub fn make_backtest_splits(panel: &PanelDataset, horizon: usize) -> Result<BacktestSplit> {
    BacktestSplit::new(panel.len(), horizon)
}

/// One learner's `N × h × q` quantile predictions on one backtest window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCube {
    pub learner: String,
    pub window: usize,
    pub values: Array3<f64>,
}

impl ForecastCube {
    pub fn new(learner: impl Into<String>, window: usize, values: Array3<f64>) -> Result<Self> {
        let learner = learner.into();
        if window >= NUM_WINDOWS {
            return Err(Error::invalid(format!("window {window} outside 0..=2")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "cube for learner `{learner}` window {window} has non-finite entries"
            )));
        }
        Ok(Self {
            learner,
            window,
            values,
        })
    }

    /// Number of `(i, j, k)` cells where a higher quantile is predicted below
    /// a lower one.
    pub fn quantile_crossings(&self) -> usize {
        let (n, h, q) = self.values.dim();
        let mut count = 0;
        for i in 0..n {
            for j in 0..h {
                for k in 1..q {
                    if self.values[[i, j, k - 1]] > self.values[[i, j, k]] {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

/// Observed values on one backtest window, `N × h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActualsWindow {
    pub window: usize,
    pub values: Array2<f64>,
}

impl ActualsWindow {
    pub fn new(window: usize, values: Array2<f64>) -> Result<Self> {
        if window >= NUM_WINDOWS {
            return Err(Error::invalid(format!("window {window} outside 0..=2")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("actuals contain non-finite values"));
        }
        Ok(Self { window, values })
    }
}

/// Forecast cubes for a set of learners, in learner order of first
/// appearance, each learner with up to one cube per window.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSet {
    learners: Vec<String>,
    cubes: Vec<ForecastCube>,
}

impl CubeSet {
    pub fn new(learners: Vec<String>, mut cubes: Vec<ForecastCube>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &cubes {
            if !learners.contains(&c.learner) {
                return Err(Error::invalid(format!("cube for unknown learner `{}`", c.learner)));
            }
            if !seen.insert((c.learner.clone(), c.window)) {
                return Err(Error::invalid(format!(
                    "duplicate cube for learner `{}` window {}",
                    c.learner, c.window
                )));
            }
        }
        let order: HashMap<&str, usize> = learners
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        cubes.sort_by_key(|c| (order[c.learner.as_str()], c.window));
        Ok(Self { learners, cubes })
    }

    pub fn learners(&self) -> &[String] {
        &self.learners
    }

    pub fn cubes(&self) -> &[ForecastCube] {
        &self.cubes
    }

    pub fn cubes_mut(&mut self) -> &mut [ForecastCube] {
        &mut self.cubes
    }

    pub fn get(&self, learner: usize, window: usize) -> Option<&ForecastCube> {
        let name = self.learners.get(learner)?;
        self.cubes
            .iter()
            .find(|c| &c.learner == name && c.window == window)
    }

    /// Stacks every learner's cube for `window` into an `m × N × h × q` array.
    pub fn stack_window(&self, window: usize) -> Result<Array4<f64>> {
        let mut views = Vec::with_capacity(self.learners.len());
        for (l, name) in self.learners.iter().enumerate() {
            let cube = self.get(l, window).ok_or_else(|| Error::MissingWindow {
                learner: name.clone(),
                window,
            })?;
            views.push(cube.values.view());
        }
        let first = views
            .first()
            .ok_or_else(|| Error::invalid("no learners"))?
            .dim();
        if let Some(v) = views.iter().find(|v| v.dim() != first) {
            return Err(Error::DimensionMismatch(format!(
                "cube shapes {:?} and {:?} differ on window {window}",
                first,
                v.dim()
            )));
        }
        ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))
    }

    pub fn quantile_crossings(&self) -> usize {
        self.cubes.iter().map(ForecastCube::quantile_crossings).sum()
    }
}

/// Stacked predictions and actuals for one backtest window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowData {
    /// `m × N × h × q`
    pub predictions: Array4<f64>,
    /// `N × h`
    pub actuals: Array2<f64>,
}

impl WindowData {
    pub fn new(predictions: Array4<f64>, actuals: Array2<f64>) -> Result<Self> {
        let (m, n, h, q) = predictions.dim();
        if m == 0 || q == 0 {
            return Err(Error::invalid("window has no learners or no quantiles"));
        }
        if actuals.dim() != (n, h) {
            return Err(Error::DimensionMismatch(format!(
                "predictions are {n}×{h} per quantile but actuals are {:?}",
                actuals.dim()
            )));
        }
        Ok(Self {
            predictions,
            actuals,
        })
    }

    pub fn n_learners(&self) -> usize {
        self.predictions.dim().0
    }

    pub fn n_items(&self) -> usize {
        self.predictions.dim().1
    }

    pub fn horizon(&self) -> usize {
        self.predictions.dim().2
    }

    pub fn n_quantiles(&self) -> usize {
        self.predictions.dim().3
    }

    /// Restricts the learner axis to `learners`, in the given order.
    pub fn select_learners(&self, learners: &[usize]) -> WindowData {
        WindowData {
            predictions: self.predictions.select(Axis(0), learners),
            actuals: self.actuals.clone(),
        }
    }
}

/// All three backtest windows for a fixed set of learners and items.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestProblem {
    pub learners: Vec<String>,
    pub items: Vec<String>,
    pub quantiles: QuantileSpec,
    pub windows: [WindowData; NUM_WINDOWS],
}

impl BacktestProblem {
    /// Pairs each window's stacked cubes with the panel's observed values.
    pub fn assemble(
        panel: &PanelDataset,
        split: &BacktestSplit,
        cubes: &CubeSet,
        quantiles: &QuantileSpec,
    ) -> Result<Self> {
        let mut windows = Vec::with_capacity(NUM_WINDOWS);
        for n in 0..NUM_WINDOWS {
            let predictions = cubes.stack_window(n)?;
            let (_, ni, h, q) = predictions.dim();
            if ni != panel.n_items() || h != split.horizon() || q != quantiles.len() {
                return Err(Error::DimensionMismatch(format!(
                    "window {n} cubes are {ni}×{h}×{q}, expected {}×{}×{}",
                    panel.n_items(),
                    split.horizon(),
                    quantiles.len()
                )));
            }
            let actuals = split.actuals(panel, n)?;
            windows.push(WindowData::new(predictions, actuals.values)?);
        }
        let windows: [WindowData; NUM_WINDOWS] = windows
            .try_into()
            .expect("exactly three windows");
        Ok(Self {
            learners: cubes.learners().to_vec(),
            items: panel.items().to_vec(),
            quantiles: quantiles.clone(),
            windows,
        })
    }

    pub fn n_learners(&self) -> usize {
        self.learners.len()
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path, expected_header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected_header {
        return Err(parse_err(
            path,
            1,
            format!(
                "expected header `{}`, found `{}`",
                expected_header.join(","),
                got.join(",")
            ),
        ));
    }
    Ok(reader)
}

fn field<'a>(path: &Path, line: u64, rec: &'a csv::StringRecord, idx: usize, name: &str) -> Result<&'a str> {
    rec.get(idx)
        .ok_or_else(|| parse_err(path, line, format!("missing column `{name}`")))
}

fn parse_value(path: &Path, line: u64, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(path, line, format!("value `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("value `{raw}` is not finite")));
    }
    Ok(v)
}

fn parse_index(path: &Path, line: u64, raw: &str, name: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("{name} `{raw}` is not a non-negative integer")))
}

/// Reads a long-format panel CSV with header `item,t,value`.
pub fn load_panel(path: &Path) -> Result<PanelDataset> {
    let mut reader = open_csv(path, &["item", "t", "value"])?;
    let mut items: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut series: Vec<HashMap<usize, f64>> = Vec::new();

    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let item = field(path, line, &rec, 0, "item")?;
        let t = parse_index(path, line, field(path, line, &rec, 1, "t")?, "timestamp")?;
        if t == 0 {
            return Err(parse_err(path, line, "timestamps are 1-based"));
        }
        let value = parse_value(path, line, field(path, line, &rec, 2, "value")?)?;
        let idx = *index.entry(item.to_string()).or_insert_with(|| {
            items.push(item.to_string());
            series.push(HashMap::new());
            items.len() - 1
        });
        if series[idx].insert(t, value).is_some() {
            return Err(parse_err(
                path,
                line,
                format!("duplicate row for item `{item}` at t={t}"),
            ));
        }
    }
    if items.is_empty() {
        return Err(parse_err(path, 1, "panel file has no rows"));
    }

    let mut lengths = Vec::with_capacity(items.len());
    for (name, s) in items.iter().zip(&series) {
        let len = s.len();
        if let Some(t) = (1..=len).find(|t| !s.contains_key(t)) {
            return Err(Error::invalid(format!(
                "item `{name}` is missing timestamp {t}"
            )));
        }
        lengths.push(len);
    }
    let expected = lengths[0];
    if let Some(i) = lengths.iter().position(|&l| l != expected) {
        return Err(Error::RaggedSeries {
            item: items[i].clone(),
            len: lengths[i],
            expected,
        });
    }

    let mut values = Array2::zeros((items.len(), expected));
    for (i, s) in series.iter().enumerate() {
        for (&t, &v) in s {
            values[[i, t - 1]] = v;
        }
    }
    PanelDataset::new(items, values)
}

pub fn write_panel(path: &Path, panel: &PanelDataset) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record(["item", "t", "value"])?;
        for (i, item) in panel.items().iter().enumerate() {
            for (t, v) in panel.values().row(i).iter().enumerate() {
                w.write_record([item.as_str(), &(t + 1).to_string(), &v.to_string()])?;
            }
        }
        Ok(())
    })
}

/// Reads a long-format cube CSV with header
/// `learner,window,item,step,tau,value`. Every `(learner, window)` group that
/// appears must be dense over `items × 1..=horizon × quantiles`.
pub fn load_cubes(
    path: &Path,
    items: &[String],
    horizon: usize,
    quantiles: &QuantileSpec,
) -> Result<CubeSet> {
    let mut reader = open_csv(path, &["learner", "window", "item", "step", "tau", "value"])?;
    let item_index: HashMap<&str, usize> = items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let shape = (items.len(), horizon, quantiles.len());

    let mut learners: Vec<String> = Vec::new();
    // (learner index, window) -> (values, filled mask)
    let mut groups: Vec<((usize, usize), Array3<f64>, Array3<bool>)> = Vec::new();

    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let learner = field(path, line, &rec, 0, "learner")?;
        let window = parse_index(path, line, field(path, line, &rec, 1, "window")?, "window")?;
        if window >= NUM_WINDOWS {
            return Err(parse_err(path, line, format!("window {window} outside 0..=2")));
        }
        let item = field(path, line, &rec, 2, "item")?;
        let i = *item_index.get(item).ok_or_else(|| {
            Error::DimensionMismatch(format!("{}:{line}: unknown item `{item}`", path.display()))
        })?;
        let step = parse_index(path, line, field(path, line, &rec, 3, "step")?, "step")?;
        if step < 1 || step > horizon {
            return Err(Error::DimensionMismatch(format!(
                "{}:{line}: step {step} outside 1..={horizon}",
                path.display()
            )));
        }
        let tau_raw = field(path, line, &rec, 4, "tau")?;
        let tau: f64 = tau_raw
            .parse()
            .map_err(|_| parse_err(path, line, format!("tau `{tau_raw}` is not a number")))?;
        let k = quantiles.position(tau).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "{}:{line}: tau {tau_raw} is not one of the configured quantile levels",
                path.display()
            ))
        })?;
        let value = parse_value(path, line, field(path, line, &rec, 5, "value")?)?;

        let l = match learners.iter().position(|n| n == learner) {
            Some(l) => l,
            None => {
                learners.push(learner.to_string());
                learners.len() - 1
            }
        };
        let g = match groups.iter().position(|(key, _, _)| *key == (l, window)) {
            Some(g) => g,
            None => {
                groups.push(((l, window), Array3::zeros(shape), Array3::from_elem(shape, false)));
                groups.len() - 1
            }
        };
        let (_, values, filled) = &mut groups[g];
        let cell = [i, step - 1, k];
        if filled[cell] {
            return Err(parse_err(
                path,
                line,
                format!("duplicate row for learner `{learner}` window {window} item `{item}` step {step} tau {tau_raw}"),
            ));
        }
        filled[cell] = true;
        values[cell] = value;
    }

    let mut cubes = Vec::with_capacity(groups.len());
    for ((l, window), values, filled) in groups {
        if let Some((cell, _)) = filled.indexed_iter().find(|(_, &f)| !f) {
            return Err(Error::MissingCell {
                learner: learners[l].clone(),
                window,
                item: items[cell.0].clone(),
                step: cell.1 + 1,
                tau: tau_label(quantiles.taus()[cell.2]),
            });
        }
        cubes.push(ForecastCube::new(learners[l].clone(), window, values)?);
    }
    CubeSet::new(learners, cubes)
}

pub fn write_cubes(
    path: &Path,
    cubes: &CubeSet,
    items: &[String],
    quantiles: &QuantileSpec,
) -> Result<()> {
    let labels: Vec<String> = quantiles.taus().iter().map(|&t| tau_label(t)).collect();
    write_csv_atomic(path, |w| {
        w.write_record(["learner", "window", "item", "step", "tau", "value"])?;
        for cube in cubes.cubes() {
            let window = cube.window.to_string();
            for ((i, j, k), v) in cube.values.indexed_iter() {
                w.write_record([
                    cube.learner.as_str(),
                    &window,
                    &items[i],
                    &(j + 1).to_string(),
                    &labels[k],
                    &v.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

/// Writes an `N × h × q` prediction tensor as `item,step,tau,value` rows.
pub fn write_predictions(
    path: &Path,
    predictions: &Array3<f64>,
    items: &[String],
    quantiles: &QuantileSpec,
) -> Result<()> {
    let (n, _, q) = predictions.dim();
    if n != items.len() || q != quantiles.len() {
        return Err(Error::DimensionMismatch(format!(
            "predictions {:?} for {} items and {} quantiles",
            predictions.dim(),
            items.len(),
            quantiles.len()
        )));
    }
    let labels: Vec<String> = quantiles.taus().iter().map(|&t| tau_label(t)).collect();
    write_csv_atomic(path, |w| {
        w.write_record(["item", "step", "tau", "value"])?;
        for ((i, j, k), v) in predictions.indexed_iter() {
            w.write_record([items[i].as_str(), &(j + 1).to_string(), &labels[k], &v.to_string()])?;
        }
        Ok(())
    })
}

/// Reads an `item,step,tau,value` prediction file into a dense
/// `N × h × q` tensor.
pub fn load_predictions(
    path: &Path,
    items: &[String],
    horizon: usize,
    quantiles: &QuantileSpec,
) -> Result<Array3<f64>> {
    let mut reader = open_csv(path, &["item", "step", "tau", "value"])?;
    let item_index: HashMap<&str, usize> = items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let shape = (items.len(), horizon, quantiles.len());
    let mut values = Array3::zeros(shape);
    let mut filled = Array3::from_elem(shape, false);
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let item = field(path, line, &rec, 0, "item")?;
        let i = *item_index.get(item).ok_or_else(|| {
            Error::DimensionMismatch(format!("{}:{line}: unknown item `{item}`", path.display()))
        })?;
        let step = parse_index(path, line, field(path, line, &rec, 1, "step")?, "step")?;
        if step < 1 || step > horizon {
            return Err(Error::DimensionMismatch(format!(
                "{}:{line}: step {step} outside 1..={horizon}",
                path.display()
            )));
        }
        let tau_raw = field(path, line, &rec, 2, "tau")?;
        let tau: f64 = tau_raw
            .parse()
            .map_err(|_| parse_err(path, line, format!("tau `{tau_raw}` is not a number")))?;
        let k = quantiles.position(tau).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "{}:{line}: tau {tau_raw} is not one of the configured quantile levels",
                path.display()
            ))
        })?;
        let cell = [i, step - 1, k];
        if filled[cell] {
            return Err(parse_err(path, line, format!("duplicate row for item `{item}` step {step} tau {tau_raw}")));
        }
        filled[cell] = true;
        values[cell] = parse_value(path, line, field(path, line, &rec, 3, "value")?)?;
    }
    if let Some((cell, _)) = filled.indexed_iter().find(|(_, &f)| !f) {
        return Err(Error::invalid(format!(
            "{}: no prediction for item `{}` step {} tau {}",
            path.display(),
            items[cell.0],
            cell.1 + 1,
            tau_label(quantiles.taus()[cell.2])
        )));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    /// Enumerates the window timestamps one by one, independent of the
    /// range arithmetic in `BacktestSplit`.
    fn brute_force_windows(len: usize, h: usize) -> Vec<Vec<usize>> {
        let all: Vec<usize> = (1..=len).collect();
        let mut out = Vec::new();
        for n in 0..NUM_WINDOWS {
            // the last `(3 - n)` blocks of h timestamps, take the first block
            let tail: Vec<usize> = all.iter().rev().take((NUM_WINDOWS - n) * h).rev().copied().collect();
            out.push(tail.into_iter().take(h).collect());
        }
        out
    }

    #[test]
    fn split_matches_brute_force_enumeration() {
        for len in 1..40 {
            for h in 1..8 {
                match BacktestSplit::new(len, h) {
                    Ok(split) => {
                        let expected = brute_force_windows(len, h);
                        for n in 0..NUM_WINDOWS {
                            let r = split.window_range(n);
                            let got: Vec<usize> = (r.start..=r.end).collect();
                            assert_eq!(got, expected[n], "len={len} h={h} n={n}");
                            let train = split.train_range(n);
                            assert_eq!(train.start, 1);
                            assert_eq!(train.end + 1, r.start);
                        }
                    }
                    Err(Error::SplitTooShort { .. }) => assert!(len <= 3 * h),
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
    }

    #[test]
    fn split_worked_examples() {
        let split = BacktestSplit::new(40, 10).unwrap();
        assert_eq!(split.train_range(0), TimeRange { start: 1, end: 10 });
        assert_eq!(split.window_range(0), TimeRange { start: 11, end: 20 });
        assert_eq!(split.train_range(1), TimeRange { start: 1, end: 20 });
        assert_eq!(split.window_range(1), TimeRange { start: 21, end: 30 });
        assert_eq!(split.train_range(2), TimeRange { start: 1, end: 30 });
        assert_eq!(split.window_range(2), TimeRange { start: 31, end: 40 });

        assert!(matches!(
            BacktestSplit::new(30, 10),
            Err(Error::SplitTooShort { len: 30, horizon: 10, .. })
        ));
        assert!(matches!(BacktestSplit::new(30, 0), Err(Error::InvalidHorizon(0))));
    }

    #[test]
    fn quantile_spec_validation() {
        assert!(QuantileSpec::new(vec![0.1, 0.5, 0.9]).is_ok());
        assert!(QuantileSpec::new(vec![]).is_err());
        assert!(QuantileSpec::new(vec![0.0, 0.5]).is_err());
        assert!(QuantileSpec::new(vec![0.5, 1.0]).is_err());
        assert!(QuantileSpec::new(vec![0.5, 0.1]).is_err());
        assert!(QuantileSpec::new(vec![0.5, 0.5]).is_err());
        assert_eq!(QuantileSpec::parse("0.1, 0.5,0.9").unwrap(), QuantileSpec::default());
    }

    #[test]
    fn load_panel_complete() {
        let mut csv = String::from("item,t,value\n");
        for item in ["a", "b"] {
            for t in 1..=5 {
                csv.push_str(&format!("{item},{t},{}\n", t as f64 * 1.5));
            }
        }
        let f = write_tmp(&csv);
        let panel = load_panel(f.path()).unwrap();
        assert_eq!(panel.n_items(), 2);
        assert_eq!(panel.len(), 5);
        assert_eq!(panel.items(), ["a", "b"]);
        assert_eq!(panel.values()[[1, 4]], 7.5);
    }

    #[test]
    fn load_panel_items_in_first_appearance_order() {
        let f = write_tmp("item,t,value\nz,2,1\ny,1,3\nz,1,2\ny,2,4\n");
        let panel = load_panel(f.path()).unwrap();
        assert_eq!(panel.items(), ["z", "y"]);
        assert_eq!(panel.values().row(0).to_vec(), vec![2.0, 1.0]);
    }

    #[test]
    fn load_panel_ragged() {
        let mut csv = String::from("item,t,value\n");
        for t in 1..=5 {
            csv.push_str(&format!("A,{t},1\n"));
        }
        for t in 1..=4 {
            csv.push_str(&format!("B,{t},1\n"));
        }
        let f = write_tmp(&csv);
        match load_panel(f.path()) {
            Err(Error::RaggedSeries { item, len, expected }) => {
                assert_eq!((item.as_str(), len, expected), ("B", 4, 5));
            }
            other => panic!("expected RaggedSeries, got {other:?}"),
        }
    }

    #[test]
    fn load_panel_duplicate_row() {
        let f = write_tmp("item,t,value\na,1,1\na,2,2\na,1,3\n");
        match load_panel(f.path()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("duplicate") && message.contains("t=1"), "{message}");
            }
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn load_panel_gap_and_bad_values() {
        let f = write_tmp("item,t,value\na,1,1\na,3,2\n");
        assert!(matches!(load_panel(f.path()), Err(Error::InvalidInput(_))));
        let f = write_tmp("item,t,value\na,1,abc\n");
        assert!(matches!(load_panel(f.path()), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("id,t,value\na,1,1\n");
        assert!(matches!(load_panel(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    fn dense_cube_csv(learners: &[&str], windows: &[usize], items: &[&str], h: usize, taus: &[&str]) -> String {
        let mut csv = String::from("learner,window,item,step,tau,value\n");
        for l in learners {
            for w in windows {
                for it in items {
                    for j in 1..=h {
                        for t in taus {
                            csv.push_str(&format!("{l},{w},{it},{j},{t},{}\n", j as f64));
                        }
                    }
                }
            }
        }
        csv
    }

    #[test]
    fn load_cubes_dense() {
        let csv = dense_cube_csv(&["ets", "arima"], &[0, 1, 2], &["a", "b"], 2, &["0.1", "0.5", "0.9"]);
        let f = write_tmp(&csv);
        let items = vec!["a".to_string(), "b".to_string()];
        let set = load_cubes(f.path(), &items, 2, &QuantileSpec::default()).unwrap();
        assert_eq!(set.cubes().len(), 6);
        assert_eq!(set.learners(), ["ets", "arima"]);
        assert_eq!(set.stack_window(1).unwrap().dim(), (2, 2, 2, 3));
        assert_eq!(set.quantile_crossings(), 0);
    }

    #[test]
    fn load_cubes_missing_cell() {
        let csv = dense_cube_csv(&["ets"], &[0], &["a"], 2, &["0.1", "0.5", "0.9"]);
        let trimmed: String = csv
            .lines()
            .filter(|l| *l != "ets,0,a,2,0.5,2")
            .map(|l| format!("{l}\n"))
            .collect();
        let f = write_tmp(&trimmed);
        match load_cubes(f.path(), &["a".to_string()], 2, &QuantileSpec::default()) {
            Err(Error::MissingCell { learner, window, item, step, tau }) => {
                assert_eq!((learner.as_str(), window, item.as_str(), step, tau.as_str()), ("ets", 0, "a", 2, "0.5"));
            }
            other => panic!("expected MissingCell, got {other:?}"),
        }
    }

    #[test]
    fn load_cubes_stray_tau() {
        let csv = dense_cube_csv(&["ets"], &[0], &["a"], 1, &["0.1", "0.5", "0.75"]);
        let f = write_tmp(&csv);
        match load_cubes(f.path(), &["a".to_string()], 1, &QuantileSpec::default()) {
            Err(Error::DimensionMismatch(msg)) => assert!(msg.contains("0.75"), "{msg}"),
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_window_is_reported() {
        let csv = dense_cube_csv(&["ets"], &[0, 2], &["a"], 1, &["0.1", "0.5", "0.9"]);
        let f = write_tmp(&csv);
        let set = load_cubes(f.path(), &["a".to_string()], 1, &QuantileSpec::default()).unwrap();
        assert!(matches!(
            set.stack_window(1),
            Err(Error::MissingWindow { window: 1, .. })
        ));
    }

    #[test]
    fn crossing_quantiles_are_counted_not_rejected() {
        let values = Array3::from_shape_vec((1, 1, 3), vec![5.0, 4.0, 6.0]).unwrap();
        let cube = ForecastCube::new("x", 0, values).unwrap();
        assert_eq!(cube.quantile_crossings(), 1);
    }
}
