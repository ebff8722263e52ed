//! Forecast scoring: latitude-weighted RMSE, the persistence baseline,
//! windowed forecast experiments, and delay-depth sweeps.
//!
//! The metric treats each (sample, variable) pair as one field: the
//! weighted spatial mean square is rooted per field, then field scores
//! are averaged arithmetically over batch and channels.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{denormalize_tensor, LatitudeWeights, VarStats};
use crate::error::{Error, Result};
use crate::rom::{fit_delay_rom, DelayRom, LatentCoder, LatentSequence};
use crate::tensor::Tensor;

// ───────────────────────── latitude-weighted rmse ─────────────────────────

fn check_pair(x: &Tensor, xhat: &Tensor, weights: &LatitudeWeights) -> Result<[usize; 4]> {
    if x.shape() != xhat.shape() {
        return Err(Error::shape(
            "lw_rmse",
            format!("field shapes differ: {:?} vs {:?}", x.shape(), xhat.shape()),
        ));
    }
    let exts: [usize; 4] = match x.rank() {
        3 => [1, x.shape()[0], x.shape()[1], x.shape()[2]],
        4 => [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]],
        _ => {
            return Err(Error::shape(
                "lw_rmse",
                format!("expected [C, H, W] or [B, C, H, W], got {:?}", x.shape()),
            ))
        }
    };
    if weights.len() != exts[2] {
        return Err(Error::shape(
            "lw_rmse",
            format!("{} latitude weights for {} rows", weights.len(), exts[2]),
        ));
    }
    Ok(exts)
}

/// Weighted RMSE of one `H x W` slice: `sqrt(mean_i w(phi_i) e_i^2)`.
fn slice_score(x: &[f64], xhat: &[f64], w: &[f64], width: usize) -> f64 {
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        let row = &x[i * width..(i + 1) * width];
        let row_hat = &xhat[i * width..(i + 1) * width];
        let mut row_acc = 0.0;
        for (a, b) in row.iter().zip(row_hat) {
            let e = a - b;
            row_acc += e * e;
        }
        acc += wi * row_acc;
    }
    (acc / (w.len() * width) as f64).sqrt()
}

/// Latitude-weighted RMSE between equal-shaped `[C, H, W]` fields or
/// `[B, C, H, W]` stacks: per-field scores averaged over batch and
/// channels.
pub fn lw_rmse(x: &Tensor, xhat: &Tensor, weights: &LatitudeWeights) -> Result<f64> {
    let per = lw_rmse_per_variable(x, xhat, weights)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-variable latitude-weighted RMSE (length `C`), averaged over the
/// batch for stacks.
pub fn lw_rmse_per_variable(
    x: &Tensor,
    xhat: &Tensor,
    weights: &LatitudeWeights,
) -> Result<Vec<f64>> {
    let [b, c, h, w] = check_pair(x, xhat, weights)?;
    let plane = h * w;
    let mut per = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            per[ci] += slice_score(
                &x.data()[off..off + plane],
                &xhat.data()[off..off + plane],
                weights.values(),
                w,
            );
        }
    }
    for v in &mut per {
        *v /= b as f64;
    }
    Ok(per)
}

// ───────────────────────── persistence baseline ─────────────────────────

/// Repeats the initial `[C, H, W]` snapshot `t` times: the naive
/// "weather stays put" forecast every model has to beat.
pub fn persistence_baseline(initial: &Tensor, t: usize) -> Result<Tensor> {
    if initial.rank() != 3 {
        return Err(Error::shape(
            "persistence_baseline",
            format!("expected [C, H, W], got {:?}", initial.shape()),
        ));
    }
    if t == 0 {
        return Err(Error::Config("persistence horizon must be at least 1".into()));
    }
    let mut data = Vec::with_capacity(t * initial.data().len());
    for _ in 0..t {
        data.extend_from_slice(initial.data());
    }
    let mut shape = vec![t];
    shape.extend_from_slice(initial.shape());
    Tensor::new(shape, data)
}


// ───────────────────────── experiment harness ─────────────────────────

/// Which segment of the timeline forecasts are scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// Windows and targets lie entirely inside the training window.
    InWindow,
    /// Windows and targets lie entirely in the held-out future.
    OutOfWindow,
    /// Initial window observed, horizon straddles the holdout boundary.
    Transition,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::InWindow => "in_window",
            Self::OutOfWindow => "out_of_window",
            Self::Transition => "transition",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "in_window" => Ok(Self::InWindow),
            "out_of_window" => Ok(Self::OutOfWindow),
            "transition" => Ok(Self::Transition),
            other => Err(Error::Config(format!(
                "unknown experiment kind '{}'; expected in_window, out_of_window or transition",
                other
            ))),
        }
    }
}

/// A scoring view over a time-ordered field stack `[T, C, H, W]`.
/// `boundary` is the index of the first held-out "future" snapshot;
/// everything before it is the training window. Scores are in the
/// units of the stored fields unless physical statistics are attached.
pub struct EvalData<'a> {
    fields: &'a Tensor,
    variables: Vec<String>,
    weights: LatitudeWeights,
    boundary: usize,
    physical: Option<Vec<VarStats>>,
}

fn csv_safe(text: &str, what: &str) -> Result<()> {
    if text.contains(',') || text.contains('\n') || text.contains('#') {
        return Err(Error::Data(format!(
            "{} '{}' would corrupt the report csv (no commas, hashes or newlines)",
            what, text
        )));
    }
    Ok(())
}

impl<'a> EvalData<'a> {
    pub fn new(
        fields: &'a Tensor,
        variables: &[String],
        weights: &LatitudeWeights,
        boundary: usize,
    ) -> Result<Self> {
        if fields.rank() != 4 {
            return Err(Error::shape(
                "eval_data",
                format!("expected fields [T, C, H, W], got {:?}", fields.shape()),
            ));
        }
        let [t, c, h, _w] = [
            fields.shape()[0],
            fields.shape()[1],
            fields.shape()[2],
            fields.shape()[3],
        ];
        if t < 2 {
            return Err(Error::Data("evaluation needs at least 2 snapshots".into()));
        }
        if variables.len() != c {
            return Err(Error::shape(
                "eval_data",
                format!("{} variable names for {} channels", variables.len(), c),
            ));
        }
        for name in variables {
            csv_safe(name, "variable name")?;
        }
        if weights.len() != h {
            return Err(Error::shape(
                "eval_data",
                format!("{} latitude weights for {} rows", weights.len(), h),
            ));
        }
        if boundary == 0 || boundary > t {
            return Err(Error::Data(format!(
                "holdout boundary {} outside the {}-snapshot timeline",
                boundary, t
            )));
        }
        Ok(Self {
            fields,
            variables: variables.to_vec(),
            weights: weights.clone(),
            boundary,
            physical: None,
        })
    }

    /// Attach per-variable statistics; scores are then reported in
    /// physical units (fields are de-standardized before scoring).
    pub fn in_physical_units(mut self, stats: &[VarStats]) -> Result<Self> {
        if stats.len() != self.channels() {
            return Err(Error::shape(
                "eval_data",
                format!("{} statistics for {} channels", stats.len(), self.channels()),
            ));
        }
        self.physical = Some(stats.to_vec());
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.fields.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.fields.shape()[1]
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn field_shape(&self) -> [usize; 3] {
        [self.fields.shape()[1], self.fields.shape()[2], self.fields.shape()[3]]
    }

    fn plane(&self) -> usize {
        self.fields.data().len() / self.steps()
    }

    /// Snapshot `t` as a `[C, H, W]` tensor.
    fn field_row(&self, t: usize) -> Result<Tensor> {
        if t >= self.steps() {
            return Err(Error::Data(format!(
                "snapshot {} requested from a {}-snapshot timeline",
                t,
                self.steps()
            )));
        }
        let per = self.plane();
        Tensor::new(
            self.field_shape().to_vec(),
            self.fields.data()[t * per..(t + 1) * per].to_vec(),
        )
    }

    /// Rows `t0-d+1 ..= t0` as `[d, C, H, W]`, oldest first.
    fn window(&self, t0: usize, d: usize) -> Result<Tensor> {
        let first = t0 + 1 - d;
        let per = self.plane();
        let [c, h, w] = self.field_shape();
        Tensor::new(
            vec![d, c, h, w],
            self.fields.data()[first * per..(t0 + 1) * per].to_vec(),
        )
    }

    /// Arbitrary rows as a `[B, C, H, W]` stack.
    fn gather(&self, rows: &[usize]) -> Result<Tensor> {
        let per = self.plane();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &t in rows {
            if t >= self.steps() {
                return Err(Error::Data(format!(
                    "snapshot {} requested from a {}-snapshot timeline",
                    t,
                    self.steps()
                )));
            }
            data.extend_from_slice(&self.fields.data()[t * per..(t + 1) * per]);
        }
        let [c, h, w] = self.field_shape();
        Tensor::new(vec![rows.len(), c, h, w], data)
    }

    /// Per-variable LW-RMSE between prediction and truth, in the
    /// configured units.
    fn score(&self, pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
        match &self.physical {
            None => lw_rmse_per_variable(truth, pred, &self.weights),
            Some(stats) => {
                let p = denormalize_tensor(pred, stats)?;
                let t = denormalize_tensor(truth, stats)?;
                lw_rmse_per_variable(&t, &p, &self.weights)
            }
        }
    }
}

/// Geometry and identification of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub num_starts: usize,
    /// Steps between consecutive start indices.
    pub spacing: usize,
    /// Forecast leads per start.
    pub horizon: usize,
    /// Delay depth; must match the operator.
    pub d: usize,
    /// Seed echoed into the report (evaluation itself is deterministic).
    pub seed: u64,
    pub coder_id: String,
    pub rom_id: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_starts: 10,
            spacing: 8,
            horizon: 32,
            d: 3,
            seed: 0,
            coder_id: String::new(),
            rom_id: String::new(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.num_starts == 0 || self.horizon == 0 || self.d == 0 {
            return Err(Error::Config(
                "experiment needs at least one start, one lead and one delay".into(),
            ));
        }
        if self.num_starts > 1 && self.spacing == 0 {
            return Err(Error::Config("start spacing must be positive".into()));
        }
        csv_safe(&self.coder_id, "coder id")?;
        csv_safe(&self.rom_id, "operator id")?;
        Ok(())
    }
}

/// Newest-window indices for each start. A start `t0` means the model
/// observes rows `t0-d+1 ..= t0` and is scored on `t0+1 ..= t0+horizon`.
fn start_indices(
    kind: ExperimentKind,
    t_total: usize,
    boundary: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<usize>> {
    let (d, h) = (cfg.d, cfg.horizon);
    let mut out = Vec::with_capacity(cfg.num_starts);
    match kind {
        ExperimentKind::InWindow => {
            // Entire trajectory inside [0, boundary).
            if boundary < d + h {
                return Err(Error::Data(format!(
                    "insufficient data: training window of {} steps cannot host d={} plus horizon {}",
                    boundary, d, h
                )));
            }
            let last_ok = boundary - 1 - h;
            for j in 0..cfg.num_starts {
                let t0 = d - 1 + j * cfg.spacing;
                if t0 > last_ok {
                    return Err(Error::Data(format!(
                        "insufficient data: start {} of {} lands at index {} but the last in-window start is {}",
                        j + 1,
                        cfg.num_starts,
                        t0,
                        last_ok
                    )));
                }
                out.push(t0);
            }
        }
        ExperimentKind::OutOfWindow => {
            // Entire trajectory inside [boundary, t_total).
            if t_total - boundary < d + h {
                return Err(Error::Data(format!(
                    "insufficient data: holdout of {} steps cannot host d={} plus horizon {}",
                    t_total - boundary,
                    d,
                    h
                )));
            }
            let last_ok = t_total - 1 - h;
            for j in 0..cfg.num_starts {
                let t0 = boundary + d - 1 + j * cfg.spacing;
                if t0 > last_ok {
                    return Err(Error::Data(format!(
                        "insufficient data: start {} of {} lands at index {} but the last out-of-window start is {}",
                        j + 1,
                        cfg.num_starts,
                        t0,
                        last_ok
                    )));
                }
                out.push(t0);
            }
        }
        ExperimentKind::Transition => {
            // Window observed, targets on both sides of the boundary. The
            // first start puts the boundary mid-horizon; further starts
            // step back while keeping at least one post-boundary lead.
            if h < 2 {
                return Err(Error::Config(
                    "transition horizon must be at least 2 so leads fall on both sides".into(),
                ));
            }
            for j in 0..cfg.num_starts {
                let offset = h / 2 + j * cfg.spacing;
                if offset > h - 1 {
                    return Err(Error::Data(format!(
                        "insufficient data: transition start {} of {} has no post-boundary lead left",
                        j + 1,
                        cfg.num_starts
                    )));
                }
                if boundary < offset + d {
                    return Err(Error::Data(format!(
                        "insufficient data: transition start {} of {} reaches before the timeline",
                        j + 1,
                        cfg.num_starts
                    )));
                }
                let t0 = boundary - 1 - offset;
                if t0 + h > t_total - 1 {
                    return Err(Error::Data(format!(
                        "insufficient data: transition horizon overruns the timeline ({} of {} steps)",
                        t0 + h,
                        t_total
                    )));
                }
                out.push(t0);
            }
        }
    }
    Ok(out)
}

/// Averaged forecast scores for one experiment: per-variable, per-lead
/// model and persistence curves plus the coder's reconstruction floor.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastReport {
    /// `in_window`, `out_of_window` or `transition`.
    pub label: String,
    pub variables: Vec<String>,
    pub horizon: usize,
    /// `curves[c][l]` is the mean LW-RMSE of variable `c` at lead `l+1`.
    pub curves: Vec<Vec<f64>>,
    /// Persistence-baseline scores on the same grid.
    pub baselines: Vec<Vec<f64>>,
    /// Per-variable encode-decode error over all scored snapshots.
    pub floors: Vec<f64>,
    pub d: usize,
    pub latent_dim: usize,
    pub coder_id: String,
    pub rom_id: String,
    pub seed: u64,
    pub num_starts: usize,
    /// For transition runs: per start, how many leads precede the
    /// boundary. Empty otherwise.
    pub pre_boundary_leads: Vec<usize>,
}

impl ForecastReport {
    fn validate(&self) -> Result<()> {
        ExperimentKind::from_label(&self.label)?;
        let c = self.variables.len();
        if c == 0 || self.curves.len() != c || self.baselines.len() != c || self.floors.len() != c
        {
            return Err(Error::Data("report is missing per-variable entries".into()));
        }
        for curve in self.curves.iter().chain(&self.baselines) {
            if curve.len() != self.horizon {
                return Err(Error::Data(format!(
                    "curve length {} does not match horizon {}",
                    curve.len(),
                    self.horizon
                )));
            }
            if curve.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Data("report scores must be finite and non-negative".into()));
            }
        }
        if self.floors.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("report floors must be finite and non-negative".into()));
        }
        if !self.pre_boundary_leads.is_empty() && self.label != "transition" {
            return Err(Error::Data(
                "only transition reports carry a boundary split".into(),
            ));
        }
        Ok(())
    }

    /// Arithmetic mean over every (variable, lead) cell.
    pub fn mean_lw_rmse(&self) -> f64 {
        let cells = self.curves.len() * self.horizon;
        self.curves.iter().flatten().sum::<f64>() / cells as f64
    }

    /// Transition runs with a consistent split: mean score over leads
    /// before the boundary and over leads at or past it.
    pub fn boundary_split_means(&self) -> Option<(f64, f64)> {
        let k = *self.pre_boundary_leads.first()?;
        if self.pre_boundary_leads.iter().any(|&v| v != k) || k == 0 || k >= self.horizon {
            return None;
        }
        let mut pre = 0.0;
        let mut post = 0.0;
        for curve in &self.curves {
            pre += curve[..k].iter().sum::<f64>() / k as f64;
            post += curve[k..].iter().sum::<f64>() / (self.horizon - k) as f64;
        }
        let c = self.curves.len() as f64;
        Some((pre / c, post / c))
    }
}

/// Runs one experiment: forecasts from evenly spaced starts, scored
/// per lead against the stored truth and averaged arithmetically.
/// Starts are evaluated in parallel; the averaging order is fixed, so
/// results do not depend on the thread count.
pub fn run_experiment<C: LatentCoder + Sync + ?Sized>(
    kind: ExperimentKind,
    coder: &C,
    rom: &DelayRom,
    data: &EvalData,
    cfg: &ExperimentConfig,
) -> Result<ForecastReport> {
    cfg.validate()?;
    if coder.latent_dim() != rom.n() {
        return Err(Error::Config(format!(
            "latent dimension mismatch: coder produces {}, operator expects {}",
            coder.latent_dim(),
            rom.n()
        )));
    }
    if coder.field_shape() != data.field_shape() {
        return Err(Error::shape(
            "run_experiment",
            format!(
                "coder works on {:?} fields but the dataset holds {:?}",
                coder.field_shape(),
                data.field_shape()
            ),
        ));
    }
    if cfg.d != rom.d() {
        return Err(Error::Config(format!(
            "configured delay depth {} does not match the operator's {}",
            cfg.d,
            rom.d()
        )));
    }
    let starts = start_indices(kind, data.steps(), data.boundary, cfg)?;

    let per_start: Result<Vec<_>> = starts
        .par_iter()
        .map(|&t0| eval_start(coder, rom, data, t0, cfg.horizon))
        .collect();
    let per_start = per_start?;

    let c = data.channels();
    let mut curves = vec![vec![0.0; cfg.horizon]; c];
    let mut baselines = vec![vec![0.0; cfg.horizon]; c];
    for (model, pers) in &per_start {
        for ci in 0..c {
            for l in 0..cfg.horizon {
                curves[ci][l] += model[ci][l];
                baselines[ci][l] += pers[ci][l];
            }
        }
    }
    let n = starts.len() as f64;
    for curve in curves.iter_mut().chain(baselines.iter_mut()) {
        for v in curve.iter_mut() {
            *v /= n;
        }
    }

    let floors = reconstruction_floor(coder, data, &starts, cfg.horizon)?;
    let pre_boundary_leads = if kind == ExperimentKind::Transition {
        starts.iter().map(|&t0| data.boundary - 1 - t0).collect()
    } else {
        Vec::new()
    };

    let report = ForecastReport {
        label: kind.label().to_string(),
        variables: data.variables.clone(),
        horizon: cfg.horizon,
        curves,
        baselines,
        floors,
        d: cfg.d,
        latent_dim: rom.n(),
        coder_id: cfg.coder_id.clone(),
        rom_id: cfg.rom_id.clone(),
        seed: cfg.seed,
        num_starts: starts.len(),
        pre_boundary_leads,
    };
    report.validate()?;
    Ok(report)
}

/// Model and persistence curves for a single start, `[C][horizon]`.
fn eval_start<C: LatentCoder + ?Sized>(
    coder: &C,
    rom: &DelayRom,
    data: &EvalData,
    t0: usize,
    horizon: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let window = data.window(t0, rom.d())?;
    let fc = crate::rom::forecast(coder, rom, &window, horizon)?;
    let pers = persistence_baseline(&data.field_row(t0)?, horizon)?;
    let c = data.channels();
    let per = data.plane();
    let shape = data.field_shape().to_vec();
    let mut model_curves = vec![vec![0.0; horizon]; c];
    let mut pers_curves = vec![vec![0.0; horizon]; c];
    for lead in 1..=horizon {
        let truth = data.field_row(t0 + lead)?;
        let off = (lead - 1) * per;
        let pred = Tensor::new(shape.clone(), fc.data()[off..off + per].to_vec())?;
        let base = Tensor::new(shape.clone(), pers.data()[off..off + per].to_vec())?;
        for (ci, v) in data.score(&pred, &truth)?.into_iter().enumerate() {
            model_curves[ci][lead - 1] = v;
        }
        for (ci, v) in data.score(&base, &truth)?.into_iter().enumerate() {
            pers_curves[ci][lead - 1] = v;
        }
    }
    Ok((model_curves, pers_curves))
}

/// Encode-decode error of the coder over every snapshot any start is
/// scored on: the part of the forecast error that is not dynamics.
fn reconstruction_floor<C: LatentCoder + ?Sized>(
    coder: &C,
    data: &EvalData,
    starts: &[usize],
    horizon: usize,
) -> Result<Vec<f64>> {
    let mut targets = BTreeSet::new();
    for &t0 in starts {
        for lead in 1..=horizon {
            targets.insert(t0 + lead);
        }
    }
    let rows: Vec<usize> = targets.into_iter().collect();
    let c = data.channels();
    let mut acc = vec![0.0; c];
    for chunk in rows.chunks(128) {
        let batch = data.gather(chunk)?;
        let latents = coder.encode_batch(&batch)?;
        let recon = coder.decode_batch(&latents)?;
        for (a, v) in acc.iter_mut().zip(data.score(&recon, &batch)?) {
            *a += v * chunk.len() as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / rows.len() as f64).collect())
}

// ───────────────────────── report csv ─────────────────────────

const REPORT_HEADER: &str = "variable,lead_steps,lw_rmse,baseline_lw_rmse,floor";

impl ForecastReport {
    /// Renders the report with `# key=value` metadata lines followed by
    /// one row per (variable, lead). Lossless: floats print in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# label={}", self.label);
        let _ = writeln!(out, "# d={}", self.d);
        let _ = writeln!(out, "# n={}", self.latent_dim);
        let _ = writeln!(out, "# coder={}", self.coder_id);
        let _ = writeln!(out, "# rom={}", self.rom_id);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# num_starts={}", self.num_starts);
        let _ = writeln!(out, "# horizon={}", self.horizon);
        if !self.pre_boundary_leads.is_empty() {
            let joined: Vec<String> =
                self.pre_boundary_leads.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "# pre_boundary_leads={}", joined.join(";"));
        }
        out.push_str(REPORT_HEADER);
        out.push('\n');
        for (ci, var) in self.variables.iter().enumerate() {
            for lead in 1..=self.horizon {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    var,
                    lead,
                    self.curves[ci][lead - 1],
                    self.baselines[ci][lead - 1],
                    self.floors[ci]
                );
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = std::collections::BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, line)) = lines.peek() {
            let Some(rest) = line.strip_prefix("# ") else { break };
            let (key, value) = rest.split_once('=').ok_or_else(|| {
                Error::Data(format!("report metadata line '{}' is not key=value", rest))
            })?;
            meta.insert(key.to_string(), value.to_string());
            lines.next();
        }
        let need = |key: &str| {
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::Data(format!("report is missing '# {}=' metadata", key)))
        };
        let int = |key: &str| -> Result<usize> {
            need(key)?.parse().map_err(|_| {
                Error::Data(format!("report metadata '{}' is not an integer", key))
            })
        };
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            other => {
                return Err(Error::Data(format!(
                    "report header should be '{}', got {:?}",
                    REPORT_HEADER,
                    other.map(|(_, l)| l)
                )))
            }
        }
        let horizon = int("horizon")?;
        let mut variables: Vec<String> = Vec::new();
        let mut curves: Vec<Vec<f64>> = Vec::new();
        let mut baselines: Vec<Vec<f64>> = Vec::new();
        let mut floors: Vec<f64> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::Data(format!(
                    "report line {} has {} columns, expected 5",
                    i + 1,
                    cols.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse().map_err(|_| {
                    Error::Data(format!("report line {}: bad {} '{}'", i + 1, what, s))
                })
            };
            let lead: usize = cols[1].trim().parse().map_err(|_| {
                Error::Data(format!("report line {}: bad lead '{}'", i + 1, cols[1]))
            })?;
            if variables.last().map(String::as_str) != Some(cols[0]) {
                variables.push(cols[0].to_string());
                curves.push(Vec::with_capacity(horizon));
                baselines.push(Vec::with_capacity(horizon));
                floors.push(parse(cols[4], "floor")?);
            }
            let ci = variables.len() - 1;
            if lead != curves[ci].len() + 1 {
                return Err(Error::Data(format!(
                    "report line {}: lead {} out of order for variable {}",
                    i + 1,
                    lead,
                    cols[0]
                )));
            }
            curves[ci].push(parse(cols[2], "score")?);
            baselines[ci].push(parse(cols[3], "baseline")?);
            let floor = parse(cols[4], "floor")?;
            if floor.to_bits() != floors[ci].to_bits() {
                return Err(Error::Data(format!(
                    "report line {}: floor changed mid-variable",
                    i + 1
                )));
            }
        }
        let pre_boundary_leads = match meta.get("pre_boundary_leads") {
            None => Vec::new(),
            Some(text) => text
                .split(';')
                .map(|v| {
                    v.parse().map_err(|_| {
                        Error::Data(format!("bad pre_boundary_leads entry '{}'", v))
                    })
                })
                .collect::<Result<Vec<usize>>>()?,
        };
        let report = Self {
            label: need("label")?,
            variables,
            horizon,
            curves,
            baselines,
            floors,
            d: int("d")?,
            latent_dim: int("n")?,
            coder_id: need("coder")?,
            rom_id: need("rom")?,
            seed: need("seed")?
                .parse()
                .map_err(|_| Error::Data("report metadata 'seed' is not an integer".into()))?,
            num_starts: int("num_starts")?,
            pre_boundary_leads,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

// ───────────────────────── delay sweep ─────────────────────────

/// One row of a delay-depth sweep: mean in-window LW-RMSE at depth `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySweepPoint {
    pub d: usize,
    pub lw_rmse: f64,
}

/// Geometry for [`delay_sweep`]; shares the in-window start layout.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub num_starts: usize,
    pub spacing: usize,
    pub horizon: usize,
    /// Ridge strength for each operator fit; 0 for plain least squares.
    pub lambda: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { num_starts: 10, spacing: 8, horizon: 32, lambda: 0.0 }
    }
}

/// Fits one operator per delay depth on the training window and scores
/// each with the in-window experiment. The table is reported as-is; no
/// ordering across depths is assumed.
pub fn delay_sweep<C: LatentCoder + Sync + ?Sized>(
    coder: &C,
    data: &EvalData,
    d_list: &[usize],
    cfg: &SweepConfig,
) -> Result<Vec<DelaySweepPoint>> {
    if d_list.is_empty() {
        return Err(Error::Config("delay sweep needs at least one depth".into()));
    }
    if d_list[0] == 0 || d_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "delay depths must be positive and strictly ascending".into(),
        ));
    }
    let train_rows: Vec<usize> = (0..data.boundary).collect();
    let mut latents = Vec::with_capacity(train_rows.len());
    let n = coder.latent_dim();
    for chunk in train_rows.chunks(128) {
        let batch = data.gather(chunk)?;
        let z = coder.encode_batch(&batch)?;
        for row in z.data().chunks(n) {
            latents.push(row.to_vec());
        }
    }
    let seq = LatentSequence::new(latents, 1.0)?;

    let mut out = Vec::with_capacity(d_list.len());
    for &d in d_list {
        let rom = fit_delay_rom(&seq, d, cfg.lambda)?;
        let exp_cfg = ExperimentConfig {
            num_starts: cfg.num_starts,
            spacing: cfg.spacing,
            horizon: cfg.horizon,
            d,
            seed: 0,
            coder_id: String::new(),
            rom_id: String::new(),
        };
        let report =
            run_experiment(ExperimentKind::InWindow, coder, &rom, data, &exp_cfg)?;
        out.push(DelaySweepPoint { d, lw_rmse: report.mean_lw_rmse() });
    }
    Ok(out)
}

const SWEEP_HEADER: &str = "d,lw_rmse";

pub fn sweep_to_csv(points: &[DelaySweepPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(out, "{},{}", p.d, p.lw_rmse);
    }
    out
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<DelaySweepPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SWEEP_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "sweep header should be '{}', got {:?}",
                SWEEP_HEADER, other
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (d, v) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("sweep line {} is not 'd,lw_rmse'", i + 2))
        })?;
        out.push(DelaySweepPoint {
            d: d.trim()
                .parse()
                .map_err(|_| Error::Data(format!("sweep line {}: bad depth '{}'", i + 2, d)))?,
            lw_rmse: v.trim().parse().map_err(|_| {
                Error::Data(format!("sweep line {}: bad score '{}'", i + 2, v))
            })?,
        });
    }
    Ok(out)
}

pub fn write_sweep_csv(path: &Path, points: &[DelaySweepPoint]) -> Result<()> {
    std::fs::write(path, sweep_to_csv(points))?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<DelaySweepPoint>> {
    sweep_from_csv(&std::fs::read_to_string(path)?)
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::latitude_weights;
    use crate::testsupport::rng;
    use rand::Rng;

    fn grid(h: usize) -> Vec<f64> {
        (0..h).map(|i| -60.0 + 120.0 * i as f64 / (h - 1) as f64).collect()
    }

    /// Double-loop re-derivation straight from the score definition,
    /// sharing no code with the implementation.
    fn oracle(x: &Tensor, xhat: &Tensor, w: &[f64]) -> f64 {
        let (b, c, h, width) = match x.rank() {
            3 => (1, x.shape()[0], x.shape()[1], x.shape()[2]),
            _ => (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]),
        };
        let mut total = 0.0;
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..width {
                        let idx = ((bi * c + ci) * h + i) * width + j;
                        let e = x.data()[idx] - xhat.data()[idx];
                        acc += w[i] * e * e;
                    }
                }
                total += (acc / (h * width) as f64).sqrt();
            }
        }
        total / (b * c) as f64
    }

    #[test]
    fn equal_fields_score_zero() {
        let x = Tensor::from_fn(&[2, 4, 5], |i| i as f64);
        let w = latitude_weights(&grid(4)).unwrap();
        assert_eq!(lw_rmse(&x, &x, &w).unwrap(), 0.0);
    }

    #[test]
    fn matches_double_loop_oracle_on_random_pairs() {
        let mut r = rng(50);
        for case in 0..20 {
            let (b, c, h, w) = (
                1 + case % 3,
                1 + (case / 3) % 4,
                3 + case % 5,
                4 + case % 6,
            );
            let lat = grid(h);
            let weights = latitude_weights(&lat).unwrap();
            let x = Tensor::from_fn(&[b, c, h, w], |_| r.gen_range(-2.0..2.0));
            let xhat = Tensor::from_fn(&[b, c, h, w], |_| r.gen_range(-2.0..2.0));
            let got = lw_rmse(&x, &xhat, &weights).unwrap();
            let want = oracle(&x, &xhat, weights.values());
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1.0),
                "case {}: {} vs {}",
                case,
                got,
                want
            );
        }
    }

    #[test]
    fn single_erroneous_point_has_the_closed_form_score() {
        let (h, w) = (7, 9);
        let lat = grid(h);
        let weights = latitude_weights(&lat).unwrap();
        let x = Tensor::zeros(&[1, h, w]);
        for row in 0..h {
            let e = 0.37;
            let mut data = vec![0.0; h * w];
            data[row * w + 4] = e;
            let xhat = Tensor::new(&[1, h, w], data).unwrap();
            let want = (weights.values()[row] * e * e / (h * w) as f64).sqrt();
            let got = lw_rmse(&x, &xhat, &weights).unwrap();
            assert!((got - want).abs() <= 1e-15, "row {}: {} vs {}", row, got, want);
        }
    }

    #[test]
    fn uniform_weights_reduce_to_plain_rmse() {
        let mut r = rng(51);
        let (b, c, h, w) = (2, 3, 5, 6);
        let x = Tensor::from_fn(&[b, c, h, w], |_| r.gen_range(-1.0..1.0));
        let xhat = Tensor::from_fn(&[b, c, h, w], |_| r.gen_range(-1.0..1.0));
        let uniform = LatitudeWeights::uniform(h);
        let got = lw_rmse(&x, &xhat, &uniform).unwrap();

        // Unweighted oracle with the same aggregation: per-field RMSE,
        // arithmetic mean over fields.
        let mut want = 0.0;
        let plane = h * w;
        for f in 0..b * c {
            let mut acc = 0.0;
            for i in 0..plane {
                let e = x.data()[f * plane + i] - xhat.data()[f * plane + i];
                acc += e * e;
            }
            want += (acc / plane as f64).sqrt();
        }
        want /= (b * c) as f64;
        assert!((got - want).abs() <= 1e-14, "{} vs {}", got, want);
    }

    #[test]
    fn per_variable_scores_average_to_the_scalar_score() {
        let mut r = rng(52);
        let (b, c, h, w) = (3, 4, 6, 5);
        let lat = grid(h);
        let weights = latitude_weights(&lat).unwrap();
        let x = Tensor::from_fn(&[b, c, h, w], |_| r.gen_range(-1.0..1.0));
        let xhat = Tensor::from_fn(&[b, c, h, w], |_| r.gen_range(-1.0..1.0));
        let per = lw_rmse_per_variable(&x, &xhat, &weights).unwrap();
        assert_eq!(per.len(), c);
        let mean = per.iter().sum::<f64>() / c as f64;
        let scalar = lw_rmse(&x, &xhat, &weights).unwrap();
        assert!((mean - scalar).abs() <= 1e-15);
    }

    #[test]
    fn shape_and_weight_mismatches_are_rejected() {
        let x = Tensor::zeros(&[2, 4, 5]);
        let y = Tensor::zeros(&[2, 4, 6]);
        let w = latitude_weights(&grid(4)).unwrap();
        assert!(lw_rmse(&x, &y, &w).is_err());
        let short = latitude_weights(&grid(3)).unwrap();
        assert!(lw_rmse(&x, &x, &short).is_err());
        let flat = Tensor::zeros(&[4, 5]);
        assert!(lw_rmse(&flat, &flat, &w).is_err());
    }

    #[test]
    fn persistence_repeats_the_initial_snapshot() {
        let mut r = rng(53);
        let initial = Tensor::from_fn(&[3, 4, 5], |_| r.gen_range(-1.0..1.0));
        let fc = persistence_baseline(&initial, 4).unwrap();
        assert_eq!(fc.shape(), &[4, 3, 4, 5]);
        for t in 0..4 {
            let off = t * 60;
            assert_eq!(&fc.data()[off..off + 60], initial.data());
        }
        assert_eq!(persistence_baseline(&initial, 1).unwrap().shape(), &[1, 3, 4, 5]);
        assert!(persistence_baseline(&initial, 0).is_err());
    }

    #[test]
    fn persistence_scores_zero_against_constant_truth() {
        let initial = Tensor::from_fn(&[2, 4, 3], |i| (i % 7) as f64);
        let fc = persistence_baseline(&initial, 5).unwrap();
        let truth = persistence_baseline(&initial, 5).unwrap();
        let w = latitude_weights(&grid(4)).unwrap();
        assert_eq!(lw_rmse(&truth, &fc, &w).unwrap(), 0.0);
    }

    #[test]
    fn persistence_lead_one_error_matches_direct_difference() {
        let mut r = rng(54);
        let a = Tensor::from_fn(&[2, 4, 5], |_| r.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2, 4, 5], |_| r.gen_range(-1.0..1.0));
        let w = latitude_weights(&grid(4)).unwrap();
        let fc = persistence_baseline(&a, 1).unwrap();
        let truth = persistence_baseline(&b, 1).unwrap();
        let got = lw_rmse(&truth, &fc, &w).unwrap();
        let want = oracle(&b, &a, w.values());
        assert!((got - want).abs() <= 1e-14);
    }

    // ───── experiment harness ─────

    use crate::rom::IdentityCoder;

    /// Traveling sinusoid on a [T, 1, 4, 6] grid. Every grid point is a
    /// fixed-frequency oscillation, so the sequence satisfies an exact
    /// two-delay linear recurrence. `shift_at` doubles the frequency
    /// from that index on, breaking the learned dynamics.
    fn wave_fields(t_total: usize, shift_at: Option<usize>) -> Tensor {
        Tensor::from_fn(&[t_total, 1, 4, 6], |idx| {
            let t = idx / 24;
            let rem = idx % 24;
            let (i, j) = (rem / 6, rem % 6);
            let omega = match shift_at {
                Some(b) if t >= b => 0.8,
                _ => 0.4,
            };
            let phase = 2.0 * std::f64::consts::PI * j as f64 / 6.0;
            (phase - omega * t as f64).sin() * (1.0 + 0.1 * i as f64)
        })
    }

    fn wave_setup(
        t_total: usize,
        boundary: usize,
        shift_at: Option<usize>,
    ) -> (Tensor, LatitudeWeights, Vec<String>, IdentityCoder, DelayRom) {
        let fields = wave_fields(t_total, shift_at);
        let weights = latitude_weights(&grid(4)).unwrap();
        let variables = vec!["wave".to_string()];
        let coder = IdentityCoder::new([1, 4, 6]).unwrap();
        let rows: Vec<Vec<f64>> = (0..boundary)
            .map(|t| fields.data()[t * 24..(t + 1) * 24].to_vec())
            .collect();
        let seq = LatentSequence::new(rows, 1.0).unwrap();
        let rom = fit_delay_rom(&seq, 2, 0.0).unwrap();
        (fields, weights, variables, coder, rom)
    }

    #[test]
    fn in_window_forecasts_of_linear_dynamics_sit_on_a_zero_floor() {
        let (fields, weights, variables, coder, rom) = wave_setup(40, 40, None);
        let data = EvalData::new(&fields, &variables, &weights, 40).unwrap();
        let cfg = ExperimentConfig {
            num_starts: 4,
            spacing: 5,
            horizon: 6,
            d: 2,
            ..ExperimentConfig::default()
        };
        let report =
            run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).unwrap();
        assert_eq!(report.label, "in_window");
        assert_eq!(report.num_starts, 4);
        assert_eq!(report.curves.len(), 1);
        assert_eq!(report.curves[0].len(), 6);
        // Identity coder: the floor is exactly zero, not merely small.
        assert_eq!(report.floors, vec![0.0]);
        // The wave is an exact two-delay recurrence, so forecasts are
        // fit-residual small while persistence is order one.
        assert!(report.curves[0].iter().all(|&v| v < 1e-8), "{:?}", report.curves[0]);
        assert!(report.baselines[0][0] > 1e-2);
        assert!(report.pre_boundary_leads.is_empty());
    }

    /// A deliberately lossy coder: keeps the first `keep` values of each
    /// field and zeroes the rest on decode.
    struct TruncatingCoder {
        shape: [usize; 3],
        keep: usize,
    }

    impl LatentCoder for TruncatingCoder {
        fn latent_dim(&self) -> usize {
            self.keep
        }

        fn field_shape(&self) -> [usize; 3] {
            self.shape
        }

        fn encode_batch(&self, fields: &Tensor) -> crate::error::Result<Tensor> {
            let per: usize = self.shape.iter().product();
            let b = fields.shape()[0];
            let mut data = Vec::with_capacity(b * self.keep);
            for row in fields.data().chunks(per) {
                data.extend_from_slice(&row[..self.keep]);
            }
            Tensor::new(vec![b, self.keep], data)
        }

        fn decode_batch(&self, latents: &Tensor) -> crate::error::Result<Tensor> {
            let per: usize = self.shape.iter().product();
            let b = latents.shape()[0];
            let mut data = vec![0.0; b * per];
            for (bi, row) in latents.data().chunks(self.keep).enumerate() {
                data[bi * per..bi * per + self.keep].copy_from_slice(row);
            }
            let mut shape = vec![b];
            shape.extend_from_slice(&self.shape);
            Tensor::new(shape, data)
        }
    }

    #[test]
    fn lossy_coders_report_a_positive_floor() {
        let fields = wave_fields(40, None);
        let weights = latitude_weights(&grid(4)).unwrap();
        let variables = vec!["wave".to_string()];
        let coder = TruncatingCoder { shape: [1, 4, 6], keep: 8 };
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|t| fields.data()[t * 24..t * 24 + 8].to_vec())
            .collect();
        let rom = fit_delay_rom(&LatentSequence::new(rows, 1.0).unwrap(), 2, 0.0).unwrap();
        let data = EvalData::new(&fields, &variables, &weights, 40).unwrap();
        let cfg = ExperimentConfig {
            num_starts: 3,
            spacing: 4,
            horizon: 4,
            d: 2,
            ..ExperimentConfig::default()
        };
        let report =
            run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).unwrap();
        assert!(report.floors[0] > 0.1, "floor {}", report.floors[0]);
    }

    #[test]
    fn start_averaging_matches_an_independent_accumulation_oracle() {
        let (fields, weights, variables, coder, rom) = wave_setup(40, 40, None);
        let data = EvalData::new(&fields, &variables, &weights, 40).unwrap();
        let cfg = ExperimentConfig {
            num_starts: 5,
            spacing: 3,
            horizon: 5,
            d: 2,
            ..ExperimentConfig::default()
        };
        let report =
            run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).unwrap();

        // Re-derive every start from the documented layout and average the
        // per-start curves in reverse order.
        let starts: Vec<usize> = (0..5).map(|j| 1 + 3 * j).collect();
        for lead in 1..=5usize {
            let mut model_acc = 0.0;
            let mut pers_acc = 0.0;
            for &t0 in starts.iter().rev() {
                let window = Tensor::new(
                    vec![2, 1, 4, 6],
                    fields.data()[(t0 - 1) * 24..(t0 + 1) * 24].to_vec(),
                )
                .unwrap();
                let fc = crate::rom::forecast(&coder, &rom, &window, 5).unwrap();
                let truth = Tensor::new(
                    vec![1, 4, 6],
                    fields.data()[(t0 + lead) * 24..(t0 + lead + 1) * 24].to_vec(),
                )
                .unwrap();
                let pred = Tensor::new(
                    vec![1, 4, 6],
                    fc.data()[(lead - 1) * 24..lead * 24].to_vec(),
                )
                .unwrap();
                let initial = Tensor::new(
                    vec![1, 4, 6],
                    fields.data()[t0 * 24..(t0 + 1) * 24].to_vec(),
                )
                .unwrap();
                model_acc += lw_rmse(&truth, &pred, &weights).unwrap();
                pers_acc += lw_rmse(&truth, &initial, &weights).unwrap();
            }
            let model_mean = model_acc / 5.0;
            let pers_mean = pers_acc / 5.0;
            let tol = |v: f64| 1e-12 * v.abs().max(1.0);
            assert!(
                (report.curves[0][lead - 1] - model_mean).abs() <= tol(model_mean),
                "lead {}: {} vs {}",
                lead,
                report.curves[0][lead - 1],
                model_mean
            );
            assert!(
                (report.baselines[0][lead - 1] - pers_mean).abs() <= tol(pers_mean),
                "lead {} baseline: {} vs {}",
                lead,
                report.baselines[0][lead - 1],
                pers_mean
            );
        }
    }

    #[test]
    fn transition_reports_record_the_split_and_the_error_jump() {
        // Frequency doubles at the boundary; the operator fit on the
        // training window misses the new regime.
        let (fields, weights, variables, coder, rom) = wave_setup(60, 48, Some(48));
        let data = EvalData::new(&fields, &variables, &weights, 48).unwrap();
        let cfg = ExperimentConfig {
            num_starts: 1,
            spacing: 1,
            horizon: 8,
            d: 2,
            ..ExperimentConfig::default()
        };
        let report =
            run_experiment(ExperimentKind::Transition, &coder, &rom, &data, &cfg).unwrap();
        assert_eq!(report.label, "transition");
        assert_eq!(report.pre_boundary_leads, vec![4]);
        let (pre, post) = report.boundary_split_means().unwrap();
        assert!(
            post > pre,
            "post-boundary mean {} not above pre-boundary mean {}",
            post,
            pre
        );
    }

    #[test]
    fn out_of_window_errors_exceed_in_window_on_shifted_dynamics() {
        let (fields, weights, variables, coder, rom) = wave_setup(80, 56, Some(56));
        let data = EvalData::new(&fields, &variables, &weights, 56).unwrap();
        let cfg = ExperimentConfig {
            num_starts: 2,
            spacing: 4,
            horizon: 6,
            d: 2,
            ..ExperimentConfig::default()
        };
        let inw =
            run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).unwrap();
        let out =
            run_experiment(ExperimentKind::OutOfWindow, &coder, &rom, &data, &cfg).unwrap();
        assert_eq!(out.label, "out_of_window");
        assert!(
            out.mean_lw_rmse() > inw.mean_lw_rmse(),
            "out {} vs in {}",
            out.mean_lw_rmse(),
            inw.mean_lw_rmse()
        );
    }

    #[test]
    fn impossible_experiment_geometry_is_rejected_by_name() {
        let (fields, weights, variables, coder, rom) = wave_setup(30, 24, None);
        let data = EvalData::new(&fields, &variables, &weights, 24).unwrap();
        let mut cfg = ExperimentConfig {
            num_starts: 50,
            spacing: 3,
            horizon: 6,
            d: 2,
            ..ExperimentConfig::default()
        };
        let err = run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("insufficient data"), "{}", err);

        cfg.num_starts = 1;
        cfg.horizon = 20;
        let err = run_experiment(ExperimentKind::OutOfWindow, &coder, &rom, &data, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("insufficient data"), "{}", err);

        // Delay depth disagreeing with the operator.
        cfg.horizon = 4;
        cfg.d = 3;
        assert!(run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).is_err());

        // Coder latent size disagreeing with the operator.
        cfg.d = 2;
        let small = TruncatingCoder { shape: [1, 4, 6], keep: 5 };
        let err = run_experiment(ExperimentKind::InWindow, &small, &rom, &data, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dimension mismatch"), "{}", err);
    }

    #[test]
    fn report_csv_round_trips_losslessly_and_rejects_corruption() {
        let (fields, weights, variables, coder, rom) = wave_setup(60, 48, Some(48));
        let data = EvalData::new(&fields, &variables, &weights, 48).unwrap();
        let cfg = ExperimentConfig {
            num_starts: 2,
            spacing: 1,
            horizon: 6,
            d: 2,
            seed: 11,
            coder_id: "identity".to_string(),
            rom_id: "wave-d2".to_string(),
        };
        let report =
            run_experiment(ExperimentKind::Transition, &coder, &rom, &data, &cfg).unwrap();
        let text = report.to_csv();
        let back = ForecastReport::from_csv(&text).unwrap();
        assert_eq!(back, report);

        assert!(ForecastReport::from_csv("variable,lead\n").is_err());
        let no_meta = text
            .lines()
            .filter(|l| !l.starts_with("# label"))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(ForecastReport::from_csv(&no_meta)
            .unwrap_err()
            .to_string()
            .contains("label"));
        let bad_row = format!("{}corrupt,row\n", text);
        assert!(ForecastReport::from_csv(&bad_row).is_err());
    }

    #[test]
    fn report_mean_is_the_arithmetic_mean_over_cells() {
        let report = ForecastReport {
            label: "in_window".to_string(),
            variables: vec!["a".to_string(), "b".to_string()],
            horizon: 2,
            curves: vec![vec![1.0, 2.0], vec![3.0, 5.0]],
            baselines: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            floors: vec![0.1, 0.2],
            d: 1,
            latent_dim: 4,
            coder_id: String::new(),
            rom_id: String::new(),
            seed: 0,
            num_starts: 1,
            pre_boundary_leads: vec![],
        };
        assert!((report.mean_lw_rmse() - 2.75).abs() <= 1e-15);
    }

    #[test]
    fn physical_unit_scores_scale_with_the_variable_spread() {
        let (fields, weights, variables, coder, rom) = wave_setup(40, 40, None);
        let cfg = ExperimentConfig {
            num_starts: 3,
            spacing: 4,
            horizon: 4,
            d: 2,
            ..ExperimentConfig::default()
        };
        let normalized = {
            let data = EvalData::new(&fields, &variables, &weights, 40).unwrap();
            run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).unwrap()
        };
        let physical = {
            let stats = vec![crate::data::VarStats { mean: 5.0, std: 2.0 }];
            let data = EvalData::new(&fields, &variables, &weights, 40)
                .unwrap()
                .in_physical_units(&stats)
                .unwrap();
            run_experiment(ExperimentKind::InWindow, &coder, &rom, &data, &cfg).unwrap()
        };
        // De-standardizing multiplies every error by the std; the mean
        // offset cancels in the difference.
        for lead in 0..4 {
            let a = 2.0 * normalized.baselines[0][lead];
            let b = physical.baselines[0][lead];
            assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{} vs {}", a, b);
        }
    }

    // ───── delay sweep ─────

    /// Noisy two-delay recurrence on a single-point grid.
    fn ar2_fields(t_total: usize) -> Tensor {
        let mut r = rng(55);
        let mut z = vec![1.0, 0.7];
        while z.len() < t_total {
            let k = z.len();
            let noise: f64 = r.gen_range(-0.05..0.05);
            z.push(1.2 * z[k - 1] - 0.5 * z[k - 2] + noise);
        }
        Tensor::new(vec![t_total, 1, 1, 1], z).unwrap()
    }

    fn scalar_eval(_fields: &Tensor, boundary: usize) -> (LatitudeWeights, Vec<String>) {
        (latitude_weights(&[0.0]).unwrap(), vec![format!("z{}", boundary)])
    }

    #[test]
    fn two_delays_beat_one_on_a_two_delay_recurrence() {
        let fields = ar2_fields(200);
        let (weights, variables) = scalar_eval(&fields, 160);
        let data = EvalData::new(&fields, &variables, &weights, 160).unwrap();
        let coder = IdentityCoder::new([1, 1, 1]).unwrap();
        let cfg = SweepConfig { num_starts: 12, spacing: 10, horizon: 3, lambda: 0.0 };
        let table = delay_sweep(&coder, &data, &[1, 2], &cfg).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!((table[0].d, table[1].d), (1, 2));
        assert!(
            table[1].lw_rmse <= table[0].lw_rmse,
            "d=2 scored {} vs d=1 {}",
            table[1].lw_rmse,
            table[0].lw_rmse
        );
    }

    #[test]
    fn repeated_sweeps_produce_identical_tables() {
        let fields = ar2_fields(120);
        let (weights, variables) = scalar_eval(&fields, 100);
        let data = EvalData::new(&fields, &variables, &weights, 100).unwrap();
        let coder = IdentityCoder::new([1, 1, 1]).unwrap();
        let cfg = SweepConfig { num_starts: 6, spacing: 8, horizon: 4, lambda: 1e-8 };
        let a = delay_sweep(&coder, &data, &[1, 2, 3], &cfg).unwrap();
        let b = delay_sweep(&coder, &data, &[1, 2, 3], &cfg).unwrap();
        let bits = |t: &[DelaySweepPoint]| -> Vec<(usize, u64)> {
            t.iter().map(|p| (p.d, p.lw_rmse.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn single_depth_sweeps_emit_single_rows() {
        let fields = ar2_fields(60);
        let (weights, variables) = scalar_eval(&fields, 50);
        let data = EvalData::new(&fields, &variables, &weights, 50).unwrap();
        let coder = IdentityCoder::new([1, 1, 1]).unwrap();
        let cfg = SweepConfig { num_starts: 3, spacing: 5, horizon: 2, lambda: 0.0 };
        let table = delay_sweep(&coder, &data, &[1], &cfg).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table[0].d, 1);
        assert!(table[0].lw_rmse >= 0.0);
    }

    #[test]
    fn sweep_depth_lists_must_strictly_ascend() {
        let fields = ar2_fields(60);
        let (weights, variables) = scalar_eval(&fields, 50);
        let data = EvalData::new(&fields, &variables, &weights, 50).unwrap();
        let coder = IdentityCoder::new([1, 1, 1]).unwrap();
        let cfg = SweepConfig::default();
        assert!(delay_sweep(&coder, &data, &[], &cfg).is_err());
        assert!(delay_sweep(&coder, &data, &[2, 2], &cfg).is_err());
        assert!(delay_sweep(&coder, &data, &[3, 1], &cfg).is_err());
        assert!(delay_sweep(&coder, &data, &[0, 1], &cfg).is_err());
    }

    #[test]
    fn sweep_csv_round_trips_and_rejects_malformed_tables() {
        let points = vec![
            DelaySweepPoint { d: 1, lw_rmse: 0.25 },
            DelaySweepPoint { d: 4, lw_rmse: 0.125e-7 },
        ];
        let text = sweep_to_csv(&points);
        assert!(text.starts_with("d,lw_rmse\n"));
        let back = sweep_from_csv(&text).unwrap();
        assert_eq!(back, points);
        assert!(sweep_from_csv("nope\n1,2\n").is_err());
        assert!(sweep_from_csv("d,lw_rmse\nx,1\n").is_err());
    }
}
