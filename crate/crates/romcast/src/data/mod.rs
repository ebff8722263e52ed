//! Gridded snapshot data: descriptors, latitude weighting, per-variable
//! normalization, chronological splitting, binary snapshot files, and a
//! deterministic synthetic-atmosphere generator for desk-scale runs.
//!
//! A dataset is a time-ordered sequence of `[C, H, W]` snapshots over a
//! regular latitude/longitude grid. Latitudes run pole to pole inclusive;
//! rows at exactly +-90 degrees receive zero weight in the cosine
//! latitude weighting. Normalization statistics are always computed on
//! the training split and applied unchanged to held-out data.

mod io;
mod synth;

pub use io::{read_manifest, read_snapshots, write_manifest, write_snapshots, ManifestEntry};
pub use synth::{synth_generate, synth_snapshot_at, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default variable set: zonal wind, meridional wind, 2 m temperature,
/// mean sea-level pressure.
pub const DEFAULT_VARIABLES: [&str; 4] = ["u10", "v10", "T2m", "Pmsl"];

/// Default cadence between consecutive snapshots.
pub const DEFAULT_TIME_STEP_HOURS: f64 = 6.0;

// ───────────────────────── descriptor and snapshots ─────────────────────────

/// Per-variable normalization statistics, computed on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct VarStats {
    pub mean: f64,
    pub std: f64,
}

/// Grid geometry and variable metadata shared by every snapshot in a
/// dataset.
#[derive(Debug, Clone)]
pub struct DatasetDescriptor {
    variables: Vec<String>,
    lat: Vec<f64>,
    lon: Vec<f64>,
    time_step_hours: f64,
    stats: Option<Vec<VarStats>>,
}

impl DatasetDescriptor {
    /// Validates the grid invariants: latitudes strictly monotone within
    /// [-90, 90], longitudes strictly monotone within [0, 360).
    pub fn new(
        variables: Vec<String>,
        lat: Vec<f64>,
        lon: Vec<f64>,
        time_step_hours: f64,
    ) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Data("descriptor needs at least one variable".into()));
        }
        for name in &variables {
            if name.is_empty() || !name.is_ascii() {
                return Err(Error::Data(format!("variable name {:?} is not plain ASCII", name)));
            }
        }
        if lat.is_empty() || lon.is_empty() {
            return Err(Error::Data("descriptor needs non-empty lat and lon grids".into()));
        }
        if !lat.iter().all(|v| v.is_finite() && v.abs() <= 90.0) {
            return Err(Error::Data("latitudes must lie in [-90, 90]".into()));
        }
        if !lat.windows(2).all(|p| p[0] < p[1]) && !lat.windows(2).all(|p| p[0] > p[1]) {
            return Err(Error::Data("latitudes must be strictly monotone".into()));
        }
        if !lon.iter().all(|v| v.is_finite() && (0.0..360.0).contains(v)) {
            return Err(Error::Data("longitudes must lie in [0, 360)".into()));
        }
        if !lon.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Data("longitudes must be strictly increasing".into()));
        }
        if !(time_step_hours.is_finite() && time_step_hours > 0.0) {
            return Err(Error::Data("time step must be a positive number of hours".into()));
        }
        Ok(Self { variables, lat, lon, time_step_hours, stats: None })
    }

    /// Pole-to-pole grid with the default variable set and cadence.
    pub fn default_grid(height: usize, width: usize) -> Result<Self> {
        Self::new(
            DEFAULT_VARIABLES.iter().map(|s| s.to_string()).collect(),
            inclusive_latitudes(height)?,
            uniform_longitudes(width)?,
            DEFAULT_TIME_STEP_HOURS,
        )
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }

    pub fn time_step_hours(&self) -> f64 {
        self.time_step_hours
    }

    pub fn channels(&self) -> usize {
        self.variables.len()
    }

    pub fn height(&self) -> usize {
        self.lat.len()
    }

    pub fn width(&self) -> usize {
        self.lon.len()
    }

    /// Normalization statistics, if they have been attached.
    pub fn stats(&self) -> Option<&[VarStats]> {
        self.stats.as_deref()
    }

    /// Replaces the snapshot cadence.
    pub fn with_time_step(mut self, hours: f64) -> Result<Self> {
        if !(hours.is_finite() && hours > 0.0) {
            return Err(Error::Data("time step must be a positive number of hours".into()));
        }
        self.time_step_hours = hours;
        Ok(self)
    }

    /// Attaches training-split statistics. Every std must be positive.
    pub fn with_stats(mut self, stats: Vec<VarStats>) -> Result<Self> {
        if stats.len() != self.channels() {
            return Err(Error::Data(format!(
                "{} statistics entries for {} variables",
                stats.len(),
                self.channels()
            )));
        }
        if let Some(bad) = stats.iter().position(|s| !(s.std > 0.0 && s.std.is_finite())) {
            return Err(Error::Data(format!(
                "variable {} has non-positive standard deviation",
                self.variables[bad]
            )));
        }
        self.stats = Some(stats);
        Ok(self)
    }

    /// Grid shape `[C, H, W]` every snapshot must match.
    pub fn field_shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }
}

/// Latitude grid from -90 to 90 inclusive with `h` points.
pub fn inclusive_latitudes(h: usize) -> Result<Vec<f64>> {
    if h < 2 {
        return Err(Error::Data("latitude grid needs at least 2 points".into()));
    }
    let step = 180.0 / (h - 1) as f64;
    Ok((0..h).map(|i| (-90.0 + step * i as f64).clamp(-90.0, 90.0)).collect())
}

/// Longitude grid from 0 (inclusive) to 360 (exclusive) with `w` points.
pub fn uniform_longitudes(w: usize) -> Result<Vec<f64>> {
    if w < 1 {
        return Err(Error::Data("longitude grid needs at least 1 point".into()));
    }
    Ok((0..w).map(|j| 360.0 * j as f64 / w as f64).collect())
}

/// One time slice: a `[C, H, W]` field tagged with its time coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSnapshot {
    pub time_hours: f64,
    values: Tensor,
}

impl GridSnapshot {
    pub fn new(time_hours: f64, values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(
                "grid_snapshot",
                format!("expected [C, H, W], got {:?}", values.shape()),
            ));
        }
        if !time_hours.is_finite() {
            return Err(Error::Data("snapshot time must be finite".into()));
        }
        if !values.all_finite() {
            return Err(Error::Data(format!(
                "snapshot at t = {} h contains non-finite values",
                time_hours
            )));
        }
        Ok(Self { time_hours, values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Stacks snapshots into one `[T, C, H, W]` tensor (time-major), checking
/// that every snapshot matches the descriptor's grid.
pub fn stack_snapshots(descriptor: &DatasetDescriptor, snapshots: &[GridSnapshot]) -> Result<Tensor> {
    if snapshots.is_empty() {
        return Err(Error::Data("no snapshots to stack".into()));
    }
    let [c, h, w] = descriptor.field_shape();
    let plane = c * h * w;
    let mut data = Vec::with_capacity(snapshots.len() * plane);
    for (k, snap) in snapshots.iter().enumerate() {
        if snap.values.shape() != [c, h, w] {
            return Err(Error::shape(
                "stack_snapshots",
                format!(
                    "snapshot {} has shape {:?}, descriptor says [{}, {}, {}]",
                    k,
                    snap.values.shape(),
                    c,
                    h,
                    w
                ),
            ));
        }
        data.extend_from_slice(snap.values.data());
    }
    Tensor::new(&[snapshots.len(), c, h, w], data)
}

// ───────────────────────── latitude weights ─────────────────────────

/// Cosine latitude weights normalized to unit mean. Rows at exactly
/// +-90 degrees get weight exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LatitudeWeights {
    w: Vec<f64>,
}

impl LatitudeWeights {
    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Uniform weights (all ones), under which the weighted RMSE reduces
    /// to the plain RMSE.
    pub fn uniform(h: usize) -> Self {
        Self { w: vec![1.0; h] }
    }
}

/// w_i = cos(lat_i) / mean_j cos(lat_j), with the pole rows pinned to an
/// exact zero before averaging.
pub fn latitude_weights(lat_degrees: &[f64]) -> Result<LatitudeWeights> {
    if lat_degrees.is_empty() {
        return Err(Error::Data("latitude weights need a non-empty grid".into()));
    }
    let cosines: Vec<f64> = lat_degrees
        .iter()
        .map(|&deg| {
            if !(deg.is_finite() && deg.abs() <= 90.0) {
                return Err(Error::Data(format!("latitude {} outside [-90, 90]", deg)));
            }
            // cos(90 deg) is not exactly zero in floating point; the poles
            // must drop out of the weighted sum entirely.
            Ok(if deg.abs() == 90.0 { 0.0 } else { deg.to_radians().cos() })
        })
        .collect::<Result<_>>()?;
    let total = kahan_sum(cosines.iter().copied());
    if total <= 0.0 {
        return Err(Error::Data(
            "degenerate latitude grid: cosine weights sum to zero".into(),
        ));
    }
    let mean = total / cosines.len() as f64;
    Ok(LatitudeWeights { w: cosines.into_iter().map(|c| c / mean).collect() })
}

/// Compensated (Kahan) summation; keeps statistics reproducible and
/// accurate over millions of terms.
pub(crate) fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

// ───────────────────────── normalization ─────────────────────────

/// Per-variable mean and population standard deviation over a snapshot
/// sequence. Statistics must come from the training split only; callers
/// pass the training slice here and reuse the result everywhere.
pub fn compute_stats(snapshots: &[GridSnapshot], channels: usize) -> Result<Vec<VarStats>> {
    if snapshots.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty split".into()));
    }
    let shape = snapshots[0].values.shape().to_vec();
    if shape.len() != 3 || shape[0] != channels {
        return Err(Error::shape(
            "compute_stats",
            format!("snapshots have shape {:?}, expected {} channels", shape, channels),
        ));
    }
    let plane = shape[1] * shape[2];
    let n = (snapshots.len() * plane) as f64;
    let mut stats = Vec::with_capacity(channels);
    for c in 0..channels {
        let channel_values = || {
            snapshots
                .iter()
                .flat_map(move |s| s.values.data()[c * plane..(c + 1) * plane].iter().copied())
        };
        let mean = kahan_sum(channel_values()) / n;
        let var = kahan_sum(channel_values().map(|v| (v - mean) * (v - mean))) / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Data(format!(
                "variable index {} has zero variance; cannot normalize",
                c
            )));
        }
        stats.push(VarStats { mean, std });
    }
    Ok(stats)
}

fn apply_per_channel(
    snapshots: &[GridSnapshot],
    stats: &[VarStats],
    op: impl Fn(f64, &VarStats) -> f64,
) -> Result<Vec<GridSnapshot>> {
    snapshots
        .iter()
        .map(|snap| {
            let shape = snap.values.shape();
            if shape[0] != stats.len() {
                return Err(Error::shape(
                    "normalize",
                    format!("snapshot has {} channels, statistics have {}", shape[0], stats.len()),
                ));
            }
            let plane = shape[1] * shape[2];
            let mut data = snap.values.data().to_vec();
            for (c, st) in stats.iter().enumerate() {
                for v in &mut data[c * plane..(c + 1) * plane] {
                    *v = op(*v, st);
                }
            }
            GridSnapshot::new(snap.time_hours, Tensor::new(shape, data)?)
        })
        .collect()
}

/// (x - mean) / std per variable, using the supplied (training) statistics.
pub fn normalize(snapshots: &[GridSnapshot], stats: &[VarStats]) -> Result<Vec<GridSnapshot>> {
    if let Some(bad) = stats.iter().position(|s| !(s.std > 0.0)) {
        return Err(Error::Data(format!("variable index {} has non-positive std", bad)));
    }
    apply_per_channel(snapshots, stats, |v, s| (v - s.mean) / s.std)
}

/// Inverse of [`normalize`]: x * std + mean.
pub fn denormalize(snapshots: &[GridSnapshot], stats: &[VarStats]) -> Result<Vec<GridSnapshot>> {
    apply_per_channel(snapshots, stats, |v, s| v * s.std + s.mean)
}

/// Normalizes a `[C, H, W]` or `[B, C, H, W]` tensor in one go.
pub fn normalize_tensor(values: &Tensor, stats: &[VarStats]) -> Result<Tensor> {
    scale_tensor(values, stats, |v, s| (v - s.mean) / s.std)
}

/// Inverse of [`normalize_tensor`].
pub fn denormalize_tensor(values: &Tensor, stats: &[VarStats]) -> Result<Tensor> {
    scale_tensor(values, stats, |v, s| v * s.std + s.mean)
}

fn scale_tensor(
    values: &Tensor,
    stats: &[VarStats],
    op: impl Fn(f64, &VarStats) -> f64,
) -> Result<Tensor> {
    let (channel_axis, shape) = match values.rank() {
        3 => (0, values.shape().to_vec()),
        4 => (1, values.shape().to_vec()),
        r => {
            return Err(Error::shape(
                "normalize",
                format!("expected rank 3 or 4, got rank {}", r),
            ))
        }
    };
    if shape[channel_axis] != stats.len() {
        return Err(Error::shape(
            "normalize",
            format!("{} channels vs {} statistics entries", shape[channel_axis], stats.len()),
        ));
    }
    let plane: usize = shape[channel_axis + 1..].iter().product();
    let outer: usize = shape[..channel_axis].iter().product();
    let mut data = values.data().to_vec();
    for b in 0..outer {
        for (c, st) in stats.iter().enumerate() {
            let base = (b * stats.len() + c) * plane;
            for v in &mut data[base..base + plane] {
                *v = op(*v, st);
            }
        }
    }
    Tensor::new(shape, data)
}

// ───────────────────────── chronological split ─────────────────────────

/// Splits a time-ordered sequence at a boundary time: train strictly
/// before, test at or after. Errors if either side is empty or the
/// input is out of order.
pub fn split(
    snapshots: Vec<GridSnapshot>,
    boundary_hours: f64,
) -> Result<(Vec<GridSnapshot>, Vec<GridSnapshot>)> {
    if !snapshots.windows(2).all(|p| p[0].time_hours < p[1].time_hours) {
        return Err(Error::Data("snapshots must be strictly time-ordered before splitting".into()));
    }
    let cut = snapshots.partition_point(|s| s.time_hours < boundary_hours);
    if cut == 0 {
        return Err(Error::Config(format!(
            "split boundary {} h leaves the training side empty",
            boundary_hours
        )));
    }
    if cut == snapshots.len() {
        return Err(Error::Config(format!(
            "split boundary {} h leaves the test side empty",
            boundary_hours
        )));
    }
    let mut train = snapshots;
    let test = train.split_off(cut);
    Ok((train, test))
}

/// Boundary time that puts the leading `fraction` of snapshots into the
/// training split.
pub fn boundary_for_fraction(snapshots: &[GridSnapshot], fraction: f64) -> Result<f64> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::Config(format!(
            "training fraction must lie strictly between 0 and 1, got {}",
            fraction
        )));
    }
    let cut = ((snapshots.len() as f64) * fraction).floor() as usize;
    if cut == 0 || cut >= snapshots.len() {
        return Err(Error::Config(format!(
            "training fraction {} leaves an empty split for {} snapshots",
            fraction,
            snapshots.len()
        )));
    }
    Ok(snapshots[cut].time_hours)
}

// ───────────────────────── tests ─────────────────────────
