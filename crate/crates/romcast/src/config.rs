//! Run configuration: a plain-text `key = value` format with sections
//! in square brackets. Every key is checked against the schema below;
//! unknown sections or keys are rejected so typos cannot silently fall
//! back to defaults. Omitted keys keep desk-scale defaults.
//!
//! ```text
//! [data]
//! height = 33
//! width = 48
//! steps = 2250
//!
//! [rom]
//! d = 3
//! lambda = 0.0
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ExperimentKind;

// ───────────────────────── sections ─────────────────────────

/// Synthetic-data generation: grid extents, record length, cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub seed: u64,
    pub time_step_hours: f64,
    pub noise_amplitude: f64,
}

/// Chronological splits: the held-out "future" tail and, inside the
/// training window, the validation tail used during autoencoder runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSection {
    pub holdout_fraction: f64,
    pub val_fraction: f64,
}

/// Autoencoder architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub stem_channels: usize,
    pub stages: Vec<usize>,
    pub latent_channels: usize,
    pub cbam: bool,
    pub cbam_reduction: usize,
}

/// Autoencoder optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub decay: f64,
    pub lr_floor: f64,
    pub seed: u64,
}

/// Orthogonal-mode baseline: retained modes, sweep list, fit stride.
#[derive(Debug, Clone, PartialEq)]
pub struct PodSection {
    pub modes: usize,
    pub sweep: Vec<usize>,
    pub subsample: usize,
}

/// Latent time-delay operator fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RomSection {
    pub d: usize,
    pub lambda: f64,
}

/// Forecast experiment geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub kind: String,
    pub num_starts: usize,
    pub spacing: usize,
    pub horizon: usize,
    pub physical_units: bool,
    pub seed: u64,
}

/// The whole parsed configuration. Defaults describe the desk-scale
/// setup: a 33 x 48 grid, two-stage autoencoder, three delays.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub pod: PodSection,
    pub rom: RomSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                height: 33,
                width: 48,
                steps: 2250,
                seed: 0,
                time_step_hours: 6.0,
                noise_amplitude: 0.01,
            },
            split: SplitSection { holdout_fraction: 0.1, val_fraction: 0.1 },
            model: ModelSection {
                stem_channels: 32,
                stages: vec![64, 128],
                latent_channels: 8,
                cbam: true,
                cbam_reduction: 8,
            },
            training: TrainingSection {
                learning_rate: 1e-3,
                batch_size: 32,
                epochs: 100,
                patience: 5,
                decay: 0.5,
                lr_floor: 1e-6,
                seed: 0,
            },
            pod: PodSection { modes: 64, sweep: vec![8, 16, 32, 64, 128], subsample: 1 },
            rom: RomSection { d: 3, lambda: 0.0 },
            experiment: ExperimentSection {
                kind: "in_window".to_string(),
                num_starts: 10,
                spacing: 8,
                horizon: 32,
                physical_units: false,
                seed: 0,
            },
        }
    }
}

// ───────────────────────── parsing ─────────────────────────

fn parse_usize(value: &str, at: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{}: '{}' is not a non-negative integer", at, value)))
}

fn parse_u64(value: &str, at: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{}: '{}' is not a non-negative integer", at, value)))
}

fn parse_f64(value: &str, at: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| Error::Config(format!("{}: '{}' is not a number", at, value)))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{}: value must be finite", at)));
    }
    Ok(v)
}

fn parse_bool(value: &str, at: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{}: '{}' is not true or false", at, value))),
    }
}

fn parse_usize_list(value: &str, at: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|item| parse_usize(item.trim(), at))
        .collect()
}

impl RunConfig {
    /// Parses the documented text format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen: Vec<(String, String)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::Config(format!("line {}: unterminated section header", lineno + 1))
                    })?
                    .trim();
                if !KNOWN_SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{}]; expected one of {}",
                        lineno + 1,
                        name,
                        KNOWN_SECTIONS.join(", ")
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{}'", lineno + 1, line))
            })?;
            let key = key.trim();
            let value = value.trim();
            let Some(sec) = &section else {
                return Err(Error::Config(format!(
                    "line {}: key '{}' appears before any [section] header",
                    lineno + 1,
                    key
                )));
            };
            if seen.iter().any(|(s, k)| s == sec && k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{}' in [{}]",
                    lineno + 1,
                    key,
                    sec
                )));
            }
            seen.push((sec.clone(), key.to_string()));
            cfg.apply(sec, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let at = format!("[{}] {}", section, key);
        match (section, key) {
            ("data", "height") => self.data.height = parse_usize(value, &at)?,
            ("data", "width") => self.data.width = parse_usize(value, &at)?,
            ("data", "steps") => self.data.steps = parse_usize(value, &at)?,
            ("data", "seed") => self.data.seed = parse_u64(value, &at)?,
            ("data", "time_step_hours") => self.data.time_step_hours = parse_f64(value, &at)?,
            ("data", "noise_amplitude") => self.data.noise_amplitude = parse_f64(value, &at)?,
            ("split", "holdout_fraction") => self.split.holdout_fraction = parse_f64(value, &at)?,
            ("split", "val_fraction") => self.split.val_fraction = parse_f64(value, &at)?,
            ("model", "stem_channels") => self.model.stem_channels = parse_usize(value, &at)?,
            ("model", "stages") => self.model.stages = parse_usize_list(value, &at)?,
            ("model", "latent_channels") => self.model.latent_channels = parse_usize(value, &at)?,
            ("model", "cbam") => self.model.cbam = parse_bool(value, &at)?,
            ("model", "cbam_reduction") => self.model.cbam_reduction = parse_usize(value, &at)?,
            ("training", "learning_rate") => self.training.learning_rate = parse_f64(value, &at)?,
            ("training", "batch_size") => self.training.batch_size = parse_usize(value, &at)?,
            ("training", "epochs") => self.training.epochs = parse_usize(value, &at)?,
            ("training", "patience") => self.training.patience = parse_usize(value, &at)?,
            ("training", "decay") => self.training.decay = parse_f64(value, &at)?,
            ("training", "lr_floor") => self.training.lr_floor = parse_f64(value, &at)?,
            ("training", "seed") => self.training.seed = parse_u64(value, &at)?,
            ("pod", "modes") => self.pod.modes = parse_usize(value, &at)?,
            ("pod", "sweep") => self.pod.sweep = parse_usize_list(value, &at)?,
            ("pod", "subsample") => self.pod.subsample = parse_usize(value, &at)?,
            ("rom", "d") => self.rom.d = parse_usize(value, &at)?,
            ("rom", "lambda") => self.rom.lambda = parse_f64(value, &at)?,
            ("experiment", "kind") => {
                ExperimentKind::from_label(value)
                    .map_err(|_| Error::Config(format!("{}: unknown kind '{}'", at, value)))?;
                self.experiment.kind = value.to_string();
            }
            ("experiment", "num_starts") => self.experiment.num_starts = parse_usize(value, &at)?,
            ("experiment", "spacing") => self.experiment.spacing = parse_usize(value, &at)?,
            ("experiment", "horizon") => self.experiment.horizon = parse_usize(value, &at)?,
            ("experiment", "physical_units") => {
                self.experiment.physical_units = parse_bool(value, &at)?
            }
            ("experiment", "seed") => self.experiment.seed = parse_u64(value, &at)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{}' in section [{}]",
                    key, section
                )))
            }
        }
        Ok(())
    }

    /// Cross-field sanity that does not depend on any artifact. Deeper
    /// rules (architecture divisibility, data budgets) live with the
    /// modules that own them and surface when the config is used.
    fn validate(&self) -> Result<()> {
        let frac = |v: f64, what: &str| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{} must lie strictly between 0 and 1", what)))
            }
        };
        frac(self.split.holdout_fraction, "[split] holdout_fraction")?;
        frac(self.split.val_fraction, "[split] val_fraction")?;
        if self.pod.subsample == 0 {
            return Err(Error::Config("[pod] subsample must be at least 1".into()));
        }
        if self.rom.lambda < 0.0 {
            return Err(Error::Config("[rom] lambda must be non-negative".into()));
        }
        Ok(())
    }

    /// Renders the configuration in the same format [`parse`] accepts;
    /// parsing the result reproduces the value exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let list = |items: &[usize]| {
            items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(out, "[data]");
        let _ = writeln!(out, "height = {}", self.data.height);
        let _ = writeln!(out, "width = {}", self.data.width);
        let _ = writeln!(out, "steps = {}", self.data.steps);
        let _ = writeln!(out, "seed = {}", self.data.seed);
        let _ = writeln!(out, "time_step_hours = {}", self.data.time_step_hours);
        let _ = writeln!(out, "noise_amplitude = {}", self.data.noise_amplitude);
        let _ = writeln!(out, "\n[split]");
        let _ = writeln!(out, "holdout_fraction = {}", self.split.holdout_fraction);
        let _ = writeln!(out, "val_fraction = {}", self.split.val_fraction);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "stem_channels = {}", self.model.stem_channels);
        let _ = writeln!(out, "stages = {}", list(&self.model.stages));
        let _ = writeln!(out, "latent_channels = {}", self.model.latent_channels);
        let _ = writeln!(out, "cbam = {}", self.model.cbam);
        let _ = writeln!(out, "cbam_reduction = {}", self.model.cbam_reduction);
        let _ = writeln!(out, "\n[training]");
        let _ = writeln!(out, "learning_rate = {}", self.training.learning_rate);
        let _ = writeln!(out, "batch_size = {}", self.training.batch_size);
        let _ = writeln!(out, "epochs = {}", self.training.epochs);
        let _ = writeln!(out, "patience = {}", self.training.patience);
        let _ = writeln!(out, "decay = {}", self.training.decay);
        let _ = writeln!(out, "lr_floor = {}", self.training.lr_floor);
        let _ = writeln!(out, "seed = {}", self.training.seed);
        let _ = writeln!(out, "\n[pod]");
        let _ = writeln!(out, "modes = {}", self.pod.modes);
        let _ = writeln!(out, "sweep = {}", list(&self.pod.sweep));
        let _ = writeln!(out, "subsample = {}", self.pod.subsample);
        let _ = writeln!(out, "\n[rom]");
        let _ = writeln!(out, "d = {}", self.rom.d);
        let _ = writeln!(out, "lambda = {}", self.rom.lambda);
        let _ = writeln!(out, "\n[experiment]");
        let _ = writeln!(out, "kind = {}", self.experiment.kind);
        let _ = writeln!(out, "num_starts = {}", self.experiment.num_starts);
        let _ = writeln!(out, "spacing = {}", self.experiment.spacing);
        let _ = writeln!(out, "horizon = {}", self.experiment.horizon);
        let _ = writeln!(out, "physical_units = {}", self.experiment.physical_units);
        let _ = writeln!(out, "seed = {}", self.experiment.seed);
        out
    }
}

const KNOWN_SECTIONS: &[&str] =
    &["data", "split", "model", "training", "pod", "rom", "experiment"];

// ───────────────────────── tests ─────────────────────────
