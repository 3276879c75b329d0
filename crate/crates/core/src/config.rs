//! Plain-text `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key is optional; unknown keys
//! are rejected. Angles are given in degrees. [`RunConfig::to_text`] prints
//! every key with its current value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::draping::WindowConfig;
use crate::error::{Error, Result};
use crate::estimator::{LossConfig, TrainConfig};
use crate::heightfield::TerrainSpec;
use crate::recon::ReconConfig;
use crate::survey::SurveyConfig;

/// Source of the per-bin normals used in reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorChoice {
    Lambertian,
    Learned,
    GtNormals,
}

impl FromStr for EstimatorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambertian" => Ok(Self::Lambertian),
            "learned" => Ok(Self::Learned),
            "gt-normals" => Ok(Self::GtNormals),
            _ => Err(Error::invalid(format!("unknown estimator `{s}` (lambertian | learned | gt-normals)"))),
        }
    }
}

impl EstimatorChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lambertian => "lambertian",
            Self::Learned => "learned",
            Self::GtNormals => "gt-normals",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds survey noise, estimator training and SIREN initialization.
    pub seed: u64,
    pub terrain: TerrainSpec,
    pub survey: SurveyConfig,
    pub windows: WindowConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub recon: ReconConfig,
    pub estimator: EstimatorChoice,
    /// Radius around found crossings counted as surveyed, meters.
    pub coverage_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            terrain: TerrainSpec::desk_default(),
            survey: SurveyConfig::default(),
            windows: WindowConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            val_fraction: 0.2,
            recon: ReconConfig { learning_rate: 1e-3, ..ReconConfig::default() },
            estimator: EstimatorChoice::Lambertian,
            coverage_radius: 1.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn deg(key: &str, value: &str) -> Result<f64> {
    parse::<f64>(key, value).map(f64::to_radians)
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key, value);
        match k {
            "seed" => self.seed = parse(k, v)?,
            "estimator" => self.estimator = v.parse()?,
            "coverage_radius" => self.coverage_radius = parse(k, v)?,
            "val_fraction" => self.val_fraction = parse(k, v)?,

            "terrain.ncols" => self.terrain.ncols = parse(k, v)?,
            "terrain.nrows" => self.terrain.nrows = parse(k, v)?,
            "terrain.cell_size" => self.terrain.cell_size = parse(k, v)?,
            "terrain.origin_x" => self.terrain.origin.0 = parse(k, v)?,
            "terrain.origin_y" => self.terrain.origin.1 = parse(k, v)?,
            "terrain.base_depth" => self.terrain.base_depth = parse(k, v)?,
            "terrain.rocks" => self.terrain.rocks.count = parse(k, v)?,
            "terrain.smoothness" => self.terrain.smoothness = parse(k, v)?,
            "terrain.seed" => self.terrain.seed = parse(k, v)?,
            "terrain.features" => match v {
                "desk" => {
                    let d = TerrainSpec::desk_default();
                    (self.terrain.hills, self.terrain.ridges, self.terrain.rocks) = (d.hills, d.ridges, d.rocks);
                }
                "flat" => {
                    self.terrain.hills.clear();
                    self.terrain.ridges.clear();
                    self.terrain.rocks.count = 0;
                }
                _ => return Err(Error::invalid(format!("terrain.features must be desk or flat, got `{v}`"))),
            },

            "survey.line_spacing" => self.survey.line_spacing = parse(k, v)?,
            "survey.heading_deg" => self.survey.heading = deg(k, v)?,
            "survey.ping_spacing" => self.survey.ping_spacing = parse(k, v)?,
            "survey.lines_per_set" => {
                self.survey.lines_per_set = if v == "auto" { None } else { Some(parse(k, v)?) };
            }
            "survey.crossing" => self.survey.crossing = parse_bool(k, v)?,
            "survey.sonar_depth" => self.survey.sonar_depth = parse(k, v)?,
            "survey.max_range" => self.survey.max_range = parse(k, v)?,
            "survey.first_range" => self.survey.first_range = parse(k, v)?,
            "survey.bin_resolution" => self.survey.bin_resolution = parse(k, v)?,
            "survey.tilt_deg" => self.survey.tilt = deg(k, v)?,
            "survey.beam_width_deg" => self.survey.beam_width = deg(k, v)?,
            "survey.horizontal_beam_width_deg" => self.survey.horizontal_beam_width = deg(k, v)?,
            "survey.gain" => self.survey.gain = parse(k, v)?,
            "survey.intensity_noise" => self.survey.intensity_noise = parse(k, v)?,
            "survey.altimeter_noise" => self.survey.altimeter_noise = parse(k, v)?,
            "survey.noise_floor" => self.survey.noise_floor = parse(k, v)?,

            "windows.height" => self.windows.height = parse(k, v)?,
            "windows.width" => self.windows.width = parse(k, v)?,
            "windows.overlap" => self.windows.overlap = parse(k, v)?,
            "windows.flip" => self.windows.flip = parse_bool(k, v)?,

            "loss.beta" => self.loss.beta = parse(k, v)?,
            "loss.tv_across" => self.loss.tv_across = parse(k, v)?,
            "loss.tv_along" => self.loss.tv_along = parse(k, v)?,

            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(k, v)?,

            "recon.depth" => self.recon.depth = parse(k, v)?,
            "recon.width" => self.recon.width = parse(k, v)?,
            "recon.first_omega" => self.recon.first_omega = parse(k, v)?,
            "recon.epochs" => self.recon.epochs = parse(k, v)?,
            "recon.batch_pings" => self.recon.batch_pings = parse(k, v)?,
            "recon.altimeter_batch" => self.recon.altimeter_batch = parse(k, v)?,
            "recon.n_steps" => self.recon.n_steps = parse(k, v)?,
            "recon.step_size" => self.recon.step_size = parse(k, v)?,
            "recon.height_weight" => self.recon.height_weight = parse(k, v)?,
            "recon.learning_rate" => self.recon.learning_rate = parse(k, v)?,
            "recon.lr_decay" => self.recon.lr_decay = parse(k, v)?,
            _ => return Err(Error::invalid(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` as given on the command line.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected KEY=VALUE, got `{assignment}`")))?;
        self.set(k.trim(), v.trim())
    }

    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.terrain.validate()?;
        self.survey().validate()?;
        self.recon().validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if !(self.coverage_radius > 0.0) {
            return Err(Error::invalid("coverage_radius must be positive"));
        }
        if self.windows.height == 0 || self.windows.width == 0 || !(0.0..1.0).contains(&self.windows.overlap) {
            return Err(Error::invalid("window size must be positive and overlap in [0, 1)"));
        }
        self.loss.validate()
    }

    pub fn survey(&self) -> SurveyConfig {
        SurveyConfig { seed: self.seed, ..self.survey.clone() }
    }

    pub fn windows(&self) -> WindowConfig {
        WindowConfig { gain: self.survey.gain, ..self.windows }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    pub fn recon(&self) -> ReconConfig {
        ReconConfig { seed: self.seed, ..self.recon }
    }

    /// Every key with its value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let (t, s, w, l, tr, r) = (&self.terrain, &self.survey, &self.windows, &self.loss, &self.train, &self.recon);
        let features = if t.hills.is_empty() && t.ridges.is_empty() && t.rocks.count == 0 { "flat" } else { "desk" };
        let lines_per_set = s.lines_per_set.map_or("auto".to_string(), |n| n.to_string());
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("estimator", self.estimator.name().to_string()),
            ("coverage_radius", self.coverage_radius.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("terrain.features", features.to_string()),
            ("terrain.ncols", t.ncols.to_string()),
            ("terrain.nrows", t.nrows.to_string()),
            ("terrain.cell_size", t.cell_size.to_string()),
            ("terrain.origin_x", t.origin.0.to_string()),
            ("terrain.origin_y", t.origin.1.to_string()),
            ("terrain.base_depth", t.base_depth.to_string()),
            ("terrain.rocks", t.rocks.count.to_string()),
            ("terrain.smoothness", t.smoothness.to_string()),
            ("terrain.seed", t.seed.to_string()),
            ("survey.line_spacing", s.line_spacing.to_string()),
            ("survey.heading_deg", s.heading.to_degrees().to_string()),
            ("survey.ping_spacing", s.ping_spacing.to_string()),
            ("survey.lines_per_set", lines_per_set),
            ("survey.crossing", s.crossing.to_string()),
            ("survey.sonar_depth", s.sonar_depth.to_string()),
            ("survey.max_range", s.max_range.to_string()),
            ("survey.first_range", s.first_range.to_string()),
            ("survey.bin_resolution", s.bin_resolution.to_string()),
            ("survey.tilt_deg", s.tilt.to_degrees().to_string()),
            ("survey.beam_width_deg", s.beam_width.to_degrees().to_string()),
            ("survey.horizontal_beam_width_deg", s.horizontal_beam_width.to_degrees().to_string()),
            ("survey.gain", s.gain.to_string()),
            ("survey.intensity_noise", s.intensity_noise.to_string()),
            ("survey.altimeter_noise", s.altimeter_noise.to_string()),
            ("survey.noise_floor", s.noise_floor.to_string()),
            ("windows.height", w.height.to_string()),
            ("windows.width", w.width.to_string()),
            ("windows.overlap", w.overlap.to_string()),
            ("windows.flip", w.flip.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("loss.tv_across", l.tv_across.to_string()),
            ("loss.tv_along", l.tv_along.to_string()),
            ("train.epochs", tr.epochs.to_string()),
            ("train.batch_size", tr.batch_size.to_string()),
            ("train.learning_rate", tr.learning_rate.to_string()),
            ("recon.depth", r.depth.to_string()),
            ("recon.width", r.width.to_string()),
            ("recon.first_omega", r.first_omega.to_string()),
            ("recon.epochs", r.epochs.to_string()),
            ("recon.batch_pings", r.batch_pings.to_string()),
            ("recon.altimeter_batch", r.altimeter_batch.to_string()),
            ("recon.n_steps", r.n_steps.to_string()),
            ("recon.step_size", r.step_size.to_string()),
            ("recon.height_weight", r.height_weight.to_string()),
            ("recon.learning_rate", r.learning_rate.to_string()),
            ("recon.lr_decay", r.lr_decay.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("survey.tilt_deg", "25").unwrap();
        c.set("recon.epochs", "12").unwrap();
        c.set("estimator", "gt-normals").unwrap();
        c.set("survey.lines_per_set", "auto").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back.recon.epochs, 12);
        assert_eq!(back.estimator, EstimatorChoice::GtNormals);
        assert_eq!(back.survey.lines_per_set, None);
        assert!((back.survey.tilt - c.survey.tilt).abs() < 1e-12);
        assert_eq!(back.terrain, c.terrain);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse("# header\nseed = 3\nrecon.epoch = 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(RunConfig::parse("seed 3").is_err());
        assert!(RunConfig::parse("recon.epochs = many").is_err());
        assert!(RunConfig::parse("estimator = cnn").is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut c = RunConfig::default();
        c.set_assignment("seed=9").unwrap();
        assert_eq!((c.survey().seed, c.train().seed, c.recon().seed), (9, 9, 9));
        assert!(c.set_assignment("seed").is_err());
    }

    #[test]
    fn flat_features() {
        let c = RunConfig::parse("terrain.features = flat").unwrap();
        assert!(c.terrain.hills.is_empty() && c.terrain.rocks.count == 0);
        assert!(c.to_text().contains("terrain.features = flat"));
    }
}
