//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Every key has a default; `out_dir` defaults to `run`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::icnn::MaskMode;
use crate::imaging::SynthConfig;
use crate::inference::{InferenceMode, ModelTrainConfig};
use crate::metrics::default_grid;
use crate::net::{parse_layers, NetworkSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Where the image and label planes live; `<out_dir>/data` by default.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub planes: usize,
    /// Extra synthetic planes written as `test_*` and given ensemble maps.
    pub test_planes: usize,
    pub synth: SynthConfig,
    pub base_spec: NetworkSpec,
    pub base: ModelTrainConfig,
    pub folds: usize,
    pub icnn_spec: NetworkSpec,
    pub icnn: ModelTrainConfig,
    /// Refinement networks, each validated on its own disjoint planes.
    pub icnn_models: usize,
    /// Reapply the refinement network's correction curve after each round.
    pub recalibrate: bool,
    pub rounds: usize,
    pub grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 20,
            patience: 4,
            patches_per_epoch: 4000,
            seed: 0,
            augment: true,
            mask_mode: MaskMode::ConstantZero,
        };
        let base = ModelTrainConfig {
            train: train.clone(),
            val_planes: 3,
            val_patches: 2000,
            calibration_bins: 10,
            tta: true,
            mode: InferenceMode::Dense,
        };
        let icnn = ModelTrainConfig { val_planes: 5, tta: false, ..base.clone() };
        Self {
            out_dir: PathBuf::from("run"),
            data_dir: None,
            seed: 0,
            planes: 30,
            test_planes: 0,
            synth: SynthConfig::default(),
            base_spec: NetworkSpec::desk(),
            base,
            folds: 5,
            icnn_spec: NetworkSpec::desk(),
            icnn,
            icnn_models: 2,
            recalibrate: true,
            rounds: 20,
            grid: default_grid(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn parse_mode(key: &str, value: &str) -> Result<InferenceMode> {
    match value {
        "dense" => Ok(InferenceMode::Dense),
        "patchwise" => Ok(InferenceMode::Patchwise),
        _ => Err(Error::Config(format!("bad inference mode `{value}` for `{key}`"))),
    }
}

fn mode_name(m: InferenceMode) -> &'static str {
    match m {
        InferenceMode::Dense => "dense",
        InferenceMode::Patchwise => "patchwise",
    }
}

/// Keys shared by the `base.` and `icnn.` sections.
fn set_model(spec: &mut NetworkSpec, m: &mut ModelTrainConfig, key: &str, sub: &str, value: &str) -> Result<bool> {
    match sub {
        "input_side" => spec.input_side = parse(key, value)?,
        "layers" => spec.layers = parse_layers(value).map_err(|e| Error::Config(e.to_string()))?,
        "lr" => m.train.lr = parse(key, value)?,
        "momentum" => m.train.momentum = parse(key, value)?,
        "batch_size" => m.train.batch_size = parse(key, value)?,
        "max_epochs" => m.train.max_epochs = parse(key, value)?,
        "patience" => m.train.patience = parse(key, value)?,
        "patches_per_epoch" => m.train.patches_per_epoch = parse(key, value)?,
        "augment" => m.train.augment = parse_bool(key, value)?,
        "val_planes" => m.val_planes = parse(key, value)?,
        "val_patches" => m.val_patches = parse(key, value)?,
        "calibration_bins" => m.calibration_bins = parse(key, value)?,
        "tta" => m.tta = parse_bool(key, value)?,
        "inference" => m.mode = parse_mode(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_model(out: &mut String, prefix: &str, spec: &NetworkSpec, m: &ModelTrainConfig) {
    let layers: Vec<String> = spec.layers.iter().map(|l| l.to_string()).collect();
    let t = &m.train;
    for (k, v) in [
        ("input_side", spec.input_side.to_string()),
        ("layers", layers.join(",")),
        ("lr", t.lr.to_string()),
        ("momentum", t.momentum.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("max_epochs", t.max_epochs.to_string()),
        ("patience", t.patience.to_string()),
        ("patches_per_epoch", t.patches_per_epoch.to_string()),
        ("augment", t.augment.to_string()),
        ("val_planes", m.val_planes.to_string()),
        ("val_patches", m.val_patches.to_string()),
        ("calibration_bins", m.calibration_bins.to_string()),
        ("tta", m.tta.to_string()),
        ("inference", mode_name(m.mode).to_string()),
    ] {
        writeln!(out, "{prefix}.{k}={v}").unwrap();
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key. Call [`RunConfig::validate`] after a batch of changes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "planes" => self.planes = parse(key, value)?,
            "test_planes" => self.test_planes = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "grid" => {
                self.grid = value.split(',').map(|t| parse(key, t.trim())).collect::<Result<_>>()?;
            }
            "synth.height" => self.synth.height = parse(key, value)?,
            "synth.width" => self.synth.width = parse(key, value)?,
            "synth.cells" => self.synth.cell_count = parse(key, value)?,
            "synth.membrane_width" => self.synth.membrane_width = parse(key, value)?,
            "synth.noise" => self.synth.noise_sigma = parse(key, value)?,
            "synth.blur" => self.synth.blur_sigma = parse(key, value)?,
            "synth.clutter" => self.synth.clutter_density = parse(key, value)?,
            "icnn.models" => self.icnn_models = parse(key, value)?,
            "icnn.recalibrate" => self.recalibrate = parse_bool(key, value)?,
            "icnn.mask_mode" => self.icnn.train.mask_mode = value.parse()?,
            _ => {
                let known = if let Some(sub) = key.strip_prefix("base.") {
                    set_model(&mut self.base_spec, &mut self.base, key, sub, value)?
                } else if let Some(sub) = key.strip_prefix("icnn.") {
                    set_model(&mut self.icnn_spec, &mut self.icnn, key, sub, value)?
                } else {
                    false
                };
                if !known {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.synth.validate().map_err(cfg_err)?;
        self.base_spec.shapes().map_err(cfg_err)?;
        self.icnn_spec.shapes().map_err(cfg_err)?;
        self.base.train.validate()?;
        self.icnn.train.validate()?;
        if self.planes == 0 {
            return Err(Error::Config("planes must be >= 1".into()));
        }
        if self.folds < 2 || self.planes % self.folds != 0 {
            return Err(Error::Config(format!("{} folds do not evenly divide {} planes", self.folds, self.planes)));
        }
        if self.base.val_planes == 0 || self.base.val_planes >= self.planes - self.planes / self.folds {
            return Err(Error::Config("base.val_planes must leave training planes in every fold".into()));
        }
        if self.icnn_models == 0 || self.icnn.val_planes == 0 || self.icnn_models * self.icnn.val_planes >= self.planes {
            return Err(Error::Config(
                "icnn.models * icnn.val_planes must be positive and below the plane count".into(),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.grid.is_empty()
            || self.grid.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.grid.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(Error::Config("grid must be increasing thresholds in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    /// Every key with its current value, in a form [`RunConfig::parse`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "out_dir={}", self.out_dir.display()).unwrap();
        if let Some(d) = &self.data_dir {
            writeln!(out, "data_dir={}", d.display()).unwrap();
        }
        let grid: Vec<String> = self.grid.iter().map(|t| t.to_string()).collect();
        let s = &self.synth;
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("planes", self.planes.to_string()),
            ("test_planes", self.test_planes.to_string()),
            ("folds", self.folds.to_string()),
            ("rounds", self.rounds.to_string()),
            ("grid", grid.join(",")),
            ("synth.height", s.height.to_string()),
            ("synth.width", s.width.to_string()),
            ("synth.cells", s.cell_count.to_string()),
            ("synth.membrane_width", s.membrane_width.to_string()),
            ("synth.noise", s.noise_sigma.to_string()),
            ("synth.blur", s.blur_sigma.to_string()),
            ("synth.clutter", s.clutter_density.to_string()),
        ] {
            writeln!(out, "{k}={v}").unwrap();
        }
        write_model(&mut out, "base", &self.base_spec, &self.base);
        write_model(&mut out, "icnn", &self.icnn_spec, &self.icnn);
        writeln!(out, "icnn.models={}", self.icnn_models).unwrap();
        writeln!(out, "icnn.recalibrate={}", self.recalibrate).unwrap();
        writeln!(out, "icnn.mask_mode={}", self.icnn.train.mask_mode).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "42").unwrap();
        cfg.set("icnn.mask_mode", "uniform_noise").unwrap();
        cfg.set("base.layers", "conv3x3:8,relu,pool2x2/2,conv3x3:8,relu,pool2x2/2,fc:16,relu,softmax").unwrap();
        cfg.set("base.input_side", "13").unwrap();
        cfg.set("data_dir", "/tmp/d").unwrap();
        cfg.set("grid", "0.3,0.5").unwrap();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# desk run\n\nseed = 7\nrounds=3\n").unwrap();
        assert_eq!((cfg.seed, cfg.rounds), (7, 3));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for text in ["sede=1", "seed", "seed=x", "base.lr=fast", "icnn.mask_mode=zero", "base.nope=1", "synth.noise=-1"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn rejects_inconsistent_counts() {
        assert!(RunConfig::parse("folds=7").is_err());
        assert!(RunConfig::parse("icnn.models=6").is_err());
        assert!(RunConfig::parse("base.input_side=18").is_err());
        assert!(RunConfig::parse("grid=0.5,0.3").is_err());
    }
}
