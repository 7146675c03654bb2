//! Experiment configuration: a TOML file layered over defaults, then
//! `--set section.key=value` overrides, validated before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use mtd::forward::DownsampleOp;
use mtd::image::{DatasetSpec, Normalization};
use mtd::optimizer::{InitPolicy, Mode, RecoveryConfig};
use mtd::score::{pattern_mixture, GaussianPrior, NeuralScoreNet, ScoreProvider};
use mtd::{Image64, MtdError};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub synthesis: SynthesisSection,
    pub recovery: RecoverySection,
    pub prior: PriorSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub crop_margin: usize,
    /// Side of the target image (the high-resolution side in super-resolution).
    pub side: usize,
    /// `max_one`, `unit_frobenius` or `none`.
    pub normalization: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub n: usize,
    pub sub_measurements: usize,
    pub gamma: f64,
    /// Noise level as SNR; ignored when `sigma2` is set.
    pub snr: f64,
    pub sigma2: Option<f64>,
    pub tile_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySection {
    pub momentum: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub score_factor: f64,
    /// `standard` or `superres`.
    pub mode: String,
    /// Measured copy side in super-resolution mode.
    pub l_low: Option<usize>,
    /// Warm-start image; uniform random initialization when absent.
    pub init: Option<PathBuf>,
    pub restarts: usize,
    pub log_every: usize,
    pub project_unit_box: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    /// `none`, `gaussian`, `gmm` or `neural`.
    pub kind: String,
    /// Isotropic variance of the Gaussian prior or of each mixture component.
    pub variance: f64,
    /// Mean image of the Gaussian prior.
    pub mean: Option<PathBuf>,
    /// `SCORENET1` weights of the neural prior.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub snr: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seed: 1,
            dataset: DatasetSection::default(),
            synthesis: SynthesisSection::default(),
            recovery: RecoverySection::default(),
            prior: PriorSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            crop_margin: 0,
            side: 8,
            normalization: "max_one".into(),
        }
    }
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            n: 512,
            sub_measurements: 4,
            gamma: 0.1,
            snr: 1.0,
            sigma2: None,
            tile_rows: 1024,
        }
    }
}

impl Default for RecoverySection {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            learning_rate: 2.0,
            iterations: 2000,
            score_factor: 0.0,
            mode: "standard".into(),
            l_low: None,
            init: None,
            restarts: 3,
            log_every: 100,
            project_unit_box: false,
        }
    }
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            variance: 0.0101,
            mean: None,
            weights: None,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            snr: vec![0.1, 0.5, 1.0, 2.0, 10.0],
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{key} is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, overlaid by `file` (if any), then by `overrides`, then validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(Self::default())
            .map_err(|e| config_error(format!("cannot serialize defaults: {e}")))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            let parsed: toml::Table = toml::from_str(&text)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset_spec()?;
        let s = &self.synthesis;
        if s.n == 0 || s.sub_measurements == 0 || s.tile_rows == 0 {
            return Err(config_error(
                "synthesis.n, sub_measurements and tile_rows must be positive",
            ));
        }
        if !(s.gamma > 0.0 && s.gamma.is_finite()) {
            return Err(config_error(format!("synthesis.gamma = {} must be positive", s.gamma)));
        }
        if !(s.snr > 0.0) {
            return Err(config_error("synthesis.snr must be positive"));
        }
        if matches!(s.sigma2, Some(v) if !(v >= 0.0 && v.is_finite())) {
            return Err(config_error("synthesis.sigma2 must be finite and >= 0"));
        }
        if self.recovery.restarts == 0 {
            return Err(config_error("recovery.restarts must be >= 1"));
        }
        self.mode()?;
        self.recovery_config(None)
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        match self.prior.kind.as_str() {
            "none" | "gmm" => {}
            "gaussian" if self.prior.mean.is_some() => {}
            "neural" if self.prior.weights.is_some() => {}
            "gaussian" => return Err(config_error("prior.kind = gaussian needs prior.mean")),
            "neural" => return Err(config_error("prior.kind = neural needs prior.weights")),
            other => return Err(config_error(format!("unknown prior.kind {other:?}"))),
        }
        if self.prior.kind != "none" && !(self.prior.variance > 0.0) {
            return Err(config_error("prior.variance must be positive"));
        }
        if self.sweep.snr.iter().any(|v| !(*v > 0.0)) {
            return Err(config_error("sweep.snr values must be positive"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, CliError> {
        let normalization = match self.dataset.normalization.as_str() {
            "max_one" => Normalization::MaxOne,
            "unit_frobenius" => Normalization::UnitFrobenius,
            "none" => Normalization::None,
            other => {
                return Err(config_error(format!(
                    "unknown dataset.normalization {other:?}"
                )))
            }
        };
        Ok(DatasetSpec::new(self.dataset.crop_margin, self.dataset.side)
            .map_err(|e| config_error(e.to_string()))?
            .with_normalization(normalization))
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        match (self.recovery.mode.as_str(), self.recovery.l_low) {
            ("standard", _) => Ok(Mode::Standard),
            ("superres", Some(low)) => DownsampleOp::new(self.dataset.side, low)
                .map(Mode::SuperRes)
                .map_err(|e| config_error(e.to_string())),
            ("superres", None) => Err(config_error("recovery.mode = superres needs recovery.l_low")),
            (other, _) => Err(config_error(format!("unknown recovery.mode {other:?}"))),
        }
    }

    /// Side of the planted copies: `L_low` in super-resolution, else the target side.
    pub fn measured_side(&self) -> usize {
        match self.mode() {
            Ok(Mode::SuperRes(op)) => op.l_low(),
            _ => self.dataset.side,
        }
    }

    pub fn recovery_config(&self, warm_start: Option<Image64>) -> RecoveryConfig<f64> {
        let r = &self.recovery;
        RecoveryConfig {
            momentum: r.momentum,
            learning_rate: r.learning_rate,
            iterations: r.iterations,
            score_factor: r.score_factor,
            mode: self.mode().unwrap_or(Mode::Standard),
            init: warm_start.map_or(InitPolicy::UniformRandom, InitPolicy::WarmStart),
            seed: self.seed,
            log_every: r.log_every,
            project_unit_box: r.project_unit_box,
        }
    }

    /// Builds the configured prior on `side × side` images.
    pub fn prior(&self, side: usize) -> Result<ScoreProvider<f64>, CliError> {
        let p = &self.prior;
        let provider = match p.kind.as_str() {
            "none" => ScoreProvider::zero(side),
            "gmm" => ScoreProvider::Gmm(pattern_mixture(side, p.variance)?),
            "gaussian" => {
                let mean = crate::commands::read_image(p.mean.as_deref().expect("validated"), None)?;
                ScoreProvider::Gaussian(GaussianPrior::isotropic(mean, p.variance)?)
            }
            "neural" => {
                let net = NeuralScoreNet::load(p.weights.as_deref().expect("validated"))?;
                let err = net.parity_error()?;
                if !(err <= 1e-5) {
                    return Err(CliError::Core(MtdError::Format(format!(
                        "score network fails its parity check (max deviation {err:e})"
                    ))));
                }
                ScoreProvider::Neural(net)
            }
            other => return Err(config_error(format!("unknown prior.kind {other:?}"))),
        };
        if mtd::score::Score::side(&provider) != side {
            return Err(CliError::Core(MtdError::Shape(format!(
                "prior is defined on {0}x{0} images, recovery needs {side}x{side}",
                mtd::score::Score::side(&provider)
            ))));
        }
        Ok(provider)
    }

    /// Writes the resolved configuration as `config.toml` into `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| config_error(format!("cannot serialize config: {e}")))?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = ExperimentConfig::resolve(
            None,
            &[
                "recovery.learning_rate=5".into(),
                "prior.kind=gmm".into(),
                "sweep.snr=[1.0, 2.0]".into(),
                "recovery.learning_rate = 7.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.recovery.learning_rate, 7.5);
        assert_eq!(cfg.prior.kind, "gmm");
        assert_eq!(cfg.sweep.snr, vec![1.0, 2.0]);
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        for bad in [
            "recovery.momentum=1.0",
            "recovery.mode=superres",
            "prior.kind=neural",
            "synthesis.sub_measurements=0",
            "dataset.normalization=\"log\"",
            "recovery.bogus=1",
            "nokeyvalue",
        ] {
            let r = ExperimentConfig::resolve(None, &[bad.into()]);
            assert!(matches!(r, Err(CliError::Config(_))), "{bad}: {r:?}");
        }
    }

    #[test]
    fn file_layer_sits_between_defaults_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 9\n[recovery]\niterations = 10\nmode = \"superres\"\nl_low = 4\n").unwrap();
        let cfg = ExperimentConfig::resolve(Some(&path), &["seed=3".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.recovery.iterations, 10);
        assert_eq!(cfg.measured_side(), 4);
        assert_eq!(cfg.recovery.momentum, 0.99);
    }
}
