//! The run configuration file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use tc_core::backbone::BackboneConfig;
use tc_core::evaluation::SplitMode;
use tc_core::mil::{MilHeadConfig, MilHeadKind, MilTrainConfig};
use tc_core::optim::AdamWConfig;
use tc_core::synthetic::{CenterProfile, TaskKind};
use tc_core::trainer::{TaskSpec, TrainerConfig};

use crate::compress::CompressionConfig;
use crate::error::{Result, TcError};
use crate::fixture::FixtureSpec;

fn default_tasks() -> Vec<TaskSpec> {
    TaskKind::ALL.iter().map(|&k| TaskSpec::new(k.as_str(), k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub accumulation: usize,
    pub batch_size: usize,
    /// Absolute number of micro-steps to reach.
    pub total_steps: u64,
    /// Checkpoint interval in optimizer steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub optimizer: AdamWConfig,
    pub freeze_encoder: bool,
    pub score_threshold: f64,
    pub decoder_dim: Option<usize>,
    /// Validation samples per task scored after training; all when absent.
    pub eval_limit: Option<usize>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            accumulation: t.accumulation,
            batch_size: t.batch_size,
            total_steps: 2560,
            checkpoint_every: 0,
            optimizer: t.optimizer,
            freeze_encoder: t.freeze_encoder,
            score_threshold: t.score_threshold,
            decoder_dim: None,
            eval_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilSection {
    pub head: MilHeadKind,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub classes: usize,
    pub train: MilTrainConfig,
}

impl Default for MilSection {
    fn default() -> Self {
        let h = MilHeadConfig::new(MilHeadKind::MaxPool, 1, 32, 2);
        Self {
            head: h.kind,
            hidden_dim: h.hidden_dim,
            attention_dim: h.attention_dim,
            dropout: h.dropout,
            leaky_slope: h.leaky_slope,
            classes: h.classes,
            train: MilTrainConfig::default(),
        }
    }
}

impl MilSection {
    pub fn head_config(&self, kind: MilHeadKind, in_channels: usize, seed: u64) -> MilHeadConfig {
        MilHeadConfig {
            kind,
            in_channels,
            hidden_dim: self.hidden_dim,
            classes: self.classes,
            attention_dim: self.attention_dim,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
            seed,
        }
    }
}

/// Split selector as written on the command line: `cross-center`, `kfold:N` or `holdout`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    CrossCenter,
    KFold(usize),
    Holdout,
}

impl FromStr for SplitArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cross-center" => Ok(SplitArg::CrossCenter),
            "holdout" => Ok(SplitArg::Holdout),
            _ => match s.strip_prefix("kfold:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 2 => Ok(SplitArg::KFold(k)),
                _ => Err(format!("unknown split `{s}`; expected cross-center, kfold:N (N >= 2) or holdout")),
            },
        }
    }
}

impl fmt::Display for SplitArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitArg::CrossCenter => f.write_str("cross-center"),
            SplitArg::KFold(k) => write!(f, "kfold:{k}"),
            SplitArg::Holdout => f.write_str("holdout"),
        }
    }
}

impl Serialize for SplitArg {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitArg {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub n_per_class: Vec<usize>,
    pub n_seeds: usize,
    /// Size of the patch dataset before the train/test split.
    pub patches: usize,
    pub classes: usize,
    pub test_fraction: f64,
    pub center: CenterProfile,
    pub data_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_per_class: vec![1, 3, 5, 10, 25],
            n_seeds: 10,
            patches: 160,
            classes: tc_core::synthetic::DEFAULT_TEXTURE_CLASSES,
            test_fraction: 0.2,
            center: CenterProfile::neutral(),
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: SplitArg,
    /// Centers used for training and validation in cross-center mode.
    pub train_centers: Vec<String>,
    /// Test share in holdout mode.
    pub test_fraction: f64,
    /// One MIL run per seed.
    pub seeds: Vec<u64>,
    pub ablation: AblationConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: SplitArg::CrossCenter, train_centers: vec!["A".into()], test_fraction: 0.2, seeds: vec![0], ablation: AblationConfig::default() }
    }
}

impl EvalSection {
    pub fn split_mode(&self, arg: SplitArg) -> SplitMode {
        match arg {
            SplitArg::CrossCenter => SplitMode::CrossCenter { train_centers: self.train_centers.clone() },
            SplitArg::KFold(k) => SplitMode::KFold { k },
            SplitArg::Holdout => SplitMode::Holdout { test_fraction: self.test_fraction },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
    pub trainer: TrainerSection,
    pub compression: CompressionConfig,
    pub mil: MilSection,
    pub eval: EvalSection,
    pub fixture: FixtureSpec,
    /// Seeds the backbone initialization, the trainer and the MIL heads.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            tasks: default_tasks(),
            trainer: TrainerSection::default(),
            compression: CompressionConfig::default(),
            mil: MilSection::default(),
            eval: EvalSection::default(),
            fixture: FixtureSpec::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

fn config_error(file: &str, at: &str, reason: impl fmt::Display) -> TcError {
    TcError::Config { file: file.into(), at: if at.is_empty() { ".".into() } else { at.into() }, reason: reason.to_string() }
}

impl RunConfig {
    /// Strict parse; errors carry the JSON path of the offending value.
    pub fn from_json(text: &str, file: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            config_error(file, &at, e.into_inner())
        })?;
        cfg.validate(file)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| config_error(&file, "", format!("cannot read config file {file}: {e}")))?;
        Self::from_json(&text, &file)
    }

    pub fn validate(&self, file: &str) -> Result<()> {
        self.trainer_config().validate().map_err(|e| config_error(file, "trainer", e))?;
        if self.trainer.total_steps < self.trainer.accumulation as u64 {
            return Err(config_error(file, "trainer.total_steps", format!("must be at least trainer.accumulation ({})", self.trainer.accumulation)));
        }
        self.mil.train.validate().map_err(|e| config_error(file, "mil.train", e))?;
        self.mil.head_config(self.mil.head, self.backbone.embed_dim, self.seed).validate().map_err(|e| config_error(file, "mil", e))?;
        let c = &self.compression;
        if c.patch_size != self.backbone.input_size {
            return Err(config_error(file, "compression.patch_size", format!("must equal backbone.input_size ({})", self.backbone.input_size)));
        }
        if c.stride == 0 {
            return Err(config_error(file, "compression.stride", "must be positive"));
        }
        if !(c.mpp > 0.0 && c.mpp.is_finite()) {
            return Err(config_error(file, "compression.mpp", "must be positive"));
        }
        let e = &self.eval;
        if e.seeds.is_empty() {
            return Err(config_error(file, "eval.seeds", "needs at least one seed"));
        }
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(config_error(file, "eval.test_fraction", "must lie in (0, 1)"));
        }
        let a = &e.ablation;
        if a.n_per_class.is_empty() || a.n_per_class.contains(&0) {
            return Err(config_error(file, "eval.ablation.n_per_class", "needs positive sizes"));
        }
        if a.n_seeds == 0 || a.classes < 2 || !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
            return Err(config_error(file, "eval.ablation", "needs n_seeds >= 1, classes >= 2 and test_fraction in (0, 1)"));
        }
        if self.fixture.centers.is_empty() || self.fixture.slides_per_center == 0 {
            return Err(config_error(file, "fixture", "needs at least one center and one slide per center"));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig { seed: self.seed, ..self.backbone.clone() }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            backbone: self.backbone_config(),
            decoder_dim: t.decoder_dim,
            tasks: self.tasks.clone(),
            optimizer: t.optimizer,
            accumulation: t.accumulation,
            batch_size: t.batch_size,
            seed: self.seed,
            freeze_encoder: t.freeze_encoder,
            score_threshold: t.score_threshold,
        }
    }

    pub fn mil_train_config(&self, seed: u64) -> MilTrainConfig {
        MilTrainConfig { seed, ..self.mil.train.clone() }
    }

    /// The output root: the flag, then `TC_OUTPUT_DIR` (handled by the CLI), then the config, then `./runs`.
    pub fn output_root(&self, arg: Option<&Path>) -> PathBuf {
        arg.map(Path::to_path_buf).or_else(|| self.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}", "t").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.trainer.accumulation, 128);
        assert_eq!(cfg.mil.train.epochs, 100);
        assert_eq!(cfg.mil.train.label_smoothing, 0.1);
        assert_eq!(cfg.tasks.len(), 3);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_json(r#"{"trainer": {"accumulaton": 4}}"#, "cfg.json").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("trainer"), "{msg}");
        assert!(msg.contains("accumulaton"), "{msg}");
        let err = RunConfig::from_json(r#"{"mil": {"train": {"epochs": "many"}}}"#, "cfg.json").unwrap_err();
        assert!(err.to_string().contains("mil.train.epochs"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = RunConfig::from_json(r#"{"trainer": {"accumulation": 0}}"#, "c").unwrap_err();
        assert!(err.to_string().contains("`trainer`"), "{err}");
        let err = RunConfig::from_json(r#"{"trainer": {"accumulation": 8, "total_steps": 4}}"#, "c").unwrap_err();
        assert!(err.to_string().contains("trainer.total_steps"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.eval.split = SplitArg::KFold(5);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&json, "t").unwrap(), cfg);
    }

    #[test]
    fn split_args_parse() {
        assert_eq!("kfold:5".parse::<SplitArg>().unwrap(), SplitArg::KFold(5));
        assert_eq!("cross-center".parse::<SplitArg>().unwrap(), SplitArg::CrossCenter);
        assert!("kfold:1".parse::<SplitArg>().is_err());
        assert!("kfold".parse::<SplitArg>().is_err());
        assert_eq!(SplitArg::KFold(3).to_string(), "kfold:3");
    }
}
