//! Experiment configuration: one structured text file drives every pipeline
//! stage; individual keys can be overridden from the command line, and the
//! resolved config is frozen into the run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GeneratorSpec, Shift};
use crate::diffusion::{make_schedule, ScheduleKind, VarianceSchedule};
use crate::error::{Error, Result};
use crate::extractor::AugmentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub generator: GeneratorSpec,
    pub n_pub_pre: usize,
    pub n_pub_ref: usize,
    pub n_prv: usize,
    /// Rigid shift applied to the private split (public-to-private gap).
    pub prv_rotation: f64,
    pub prv_translation: Vec<f64>,
    pub seed_pub_pre: u64,
    pub seed_pub_ref: u64,
    pub seed_prv: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::GaussianRing {
                modes: 8,
                radius: 2.0,
                sigma: 0.05,
            },
            n_pub_pre: 4000,
            n_pub_ref: 1000,
            n_prv: 4000,
            prv_rotation: std::f64::consts::PI / 8.0,
            prv_translation: vec![0.5, 0.3],
            seed_pub_pre: 101,
            seed_pub_ref: 102,
            seed_prv: 103,
        }
    }
}

impl DataConfig {
    pub fn prv_shift(&self) -> Option<Shift> {
        if self.prv_rotation == 0.0 && self.prv_translation.iter().all(|&t| t == 0.0) {
            None
        } else {
            Some(Shift {
                rotation_radians: self.prv_rotation,
                translation: self.prv_translation.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub t_embed_dim: usize,
    pub conditional: bool,
    pub class_embed_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            t_embed_dim: 8,
            conditional: false,
            class_embed_dim: 4,
            seed: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 301,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorStageConfig {
    pub temperature: f64,
    pub negatives_per_anchor: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub jitter_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub rotation_max_radians: f64,
    pub seed: u64,
}

impl Default for ExtractorStageConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            negatives_per_anchor: 63,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            feature_dim: 16,
            jitter_sigma: 0.05,
            scale_lo: 0.95,
            scale_hi: 1.05,
            rotation_max_radians: 0.0,
            seed: 401,
        }
    }
}

impl ExtractorStageConfig {
    pub fn augment(&self, dim: usize) -> AugmentConfig {
        AugmentConfig {
            jitter_sigma: self.jitter_sigma,
            scale_range: (self.scale_lo, self.scale_hi),
            rotation_max_radians: self.rotation_max_radians,
            flip_axes: vec![false; dim],
        }
    }

    pub fn contrastive(&self, key_timestep: u32) -> crate::extractor::ContrastiveConfig {
        crate::extractor::ContrastiveConfig {
            temperature: self.temperature,
            negatives_per_anchor: self.negatives_per_anchor,
            similarity: crate::extractor::Similarity::Cosine,
            key_timestep,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    /// Number of reference examples stored (prefix of the reference split).
    pub size: usize,
    pub entries_per_example: usize,
    pub seed: u64,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            size: 1000,
            entries_per_example: 1,
            seed: 501,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpStageConfig {
    pub clip_norm: f64,
    /// Explicit noise scale; mutually exclusive with `target_epsilon`.
    pub noise_scale: Option<f64>,
    /// Calibrate sigma to meet this epsilon over `iterations` steps.
    pub target_epsilon: Option<f64>,
    pub delta: f64,
    pub expected_batch: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub epsilon_budget: Option<f64>,
    pub loss_draws: usize,
    pub retrieval_topk: usize,
    pub seed: u64,
}

impl Default for DpStageConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_scale: None,
            target_epsilon: Some(10.0),
            delta: 1e-5,
            expected_batch: 64,
            iterations: 1500,
            learning_rate: 2e-4,
            epsilon_budget: None,
            loss_draws: 1,
            retrieval_topk: 1,
            seed: 601,
        }
    }
}

impl DpStageConfig {
    /// Resolve the noise scale: explicit when given, otherwise calibrated to
    /// the target epsilon over the configured iteration count.
    pub fn resolve_noise_scale(&self) -> Result<f64> {
        match (self.noise_scale, self.target_epsilon) {
            (Some(sigma), None) => Ok(sigma),
            (None, Some(target)) => crate::accountant::calibrate_sigma(
                target,
                self.delta,
                self.iterations.max(1),
                &crate::accountant::default_alpha_grid(),
            ),
            (Some(sigma), Some(_)) if sigma == 0.0 => Ok(0.0),
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "set either dp.noise_scale or dp.target_epsilon, not both".into(),
            )),
            (None, None) => Err(Error::InvalidConfig(
                "one of dp.noise_scale or dp.target_epsilon is required".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Full,
    Rag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub mode: SampleMode,
    pub model: ModelChoice,
    pub steps_early: u32,
    pub steps_late: u32,
    pub steps_full: u32,
    pub dump_trajectories: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            mode: SampleMode::Rag,
            model: ModelChoice::Finetuned,
            steps_early: 20,
            steps_late: 20,
            steps_full: 100,
            dump_trajectories: false,
            seed: 701,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nn_size: usize,
    pub retrieval_queries: usize,
    pub retrieval_topk: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nn_size: 5,
            retrieval_queries: 500,
            retrieval_topk: vec![1, 5],
            seed: 801,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Cut fractions: keys at `round(fraction_k * T)`, resume at
    /// `round(fraction_v * T)`.
    pub fraction_k: f64,
    pub fraction_v: f64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub extractor: ExtractorStageConfig,
    pub kb: KbConfig,
    pub dp: DpStageConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fraction_k: 0.8,
            fraction_v: 0.2,
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            extractor: ExtractorStageConfig::default(),
            kb: KbConfig::default(),
            dp: DpStageConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn k_timestep(&self) -> u32 {
        (self.fraction_k * self.schedule.timesteps as f64).round() as u32
    }

    pub fn v_timestep(&self) -> u32 {
        (self.fraction_v * self.schedule.timesteps as f64).round() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.fraction_v && self.fraction_v < self.fraction_k && self.fraction_k < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < fraction_v < fraction_k < 1, got ({}, {})",
                self.fraction_v, self.fraction_k
            )));
        }
        Ok(())
    }
}

/// Read and validate a config file, applying `key.path=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let body = std::fs::read_to_string(path)?;
    parse_config(&body, overrides)
}

/// Parse config text with overrides; an empty body yields the defaults.
pub fn parse_config(body: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let table: toml::Table =
        toml::from_str(body).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut value = toml::Value::Table(table);
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("override `{entry}` is not of the form key=value"))
    })?;
    let parsed = parse_override_value(raw);
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override path `{path}` crosses a non-table value"))
        })?;
        if i + 1 == segments.len() {
            table.insert(segment.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split never yields an empty iterator")
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let config = parse_config("", &[]).unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.k_timestep(), 80);
        assert_eq!(config.v_timestep(), 20);
        assert_eq!(config.dp.expected_batch, 64);
        assert_eq!(config.dp.delta, 1e-5);
        assert_eq!(config.schedule.timesteps, 100);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let body = r#"
fraction_v = 0.3

[dp]
iterations = 42
target_epsilon = 1.0

[data.generator]
kind = "blobs"
clusters = 3
dim = 4
center_range = 2.0
sigma = 0.1
"#;
        let config = parse_config(body, &[]).unwrap();
        assert_eq!(config.fraction_v, 0.3);
        assert_eq!(config.dp.iterations, 42);
        assert_eq!(config.dp.target_epsilon, Some(1.0));
        assert!(matches!(
            config.data.generator,
            GeneratorSpec::Blobs { clusters: 3, .. }
        ));
        // untouched sections keep defaults
        assert_eq!(config.pretrain, PretrainConfig::default());
    }

    #[test]
    fn cli_overrides_win() {
        let config = parse_config(
            "[dp]\niterations = 42\n",
            &[
                "dp.iterations=7".to_string(),
                "sample.mode=\"full\"".to_string(),
                "data.n_prv=128".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.dp.iterations, 7);
        assert_eq!(config.sample.mode, SampleMode::Full);
        assert_eq!(config.data.n_prv, 128);
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(parse_config("fraction_v = 0.9\n", &[]).is_err());
        assert!(parse_config("", &["fraction_k=1.5".into()]).is_err());
    }

    #[test]
    fn noise_scale_resolution_rules() {
        let mut dp = DpStageConfig::default();
        assert!(dp.resolve_noise_scale().unwrap() > 1.0);
        dp.noise_scale = Some(3.0);
        assert!(dp.resolve_noise_scale().is_err());
        dp.target_epsilon = None;
        assert_eq!(dp.resolve_noise_scale().unwrap(), 3.0);
        dp.noise_scale = None;
        assert!(dp.resolve_noise_scale().is_err());
        // sigma = 0 short-circuits calibration for testing mode
        dp.noise_scale = Some(0.0);
        dp.target_epsilon = Some(10.0);
        assert_eq!(dp.resolve_noise_scale().unwrap(), 0.0);
    }

    #[test]
    fn calibrated_sigma_matches_accountant() {
        let dp = DpStageConfig {
            iterations: 500,
            target_epsilon: Some(10.0),
            ..DpStageConfig::default()
        };
        let sigma = dp.resolve_noise_scale().unwrap();
        assert!((sigma - 25.477483378650476).abs() / sigma < 1e-5);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = toml::to_string(&config).unwrap();
        let parsed = parse_config(&text, &[]).unwrap();
        assert_eq!(config, parsed);
    }
}
