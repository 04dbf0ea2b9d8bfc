//! Pipeline configuration file: strict JSON (unknown keys rejected) with
//! sensible defaults for every field. Paths inside the config resolve
//! relative to the config file's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use svbackend::error::{Error, Result};
use svbackend::metrics::CostParams;
use svbackend::plda::{EnrollMode, TrainOptions};
use svbackend::recipe::DEFAULT_RECIPE;
use svbackend::score_norm::DEFAULT_TOP_N;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Plda,
    Mixture,
    Cosine,
    CosineCl,
}

impl BackendKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "plda" => Ok(BackendKind::Plda),
            "mixture" => Ok(BackendKind::Mixture),
            "cosine" => Ok(BackendKind::Cosine),
            "cosine-cl" => Ok(BackendKind::CosineCl),
            other => Err(Error::config(format!(
                "unknown backend '{other}' (expected plda, mixture, cosine, cosine-cl)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Plda => "plda",
            BackendKind::Mixture => "mixture",
            BackendKind::Cosine => "cosine",
            BackendKind::CosineCl => "cosine-cl",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SnormRaw {
    enabled: bool,
    top_n: usize,
}

impl Default for SnormRaw {
    fn default() -> Self {
        SnormRaw {
            enabled: false,
            top_n: DEFAULT_TOP_N,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ChannelNormRaw {
    enabled: bool,
    stats_path: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PldaRaw {
    iterations: usize,
    subspace_rank: Option<usize>,
    tol: f64,
}

impl Default for PldaRaw {
    fn default() -> Self {
        let d = TrainOptions::default();
        PldaRaw {
            iterations: d.iterations,
            subspace_rank: d.subspace_rank,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    recipe: String,
    backend: String,
    languages: Vec<String>,
    snorm: SnormRaw,
    channel_norm: ChannelNormRaw,
    cost: CostParams,
    seed: u64,
    plda: PldaRaw,
    multi_enroll: String,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            recipe: DEFAULT_RECIPE.to_string(),
            backend: "plda".to_string(),
            languages: vec!["eng".into(), "cmn".into(), "yue".into()],
            snorm: SnormRaw::default(),
            channel_norm: ChannelNormRaw::default(),
            cost: CostParams::default(),
            seed: 0,
            plda: PldaRaw::default(),
            multi_enroll: "set".to_string(),
        }
    }
}

/// Resolved pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub recipe: String,
    pub backend: BackendKind,
    pub languages: Vec<String>,
    pub snorm_enabled: bool,
    pub snorm_top_n: usize,
    pub channel_norm_enabled: bool,
    pub channel_stats_path: Option<PathBuf>,
    pub cost: CostParams,
    pub seed: u64,
    pub plda_iterations: usize,
    pub plda_subspace_rank: Option<usize>,
    pub plda_tol: f64,
    pub enroll_mode: EnrollMode,
}

impl PipelineConfig {
    pub fn defaults() -> Self {
        RawConfig::default().resolve(Path::new(".")).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: RawConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        raw.resolve(base)
    }

    pub fn train_options(&self, seed_override: Option<u64>) -> TrainOptions {
        TrainOptions {
            iterations: self.plda_iterations,
            subspace_rank: self.plda_subspace_rank,
            seed: seed_override.unwrap_or(self.seed),
            tol: self.plda_tol,
        }
    }
}

impl RawConfig {
    fn resolve(self, base: &Path) -> Result<PipelineConfig> {
        let backend = BackendKind::parse(&self.backend)?;
        let enroll_mode = EnrollMode::parse(&self.multi_enroll).ok_or_else(|| {
            Error::config(format!(
                "unknown multi_enroll '{}' (expected set or average)",
                self.multi_enroll
            ))
        })?;
        self.cost.validate()?;
        if self.snorm.enabled && self.snorm.top_n == 0 {
            return Err(Error::config("snorm.top_n must be >= 1"));
        }
        if self.plda.iterations == 0 {
            return Err(Error::config("plda.iterations must be >= 1"));
        }
        let channel_stats_path = self
            .channel_norm
            .stats_path
            .as_ref()
            .map(|p| base.join(p));
        Ok(PipelineConfig {
            recipe: self.recipe,
            backend,
            languages: self.languages,
            snorm_enabled: self.snorm.enabled,
            snorm_top_n: self.snorm.top_n,
            channel_norm_enabled: self.channel_norm.enabled,
            channel_stats_path,
            cost: self.cost,
            seed: self.seed,
            plda_iterations: self.plda.iterations,
            plda_subspace_rank: self.plda.subspace_rank,
            plda_tol: self.plda.tol,
            enroll_mode,
        })
    }
}
