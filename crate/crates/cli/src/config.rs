//! The experiment configuration: one JSON document with every default
//! embedded, echoed into the output directory for provenance.

use std::path::Path;

use ifgmi_core::attack::AttackConfig;
use ifgmi_core::data::ShiftConfig;
use ifgmi_core::metrics::DistanceMode;
use ifgmi_core::models::{ClassifierTrainConfig, PriorTrainConfig};
use ifgmi_core::seed;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MILD_SIGMA: f64 = 0.35;
pub const STRONG_SIGMA: f64 = 0.9;

/// A public-corpus shift: a preset name or an explicit σ in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shift {
    Sigma(f64),
    Preset(String),
}

impl Shift {
    pub fn mild() -> Self {
        Shift::Preset("mild".into())
    }

    pub fn strong() -> Self {
        Shift::Preset("strong".into())
    }

    pub fn sigma(&self) -> Result<f64> {
        let s = match self {
            Shift::Sigma(s) => *s,
            Shift::Preset(name) => match name.as_str() {
                "none" => 0.0,
                "mild" => MILD_SIGMA,
                "strong" => STRONG_SIGMA,
                other => return Err(CliError::config(format!("unknown shift preset `{other}` (none, mild, strong)"))),
            },
        };
        if !(0.0..=1.0).contains(&s) {
            return Err(CliError::config(format!("shift σ = {s} outside [0, 1]")));
        }
        Ok(s)
    }

    pub fn shift_config(&self) -> Result<ShiftConfig> {
        Ok(ShiftConfig::new(self.sigma()?))
    }

    /// File-name tag: the preset name, or `sigma<value>`.
    pub fn label(&self) -> String {
        match self {
            Shift::Preset(name) => name.clone(),
            Shift::Sigma(s) => format!("sigma{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub public_size: usize,
    /// The public corpus the prior is trained on.
    pub shift: Shift,
    /// Additional public corpora written by `gen-data`.
    pub also_emit: Vec<Shift>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            identities: 10,
            per_identity: 50,
            public_size: 2000,
            shift: Shift::mild(),
            also_emit: vec![Shift::strong()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub prior: PriorTrainConfig,
    pub classifier: ClassifierTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Method {
    /// Intermediate-feature attack with `depth` split points.
    Ifgmi { depth: usize },
    Latent,
    Pixel,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Ifgmi { depth } => format!("ifgmi-L{depth}"),
            Method::Latent => "latent".into(),
            Method::Pixel => "pixel".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub pixel_steps: usize,
    pub latent_steps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { pixel_steps: 500, latent_steps: 70 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub prdc: bool,
    pub k: usize,
    pub distance: DistanceMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { prdc: true, k: ifgmi_core::metrics::DEFAULT_PRDC_K, distance: DistanceMode::PerSample }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub repeats: usize,
    /// Multipliers applied to the attack radii on the `radii` axis.
    pub radii_scales: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { repeats: 5, radii_scales: vec![0.0, 0.5, 1.0, 2.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub training: TrainingConfig,
    pub attack: AttackConfig,
    pub methods: Vec<Method>,
    pub baselines: BaselineConfig,
    pub metrics: MetricsConfig,
    /// Attack repetitions per method, each with its own derived seed.
    pub repeats: usize,
    /// Target classes; all identities when absent.
    pub classes: Option<Vec<usize>>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            training: TrainingConfig::default(),
            attack: AttackConfig::default(),
            methods: vec![Method::Ifgmi { depth: 3 }, Method::Latent, Method::Pixel],
            baselines: BaselineConfig::default(),
            metrics: MetricsConfig::default(),
            repeats: 1,
            classes: None,
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CliError::missing("config", p),
                    _ => CliError::io(format!("reading {}", p.display()), e),
                })?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.identities < 2 || c.per_identity < 20 {
            return Err(CliError::config("corpus needs at least 2 identities and 20 images per identity"));
        }
        c.shift.sigma()?;
        for s in &c.also_emit {
            s.sigma()?;
        }
        if self.methods.is_empty() {
            return Err(CliError::config("method list is empty"));
        }
        self.attack.validate()?;
        for m in &self.methods {
            if let Method::Ifgmi { depth } = m {
                self.attack_for_depth(*depth)?;
            }
        }
        if self.repeats == 0 || self.ablation.repeats == 0 {
            return Err(CliError::config("repeats must be positive"));
        }
        if self.metrics.k == 0 {
            return Err(CliError::config("PRDC k must be positive"));
        }
        if let Some(bad) = self.ablation.radii_scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(CliError::config(format!("radius scale {bad} must be finite and non-negative")));
        }
        if let Some(classes) = &self.classes {
            if classes.is_empty() {
                return Err(CliError::config("class list is empty"));
            }
            if let Some(bad) = classes.iter().find(|&&k| k >= c.identities) {
                return Err(CliError::config(format!("class {bad} outside 0..{}", c.identities)));
            }
        }
        Ok(())
    }

    pub fn target_classes(&self) -> Vec<usize> {
        self.classes.clone().unwrap_or_else(|| (0..self.corpus.identities).collect())
    }

    /// The base attack truncated or rebuilt for `depth` intermediate stages.
    /// Deeper than the base keeps its optimiser and selection settings.
    pub fn attack_for_depth(&self, depth: usize) -> Result<AttackConfig> {
        if depth <= self.attack.depth() {
            return Ok(self.attack.truncated(depth)?);
        }
        let fresh = AttackConfig::with_depth(depth)?;
        Ok(AttackConfig { splits: fresh.splits, steps: fresh.steps, radii: fresh.radii, ..self.attack.clone() })
    }

    /// Pretty JSON echo and its SHA-256.
    pub fn echo(&self) -> Result<(String, String)> {
        let text = serde_json::to_string_pretty(self)?;
        let hash = seed::hex_digest(text.as_bytes());
        Ok((text, hash))
    }
}
