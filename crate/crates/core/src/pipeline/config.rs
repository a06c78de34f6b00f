//! Declarative run configuration.
//!
//! One TOML file selects vocabulary and manifest paths, the k sweep, beam
//! settings, reward weights, filtering options, and seeds. Relative paths
//! resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::BeamConfig;
use crate::error::{Error, Result};
use crate::grpo::RewardWeights;

fn default_seed() -> u64 {
    7
}
fn default_k_values() -> Vec<usize> {
    vec![1, 2, 5, 10]
}
fn default_operating_k() -> usize {
    2
}
fn default_dim() -> usize {
    crate::embedder::DEFAULT_DIM
}
fn default_beam_width() -> usize {
    4
}
fn default_max_len() -> usize {
    16
}
fn default_length_penalty() -> f64 {
    0.6
}
fn default_true() -> bool {
    true
}
fn default_min_correct_fraction() -> f64 {
    1.0
}
fn default_oracle() -> String {
    "base".into()
}
fn default_arms() -> Vec<Arm> {
    vec![Arm::Base]
}
fn default_variants_per_entry() -> usize {
    2
}
fn default_subsample() -> usize {
    1
}
fn default_scorer() -> String {
    "table".into()
}
fn default_vocab_arm() -> Arm {
    Arm::Base
}

/// A retrieval configuration arm: the raw vocabulary, the filtered one, or
/// the filtered one augmented with fuzzy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Base,
    Rada,
    Fuzzy,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Rada => "rada",
            Arm::Fuzzy => "fuzzy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSettings {
    #[serde(default = "default_beam_width")]
    pub width: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_length_penalty")]
    pub length_penalty: f64,
}

impl Default for BeamSettings {
    fn default() -> Self {
        BeamSettings {
            width: default_beam_width(),
            max_len: default_max_len(),
            length_penalty: default_length_penalty(),
        }
    }
}

impl BeamSettings {
    pub fn to_beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam_width: self.width,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadaSettings {
    #[serde(default)]
    pub enabled: bool,
    /// `base` (simulated recognizer), `echo`, `null`, or `dropout:<p>`.
    #[serde(default = "default_oracle")]
    pub oracle: String,
    #[serde(default = "default_min_correct_fraction")]
    pub min_correct_fraction: f64,
}

impl Default for RadaSettings {
    fn default() -> Self {
        RadaSettings {
            enabled: false,
            oracle: default_oracle(),
            min_correct_fraction: default_min_correct_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSettings {
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    #[serde(default = "default_variants_per_entry")]
    pub fuzzy_variants_per_entry: usize,
    /// Frame subsampling factor applied to audio proxies before pooling.
    #[serde(default = "default_subsample")]
    pub subsample: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            arms: default_arms(),
            fuzzy_variants_per_entry: default_variants_per_entry(),
            subsample: default_subsample(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrSettings {
    #[serde(default = "default_true")]
    pub joint: bool,
    /// `table` (bias-sensitive) or `echo`.
    #[serde(default = "default_scorer")]
    pub scorer: String,
    /// Which index the biased arm retrieves from.
    #[serde(default = "default_vocab_arm")]
    pub vocab_arm: Arm,
    /// Manifest sets to evaluate; defaults to every configured manifest.
    #[serde(default)]
    pub sets: Vec<String>,
}

impl Default for AsrSettings {
    fn default() -> Self {
        AsrSettings {
            joint: true,
            scorer: default_scorer(),
            vocab_arm: default_vocab_arm(),
            sets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSettings {
    pub vocab: PathBuf,
    #[serde(default)]
    pub synth_specs: Option<PathBuf>,
    pub manifests: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_operating_k")]
    pub operating_k: usize,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub beam: BeamSettings,
    #[serde(default)]
    pub rewards: RewardWeights,
    #[serde(default)]
    pub rada: RadaSettings,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
    #[serde(default)]
    pub asr: AsrSettings,
    pub paths: PathSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() {
            return Err(Error::Config("k_values must not be empty".into()));
        }
        if self.k_values[0] == 0 {
            return Err(Error::Config("k_values must be positive".into()));
        }
        if !self.k_values.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("k_values must be strictly increasing".into()));
        }
        if self.operating_k == 0 {
            return Err(Error::Config("operating_k must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rada.min_correct_fraction) {
            return Err(Error::Config(
                "rada.min_correct_fraction must be in [0, 1]".into(),
            ));
        }
        if self.retrieval.arms.is_empty() {
            return Err(Error::Config("retrieval.arms must not be empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for arm in &self.retrieval.arms {
            if !seen.insert(*arm) {
                return Err(Error::Config(format!(
                    "retrieval arm {:?} listed twice",
                    arm.name()
                )));
            }
        }
        if self.retrieval.subsample == 0 {
            return Err(Error::Config("retrieval.subsample must be >= 1".into()));
        }
        if self.needs_rada() && !self.rada.enabled {
            return Err(Error::Config(
                "rada/fuzzy arms require rada.enabled = true".into(),
            ));
        }
        if self.rada.enabled && self.paths.synth_specs.is_none() {
            return Err(Error::Config(
                "rada.enabled requires paths.synth_specs".into(),
            ));
        }
        match self.asr.scorer.as_str() {
            "table" | "echo" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown asr.scorer {other:?}; expected \"table\" or \"echo\""
                )))
            }
        }
        for set in &self.asr.sets {
            if !self.paths.manifests.contains_key(set) {
                return Err(Error::UnknownSet(set.clone()));
            }
        }
        self.beam.to_beam_config();
        Ok(())
    }

    /// Whether any configured stage depends on the filtered vocabulary.
    pub fn needs_rada(&self) -> bool {
        self.retrieval
            .arms
            .iter()
            .any(|a| matches!(a, Arm::Rada | Arm::Fuzzy))
            || matches!(self.asr.vocab_arm, Arm::Rada | Arm::Fuzzy)
    }

    /// Manifest sets the ASR stage evaluates, in config order (all of them
    /// when unspecified).
    pub fn asr_sets(&self) -> Vec<String> {
        if self.asr.sets.is_empty() {
            self.paths.manifests.keys().cloned().collect()
        } else {
            self.asr.sets.clone()
        }
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[paths]
vocab = "vocab.tsv"

[paths.manifests]
media = "media.jsonl"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.k_values, vec![1, 2, 5, 10]);
        assert_eq!(cfg.operating_k, 2);
        assert_eq!(cfg.embedding_dim, 256);
        assert_eq!(cfg.beam.width, 4);
        assert!(cfg.asr.joint);
        assert_eq!(cfg.asr_sets(), vec!["media".to_string()]);
        assert!(!cfg.needs_rada());
    }

    #[test]
    fn bad_k_values_are_rejected() {
        for ks in ["k_values = []", "k_values = [2, 1]", "k_values = [0, 1]"] {
            let text = format!("{ks}\n{MINIMAL}");
            assert!(RunConfig::from_toml(&text).is_err(), "{ks}");
        }
    }

    #[test]
    fn rada_arms_require_enabled_and_specs() {
        let text = format!("[retrieval]\narms = [\"base\", \"rada\"]\n{MINIMAL}");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let ok = r#"
[retrieval]
arms = ["base", "rada"]

[rada]
enabled = true

[paths]
vocab = "vocab.tsv"
synth_specs = "specs.jsonl"

[paths.manifests]
media = "media.jsonl"
"#;
        RunConfig::from_toml(ok).unwrap();
    }

    #[test]
    fn unknown_sets_and_scorers_are_rejected() {
        let text = format!("[asr]\nsets = [\"nope\"]\n{MINIMAL}");
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(Error::UnknownSet(_))
        ));
        let text = format!("[asr]\nscorer = \"llm\"\n{MINIMAL}");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }
}
