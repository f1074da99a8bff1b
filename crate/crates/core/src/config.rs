//! Experiment configuration: one TOML file describing every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::GrammarParams;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::model::ModelConfig;
use crate::probing::ProbeSuite;
use crate::pruning::{ImpSettings, Pruner, RewindMode};
use crate::training::TrainRecipe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub seed: u64,
    pub sentences: usize,
    pub grammar: GrammarParams,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            seed: 0,
            sentences: 12000,
            grammar: GrammarParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpConfig {
    pub k_max: usize,
    pub rate: f64,
    pub mode: RewindMode,
    /// Also run a random-pruning family with the same schedule.
    pub random_baseline: bool,
}

impl Default for ImpConfig {
    fn default() -> Self {
        ImpConfig {
            k_max: 4,
            rate: 0.2,
            mode: RewindMode::LrRewind,
            random_baseline: true,
        }
    }
}

impl ImpConfig {
    pub fn settings(&self, pruner: Pruner, seed: u64) -> ImpSettings {
        ImpSettings {
            k_max: self.k_max,
            rate: self.rate,
            mode: self.mode,
            pruner,
            seed,
        }
    }
}

/// Held-out sentences used for toy-BLEU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Leading test-split sentences to score; `0` means the whole split.
    pub sentences: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            sentences: 1000,
            batch_size: 64,
        }
    }
}

/// The analysis corpus: leading validation-split sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSettings {
    /// `0` means the whole split.
    pub sentences: usize,
    pub batch_size: usize,
}

impl Default for DumpSettings {
    fn default() -> Self {
        DumpSettings {
            sentences: 1000,
            batch_size: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    FrequencyBin,
    Tag,
    NounClass,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::FrequencyBin => "frequency_bin",
            Grouping::Tag => "tag",
            Grouping::NounClass => "noun_class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySuite {
    pub concentration_threshold: f64,
    pub groupings: Vec<Grouping>,
    pub min_group_tokens: usize,
}

impl Default for SimilaritySuite {
    fn default() -> Self {
        SimilaritySuite {
            concentration_threshold: 0.95,
            groupings: vec![Grouping::FrequencyBin, Grouping::Tag, Grouping::NounClass],
            min_group_tokens: crate::similarity::MIN_GROUP_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds training, random pruning and probes. `corpus.seed` is separate
    /// so seed sweeps share one dataset.
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusSettings,
    pub model: ModelConfig,
    pub training: TrainRecipe,
    pub imp: ImpConfig,
    pub eval: EvalSettings,
    pub dump: DumpSettings,
    pub probe: ProbeSuite,
    pub similarity: SimilaritySuite,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            corpus: CorpusSettings::default(),
            model: ModelConfig::default(),
            training: TrainRecipe {
                epochs: 14,
                learning_rate: 3e-3,
                rewind_epoch: Some(13),
                ..TrainRecipe::default()
            },
            imp: ImpConfig::default(),
            eval: EvalSettings::default(),
            dump: DumpSettings::default(),
            probe: ProbeSuite::default(),
            similarity: SimilaritySuite::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the top-level seed into the per-stage settings.
    pub fn resolved(mut self) -> Self {
        self.training.seed = self.seed;
        self.probe.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        self.corpus.grammar.validate()?;
        if self.corpus.sentences < 10 {
            return fail("corpus: sentences must be >= 10");
        }
        if self.model.src_vocab != 0 || self.model.tgt_vocab != 0 {
            return fail("model: vocabulary sizes come from the corpus and must not be set");
        }
        self.model.clone().with_vocab(3 + 1, 3 + 1).validate()?;
        self.training.validate()?;
        self.imp.settings(Pruner::Magnitude, self.seed).validate()?;
        if self.eval.batch_size == 0 || self.dump.batch_size == 0 {
            return fail("eval and dump batch sizes must be >= 1");
        }
        self.probe.validate()?;
        if !(0.0..1.0).contains(&self.similarity.concentration_threshold) {
            return fail("similarity: concentration_threshold must be in [0, 1)");
        }
        if self.similarity.min_group_tokens < 2 {
            return fail("similarity: min_group_tokens must be >= 2");
        }
        let analysis = (self.corpus.sentences as f64 * self.corpus.grammar.valid_fraction).round() as usize;
        if analysis < 20 {
            return fail("corpus: validation split is too small for probing");
        }
        Ok(())
    }

    /// Digest of a serializable section, prefixed by a label.
    pub fn section_digest<T: Serialize>(label: &str, parts: &[&T]) -> String {
        let mut buf = label.as_bytes().to_vec();
        for p in parts {
            buf.push(0);
            buf.extend(serde_json::to_vec(p).expect("config serializes"));
        }
        sha256_hex(&buf)
    }

    /// Digest of everything except the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        Self::section_digest("config", &[&c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[imp]\nk_max = 1\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.imp.k_max, 1);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3\n").is_err());
        let mut c = ExperimentConfig::default();
        c.imp.rate = 1.5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.model.model_dim = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_dir_does_not_change_digest() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
