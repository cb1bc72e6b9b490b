//! Run configuration: one TOML file, every field optional.
//!
//! ```toml
//! [paths]
//! corpus = "corpus.jsonl"
//! vocab = "work/vocab.txt"
//! dataset_dir = "work/data"
//! run_dir = "work/run"
//! checkpoint = "work/run/model.bin"
//! embeddings = "work/embeddings.bin"
//! reports = "work/reports.jsonl"
//!
//! [tokenizer]
//! mode = "FullI"          # FullI | HalfI | PieceI
//! vocab_cap = 21000
//!
//! [model]                 # vocab_size comes from the vocabulary file; when
//!                         # present, loaded checkpoints must match it
//! layers = 4
//! heads = 12
//! hidden = 768
//! intermediate = 3072
//! max_seq_len = 256
//!
//! [train]
//! batch_size = 8
//! learning_rate = 5e-5
//! warmup_steps = 4
//! max_steps = 1000
//! seed = 0
//! tasks = { alg = true, sfp = true, mlm = false }
//! mlm_mask_rate = 0.15
//! checkpoint_every = 0
//!
//! [dataset]
//! serialization = { kind = "linear" }   # or random_walk (with seed), longest_walk
//! min_instructions = 10
//! split_ratio = 0.9
//! split_seed = 0
//!
//! [eval]
//! tasks = ["xcom:O0", "xopt:gcc:O0:O3", "xobf:O2:bcf"]
//! k = [1, 5, 10]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniasm::asm::Serialization;
use uniasm::dataset::MIN_INSTRUCTIONS;
use uniasm::search::TaskSpec;
use uniasm::tokenizer::TokenizerConfig;
use uniasm::train::TrainConfig;
use uniasm::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

/// Architecture fields; the vocabulary size is taken from the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = uniasm::model::ModelConfig::default();
        ModelSection {
            layers: d.layers,
            heads: d.heads,
            hidden: d.hidden,
            intermediate: d.intermediate,
            max_seq_len: d.max_seq_len,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> uniasm::model::ModelConfig {
        uniasm::model::ModelConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            intermediate: self.intermediate,
            max_seq_len: self.max_seq_len,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub serialization: Serialization,
    pub min_instructions: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            serialization: Serialization::Linear,
            min_instructions: MIN_INSTRUCTIONS,
            split_ratio: 0.9,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<TaskSpec>,
    pub k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: Vec::new(),
            k: vec![1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub tokenizer: TokenizerConfig,
    pub model: Option<ModelSection>,
    pub train: TrainConfig,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = uniasm::io::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Resolves a required path: the flag wins over the config entry.
pub fn require(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or [paths] entry)")))
}

/// Like [`require`], and the file must already exist.
pub fn require_input(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = require(flag, configured, what)?;
    if !p.exists() {
        return Err(Error::Validation(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.contains("```toml"))
            .skip(1)
            .take_while(|l| !l.contains("```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let c: RunConfig = toml::from_str(&doc).unwrap();
        assert_eq!(c.model, Some(ModelSection::default()));
        assert_eq!(c.eval.tasks.len(), 3);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nlayerz = 3").is_err());
    }
}
