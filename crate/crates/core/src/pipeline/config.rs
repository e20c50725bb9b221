use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::corpus::ToyCorpusSpec;
use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::leakage::{SweepMetric, DEFAULT_ALPHAS};
use crate::model::ModelConfig;
use crate::training::{StageConfig, StageKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Generate the synthetic corpus from `toy`.
    Toy,
    /// Read a directory laid out like the `toygen` output.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    #[serde(default)]
    pub toy: ToyCorpusSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentModality {
    /// Repeated phoneme ids through the phoneme pre-encoder.
    Phoneme,
    /// Features written by an external synthesizer, through the speech pre-encoder.
    Tts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub modality: AugmentModality,
    /// Duration statistics for phonemes absent from the alignments.
    pub default_duration_mean: f64,
    pub default_duration_std: f64,
    /// Command template with `{text}` and `{out}`; required for `tts`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesizer: Option<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            modality: AugmentModality::Phoneme,
            default_duration_mean: 8.0,
            default_duration_std: 2.0,
            synthesizer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also score the items whose summary contains a word seen only in external pairs.
    pub oov_subset: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { oov_subset: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakageConfig {
    pub alphas: Vec<f64>,
    pub metric: SweepMetric,
    /// Add a system that copies the summary of the training item whose transcript
    /// is closest to the stage (i) transcription.
    pub retrieval_baseline: bool,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        LeakageConfig {
            alphas: DEFAULT_ALPHAS.to_vec(),
            metric: SweepMetric::RougeL,
            retrieval_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub decode: BeamConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub leakage: LeakageConfig,
}

impl ExperimentConfig {
    /// `toy` runs on the generated corpus; `base` and `large` expect a corpus directory `data`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(ExperimentConfig {
                seed: 1,
                model: ModelConfig::toy(),
                corpus: CorpusConfig {
                    source: CorpusSource::Toy,
                    toy: ToyCorpusSpec::default(),
                    dir: None,
                },
                augment: AugmentConfig::default(),
                stages: vec![StageConfig::asr_toy(), StageConfig::ssum_toy(), StageConfig::augmented_toy()],
                decode: BeamConfig {
                    beam_width: 4,
                    max_len: 60,
                    length_norm: false,
                },
                eval: EvalConfig::default(),
                leakage: LeakageConfig::default(),
            }),
            "base" | "large" => Ok(ExperimentConfig {
                seed: 1,
                model: ModelConfig::preset(name)?,
                corpus: CorpusConfig {
                    source: CorpusSource::Dir,
                    toy: ToyCorpusSpec::default(),
                    dir: Some(PathBuf::from("data")),
                },
                augment: AugmentConfig::default(),
                stages: vec![StageConfig::asr_full(), StageConfig::ssum_full(), StageConfig::augmented_full()],
                decode: BeamConfig {
                    beam_width: 4,
                    max_len: 200,
                    length_norm: false,
                },
                eval: EvalConfig::default(),
                leakage: LeakageConfig::default(),
            }),
            other => Err(Error::Config(format!(
                "unknown experiment preset {other:?} (expected base, large or toy)"
            ))),
        }
    }

    pub fn stage(&self, kind: StageKind) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage == kind)
    }

    /// Checks everything except the existence of paths.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        let rank = |k: StageKind| match k {
            StageKind::Asr => 0,
            StageKind::Ssum => 1,
            StageKind::Augmented => 2,
        };
        for s in &self.stages {
            s.validate()?;
        }
        for w in self.stages.windows(2) {
            if rank(w[0].stage) >= rank(w[1].stage) {
                return fail(format!(
                    "stage {} cannot follow stage {}: stages run in the order asr, ssum, augmented",
                    w[1].stage.name(),
                    w[0].stage.name()
                ));
            }
        }
        if self.stage(StageKind::Augmented).is_some() && self.stage(StageKind::Ssum).is_none() {
            return fail("the augmented stage fine-tunes the ssum stage, which is missing".into());
        }
        match self.corpus.source {
            CorpusSource::Toy => {
                self.corpus.toy.validate()?;
                if self.corpus.toy.feature_dim != self.model.input_dim {
                    return fail(format!(
                        "toy feature_dim {} differs from model input_dim {}",
                        self.corpus.toy.feature_dim, self.model.input_dim
                    ));
                }
            }
            CorpusSource::Dir => {
                if self.corpus.dir.is_none() {
                    return fail("corpus source \"dir\" needs corpus.dir".into());
                }
            }
        }
        if !(self.augment.default_duration_mean > 0.0 && self.augment.default_duration_std >= 0.0) {
            return fail("default duration mean must be positive and std non-negative".into());
        }
        if self.augment.modality == AugmentModality::Tts {
            match &self.augment.synthesizer {
                Some(t) => {
                    crate::augment::SynthCommand::new(t.clone())?;
                }
                None => return fail("augment modality \"tts\" needs augment.synthesizer".into()),
            }
        }
        if self.decode.beam_width == 0 {
            return fail("decode.beam_width must be at least 1".into());
        }
        if self.decode.max_len == 0 || self.decode.max_len > self.model.max_target_len {
            return fail(format!(
                "decode.max_len {} must lie in 1..={}",
                self.decode.max_len, self.model.max_target_len
            ));
        }
        let a = &self.leakage.alphas;
        if a.iter().any(|x| !(0.0..=1.0).contains(x)) || a.windows(2).any(|w| w[0] >= w[1]) {
            return fail("leakage.alphas must be strictly increasing values in [0, 1]".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Parses TOML text. A `preset` key, at the top level, under `[model]` or inside a
    /// `[[stages]]` entry, expands to that preset before the remaining keys override it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let value = expand_presets(value)?;
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    Value::try_from(x).map_err(|e| Error::Config(format!("serializing preset: {e}")))
}

fn take_preset(table: &mut toml::Table) -> Result<Option<String>> {
    match table.remove("preset") {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Config(format!("preset must be a string, got {other}"))),
    }
}

/// Tables merge key by key; every other value, arrays included, replaces the base.
fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Table(mut b), Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Table(b)
        }
        (_, o) => o,
    }
}

fn expand_presets(value: Value) -> Result<Value> {
    let Value::Table(mut top) = value else {
        return Err(Error::Config("config must be a table".into()));
    };
    if let Some(Value::Table(model)) = top.get_mut("model") {
        if let Some(name) = take_preset(model)? {
            let expanded = merge(to_value(&ModelConfig::preset(&name)?)?, Value::Table(std::mem::take(model)));
            top.insert("model".into(), expanded);
        }
    }
    if let Some(Value::Array(stages)) = top.get_mut("stages") {
        for stage in stages.iter_mut() {
            if let Value::Table(t) = stage {
                if let Some(name) = take_preset(t)? {
                    let over = Value::Table(std::mem::take(t));
                    *stage = merge(to_value(&StageConfig::preset(&name)?)?, over);
                }
            }
        }
    }
    match take_preset(&mut top)? {
        Some(name) => Ok(merge(to_value(&ExperimentConfig::preset(&name)?)?, Value::Table(top))),
        None => Ok(Value::Table(top)),
    }
}

/// Reads, expands and validates a config file. A relative `corpus.dir` resolves
/// against the file's directory and must exist.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
    if cfg.corpus.source == CorpusSource::Dir {
        if let Some(dir) = &cfg.corpus.dir {
            let resolved = if dir.is_relative() {
                path.parent().unwrap_or(Path::new("")).join(dir)
            } else {
                dir.clone()
            };
            if !resolved.is_dir() {
                return Err(Error::Config(format!(
                    "corpus.dir {} does not exist",
                    resolved.display()
                )));
            }
            cfg.corpus.dir = Some(resolved);
        }
    }
    Ok(cfg)
}
