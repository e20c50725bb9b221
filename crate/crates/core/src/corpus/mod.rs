//! Utterances, manifests, feature files, CMVN, BPE and the toy corpus.

pub mod bpe;
pub mod cmvn;
pub mod features;
pub mod toy;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::{train_bpe, BpeModel};
pub use cmvn::{apply_cmvn, compute_cmvn_stats, normalize_utterances, CmvnStats};
pub use features::{read_features, write_features, FeatureMatrix};
pub use toy::{generate_toy_corpus, ToyCorpus, ToyCorpusSpec};

/// 100 seconds at a 10 ms frame shift.
pub const DEFAULT_MAX_FRAMES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Phoneme,
}

/// Dataset role: ASR pairs, real summarization pairs, or external (artificial) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Asr,
    Sum,
    Ext,
}

impl Role {
    pub fn is_real(self) -> bool {
        !matches!(self, Role::Ext)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UtteranceInput {
    Speech(FeatureMatrix),
    Phonemes(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub input: UtteranceInput,
    pub transcript: Vec<String>,
    pub summary: Vec<String>,
    pub role: Role,
}

impl Utterance {
    pub fn modality(&self) -> Modality {
        match self.input {
            UtteranceInput::Speech(_) => Modality::Speech,
            UtteranceInput::Phonemes(_) => Modality::Phoneme,
        }
    }

    pub fn num_frames(&self) -> usize {
        match &self.input {
            UtteranceInput::Speech(f) => f.rows(),
            UtteranceInput::Phonemes(ids) => ids.len(),
        }
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        match &self.input {
            UtteranceInput::Speech(f) => Some(f),
            UtteranceInput::Phonemes(_) => None,
        }
    }

    pub fn phoneme_ids(&self) -> Option<&[u32]> {
        match &self.input {
            UtteranceInput::Phonemes(ids) => Some(ids),
            UtteranceInput::Speech(_) => None,
        }
    }

    /// Drops frames (or repeated phonemes) beyond `max_frames`.
    pub fn truncate(&mut self, max_frames: usize) {
        match &mut self.input {
            UtteranceInput::Speech(f) => {
                if f.rows() > max_frames {
                    *f = std::mem::replace(f, FeatureMatrix::zeros(0, 0)).truncated(max_frames);
                }
            }
            UtteranceInput::Phonemes(ids) => ids.truncate(max_frames),
        }
    }

    /// Same utterance relabelled with another role.
    pub fn with_role(&self, role: Role) -> Utterance {
        Utterance {
            role,
            ..self.clone()
        }
    }
}

/// Whitespace word split.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    words
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme_ids: Option<Vec<u32>>,
    pub num_frames: usize,
    pub transcript: String,
    pub summary: String,
    pub modality: Modality,
    pub role: Role,
}

/// Writes `utts` as JSON lines. Speech features go to `<feat_dir>/<id>.ssf`, and the
/// manifest stores that path relative to the manifest's directory.
pub fn write_manifest(path: impl AsRef<Path>, utts: &[Utterance], feat_dir: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let feat_dir = feat_dir.as_ref();
    let mut out = Vec::new();
    for u in utts {
        let (feat_path, phoneme_ids) = match &u.input {
            UtteranceInput::Speech(f) => {
                let file = feat_dir.join(format!("{}.ssf", u.id));
                write_features(&file, f)?;
                let rel = file.strip_prefix(base).unwrap_or(&file);
                (Some(rel.to_string_lossy().into_owned()), None)
            }
            UtteranceInput::Phonemes(ids) => (None, Some(ids.clone())),
        };
        let rec = ManifestRecord {
            id: u.id.clone(),
            feat_path,
            phoneme_ids,
            num_frames: u.num_frames(),
            transcript: join_words(&u.transcript),
            summary: join_words(&u.summary),
            modality: u.modality(),
            role: u.role,
        };
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| Error::Format(format!("serializing manifest record: {e}")))?;
        out.push(b'\n');
    }
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest_records(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut recs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        recs.push(rec);
    }
    Ok(recs)
}

/// Reads a manifest, loading feature files relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest_records(path)?
        .into_iter()
        .map(|rec| record_to_utterance(rec, &base))
        .collect()
}

fn record_to_utterance(rec: ManifestRecord, base: &Path) -> Result<Utterance> {
    let input = match (rec.modality, rec.feat_path, rec.phoneme_ids) {
        (Modality::Speech, Some(p), None) => {
            let p = PathBuf::from(p);
            let full = if p.is_absolute() { p } else { base.join(p) };
            UtteranceInput::Speech(read_features(full)?)
        }
        (Modality::Phoneme, None, Some(ids)) => UtteranceInput::Phonemes(ids),
        _ => {
            return Err(Error::Format(format!(
                "record {}: speech needs feat_path only, phoneme needs phoneme_ids only",
                rec.id
            )))
        }
    };
    let u = Utterance {
        id: rec.id,
        input,
        transcript: words(&rec.transcript),
        summary: words(&rec.summary),
        role: rec.role,
    };
    if u.num_frames() != rec.num_frames {
        return Err(Error::Format(format!(
            "record {}: num_frames {} but input has {}",
            u.id,
            rec.num_frames,
            u.num_frames()
        )));
    }
    Ok(u)
}
