//! External synthesizer plug: any tool that writes SSF1 feature files can feed
//! speech-modality external pairs.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::corpus::{apply_cmvn, read_features, CmvnStats, Role, Utterance, UtteranceInput};
use crate::error::{Error, Result};

/// Reads, normalizes and tags external feature files. Utterance ids are the file stems.
pub fn ingest_external_features<P: AsRef<Path>>(
    paths: &[P],
    stats: &CmvnStats,
    summaries: &[Vec<String>],
) -> Result<Vec<Utterance>> {
    if paths.len() != summaries.len() {
        return Err(Error::Data(format!(
            "{} feature files but {} summaries",
            paths.len(),
            summaries.len()
        )));
    }
    paths
        .iter()
        .zip(summaries)
        .map(|(p, summary)| {
            let p = p.as_ref();
            let feats = read_features(p).map_err(|e| match e {
                Error::Io { .. } => Error::Format(format!("cannot read {}: {e}", p.display())),
                other => other,
            })?;
            let feats = apply_cmvn(&feats, stats)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok(Utterance {
                id,
                input: UtteranceInput::Speech(feats),
                transcript: Vec::new(),
                summary: summary.clone(),
                role: Role::Ext,
            })
        })
        .collect()
}

/// Command template with `{text}` and `{out}` placeholders, split on whitespace.
/// Each placeholder expands inside a single argument; no shell is involved.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCommand {
    pub template: String,
}

impl SynthCommand {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains("{out}") || !template.contains("{text}") {
            return Err(Error::Config(
                "synthesizer template needs both {text} and {out} placeholders".into(),
            ));
        }
        Ok(SynthCommand { template })
    }

    pub fn argv(&self, text: &str, out: &Path) -> Vec<String> {
        let out = out.to_string_lossy();
        self.template
            .split_whitespace()
            .map(|a| a.replace("{text}", text).replace("{out}", &out))
            .collect()
    }
}

/// Runs the synthesizer once per `(id, text)` and returns the written paths.
pub fn run_synthesizer(cmd: &SynthCommand, items: &[(String, String)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(items.len());
    for (id, text) in items {
        let out = out_dir.join(format!("{id}.ssf"));
        let argv = cmd.argv(text, &out);
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("empty synthesizer command".into()))?;
        let status = Command::new(prog)
            .args(args)
            .status()
            .map_err(|e| Error::Data(format!("starting synthesizer {prog}: {e}")))?;
        if !status.success() {
            return Err(Error::Data(format!("synthesizer failed on {id} with {status}")));
        }
        if !out.exists() {
            return Err(Error::Format(format!("synthesizer wrote no file at {}", out.display())));
        }
        paths.push(out);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_features, FeatureMatrix};

    #[test]
    fn zero_files_and_count_mismatch() {
        let stats = CmvnStats::from_matrices([&FeatureMatrix::new(2, 1, vec![0.0, 2.0]).unwrap()]).unwrap();
        assert!(ingest_external_features::<PathBuf>(&[], &stats, &[]).unwrap().is_empty());
        assert!(matches!(
            ingest_external_features::<PathBuf>(&[], &stats, &[vec!["a".into()]]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn self_stats_standardize_ingested_features() {
        let dir = tempfile::tempdir().unwrap();
        let mats: Vec<FeatureMatrix> = (0..3)
            .map(|k| {
                let data = (0..50 * 4).map(|i| ((i * 31 + k * 7) % 17) as f32 * 0.3 + 5.0).collect();
                FeatureMatrix::new(50, 4, data).unwrap()
            })
            .collect();
        let paths: Vec<PathBuf> = (0..3).map(|k| dir.path().join(format!("x{k}.ssf"))).collect();
        for (p, m) in paths.iter().zip(&mats) {
            write_features(p, m).unwrap();
        }
        let stats = CmvnStats::from_matrices(mats.iter()).unwrap();
        let sums = vec![vec!["s".to_string()]; 3];
        let utts = ingest_external_features(&paths, &stats, &sums).unwrap();
        assert_eq!(utts[1].id, "x1");
        assert!(utts.iter().all(|u| u.role == Role::Ext));
        let out = CmvnStats::from_matrices(utts.iter().filter_map(Utterance::features)).unwrap();
        assert!(out.mean.iter().all(|m| m.abs() < 0.05));
        assert!(out.variance.iter().all(|v| (v - 1.0).abs() < 0.05));
    }

    #[test]
    fn unreadable_file_names_path() {
        let stats = CmvnStats::from_matrices([&FeatureMatrix::zeros(1, 1)]).unwrap();
        let err = ingest_external_features(&["/nonexistent/q.ssf"], &stats, &[vec![]]).unwrap_err();
        assert!(err.to_string().contains("q.ssf"), "{err}");
    }

    #[test]
    fn template_expansion() {
        assert!(SynthCommand::new("tts {text}").is_err());
        let c = SynthCommand::new("tts --text {text} --out {out}").unwrap();
        assert_eq!(
            c.argv("so we fold", Path::new("/tmp/a.ssf")),
            vec!["tts", "--text", "so we fold", "--out", "/tmp/a.ssf"]
        );
    }
}
