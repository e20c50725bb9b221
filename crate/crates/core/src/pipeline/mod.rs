//! Experiment configuration and the end-to-end run: corpus, normalization,
//! subwords, augmentation, the training stages, decoding, scoring and leakage.

pub mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{
    load_config, AugmentConfig, AugmentModality, CorpusConfig, CorpusSource, EvalConfig, ExperimentConfig,
    LeakageConfig,
};

use crate::augment::{
    build_augmented_set, estimate_duration_table, ingest_external_features, run_synthesizer, Lexicon,
    PhonemeInventory, SynthCommand, TextPair,
};
use crate::corpus::toy::read_text_pairs;
use crate::corpus::{
    generate_toy_corpus, join_words, normalize_utterances, read_manifest, train_bpe, words, write_manifest, BpeModel,
    CmvnStats, Role, ToyCorpus, Utterance,
};
use crate::decode::{decode_utterances, write_decodes, DecodeRecord};
use crate::error::{Error, Result};
use crate::eval::{score_corpus, ScoreReport};
use crate::leakage::{compute_leakage, leakage_score, threshold_sweep, write_sweep, Entry, SweepRow};
use crate::model::{save_checkpoint, Model};
use crate::seed::derive_seed;
use crate::training::{train_stage, EpochRecord, StageConfig, StageData, StageKind, TargetField};

/// Raw (unnormalized) splits plus the text resources the later steps need.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    /// Summarization-role speech with transcripts.
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub external: Vec<TextPair>,
    pub lexicon: Lexicon,
    /// `(phoneme id, frames)` from aligned training speech; may be empty.
    pub alignments: Vec<(u32, usize)>,
    pub planted_dup_ids: Vec<String>,
}

impl PreparedCorpus {
    pub fn from_toy(c: ToyCorpus) -> Self {
        PreparedCorpus {
            train: c.train,
            valid: c.valid,
            eval: c.eval,
            external: c.external,
            lexicon: c.lexicon,
            alignments: c.alignments,
            planted_dup_ids: c.planted_dup_ids,
        }
    }

    /// Reads `train_sum.jsonl`, `valid_sum.jsonl`, `eval.jsonl`, `ext_text.tsv` and
    /// `lexicon.tsv`; `alignments.tsv` and `planted.txt` are optional.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let inv = PhonemeInventory::default();
        let alignments = match fs::read_to_string(dir.join("alignments.tsv")) {
            Ok(text) => parse_alignments(&text, &inv)?,
            Err(_) => Vec::new(),
        };
        let planted_dup_ids = fs::read_to_string(dir.join("planted.txt"))
            .map(|t| t.lines().filter(|l| !l.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        Ok(PreparedCorpus {
            train: read_manifest(dir.join("train_sum.jsonl"))?,
            valid: read_manifest(dir.join("valid_sum.jsonl"))?,
            eval: read_manifest(dir.join("eval.jsonl"))?,
            external: read_text_pairs(dir.join("ext_text.tsv"))?,
            lexicon: Lexicon::load(dir.join("lexicon.tsv"), &inv)?,
            alignments,
            planted_dup_ids,
        })
    }

    /// Summary words of the external pairs that no training or validation text contains.
    pub fn external_only_words(&self) -> Vec<String> {
        let seen: BTreeSet<&String> = self
            .train
            .iter()
            .chain(&self.valid)
            .flat_map(|u| u.transcript.iter().chain(&u.summary))
            .collect();
        let ext: BTreeSet<&String> = self.external.iter().flat_map(|p| &p.summary).collect();
        ext.into_iter().filter(|w| !seen.contains(w)).cloned().collect()
    }

    /// Texts the subword model is trained on: transcripts, summaries and external pairs.
    pub fn bpe_texts(&self) -> Vec<Vec<String>> {
        let mut texts: Vec<Vec<String>> = self
            .train
            .iter()
            .flat_map(|u| [u.transcript.clone(), u.summary.clone()])
            .collect();
        for p in &self.external {
            texts.push(p.document.clone());
            texts.push(p.summary.clone());
        }
        texts
    }
}

/// `phoneme TAB frames` per line.
pub fn parse_alignments(text: &str, inv: &PhonemeInventory) -> Result<Vec<(u32, usize)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::Format(format!("alignments line {}: expected phoneme and frame count", i + 1));
            let (name, n) = l.split_once('\t').ok_or_else(bad)?;
            let id = inv
                .id(name)
                .ok_or_else(|| Error::Format(format!("alignments line {}: unknown phoneme {name:?}", i + 1)))?;
            Ok((id, n.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Generates the toy corpus into `out/corpus` or reads the configured directory.
pub fn prepare_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<PreparedCorpus> {
    match cfg.corpus.source {
        CorpusSource::Toy => {
            let c = generate_toy_corpus(&cfg.corpus.toy)?;
            c.write(&out.join("corpus"))?;
            Ok(PreparedCorpus::from_toy(c))
        }
        CorpusSource::Dir => {
            let dir = cfg
                .corpus
                .dir
                .as_ref()
                .ok_or_else(|| Error::Config("corpus.dir is not set".into()))?;
            PreparedCorpus::read_dir(dir)
        }
    }
}

pub fn normalized(utts: &[Utterance], stats: &CmvnStats, role: Role) -> Result<Vec<Utterance>> {
    let mut v: Vec<Utterance> = utts.iter().map(|u| u.with_role(role)).collect();
    normalize_utterances(&mut v, stats)?;
    Ok(v)
}

/// The stage's own seed mixed with the experiment seed.
pub fn effective_stage(stage: &StageConfig, global_seed: u64) -> StageConfig {
    StageConfig {
        seed: derive_seed(global_seed, &format!("stage/{}/{}", stage.stage.name(), stage.seed)),
        ..stage.clone()
    }
}

/// Builds the external training set for stage (iii).
pub fn build_external_set(
    cfg: &ExperimentConfig,
    corpus: &PreparedCorpus,
    stats: &CmvnStats,
    out: &Path,
) -> Result<Vec<Utterance>> {
    let utts = match cfg.augment.modality {
        AugmentModality::Phoneme => {
            let inv = PhonemeInventory::default();
            let defaults = (cfg.augment.default_duration_mean, cfg.augment.default_duration_std);
            let table = estimate_duration_table(&corpus.alignments, inv.size(), defaults)?;
            table.save(out.join("durations.tsv"), &inv)?;
            let set = build_augmented_set(&corpus.external, &corpus.lexicon, &inv, &table, derive_seed(cfg.seed, "augment"))?;
            set.utterances
        }
        AugmentModality::Tts => {
            let template = cfg.augment.synthesizer.clone().unwrap_or_default();
            let cmd = SynthCommand::new(template)?;
            let items: Vec<(String, String)> =
                corpus.external.iter().map(|p| (p.id.clone(), join_words(&p.document))).collect();
            let paths = run_synthesizer(&cmd, &items, &out.join("tts"))?;
            let summaries: Vec<Vec<String>> = corpus.external.iter().map(|p| p.summary.clone()).collect();
            let mut utts = ingest_external_features(&paths, stats, &summaries)?;
            for (u, p) in utts.iter_mut().zip(&corpus.external) {
                u.transcript = p.document.clone();
            }
            utts
        }
    };
    write_manifest(out.join("augmented.jsonl"), &utts, out.join("tts_feats"))?;
    Ok(utts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    /// `transcript` or `summary`.
    pub reference: String,
    pub scores: ScoreReport,
    /// Scores on the items whose reference contains an external-only word.
    pub oov_subset: Option<ScoreReport>,
    /// Per external-only word: items requiring it whose output contains it.
    pub oov_hits: BTreeMap<String, usize>,
    /// Per external-only word: outputs containing it at all.
    pub oov_emitted: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaCount {
    pub alpha: f64,
    pub kept: usize,
    pub removed_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub planted_dup_ids: Vec<String>,
    pub counts: Vec<AlphaCount>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_eval: usize,
    pub n_external: usize,
    pub external_only_words: Vec<String>,
    pub oov_eval_ids: Vec<String>,
    pub stages: Vec<StageReport>,
    pub systems: Vec<SystemReport>,
    pub leakage: Option<LeakageSummary>,
}

impl ExperimentReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.system == name)
    }
}

/// Scores hypotheses keyed by eval id against the chosen reference field.
pub fn score_system(
    name: &str,
    field: TargetField,
    eval: &[Utterance],
    outputs: &HashMap<String, Vec<String>>,
    oov_words: &[String],
    oov_subset: bool,
) -> Result<SystemReport> {
    let reference = |u: &Utterance| match field {
        TargetField::Transcript => u.transcript.clone(),
        TargetField::Summary => u.summary.clone(),
    };
    let mut pairs = Vec::with_capacity(eval.len());
    let mut subset = Vec::new();
    let mut oov_hits: BTreeMap<String, usize> = oov_words.iter().map(|w| (w.clone(), 0)).collect();
    let mut oov_emitted = oov_hits.clone();
    for u in eval {
        let hyp = outputs
            .get(&u.id)
            .ok_or_else(|| Error::Data(format!("system {name} has no output for {}", u.id)))?;
        let r = reference(u);
        let mut needs_oov = false;
        for w in oov_words {
            let required = r.contains(w);
            let emitted = hyp.contains(w);
            needs_oov |= required;
            if emitted {
                *oov_emitted.get_mut(w).expect("seeded") += 1;
                if required {
                    *oov_hits.get_mut(w).expect("seeded") += 1;
                }
            }
        }
        if needs_oov {
            subset.push((r.clone(), hyp.clone()));
        }
        pairs.push((r, hyp.clone()));
    }
    Ok(SystemReport {
        system: name.to_string(),
        reference: match field {
            TargetField::Transcript => "transcript".into(),
            TargetField::Summary => "summary".into(),
        },
        scores: score_corpus(&pairs)?,
        oov_subset: if oov_subset && !subset.is_empty() {
            Some(score_corpus(&subset)?)
        } else {
            None
        },
        oov_hits,
        oov_emitted,
    })
}

/// For each query, the summary of the training item whose transcript is closest
/// by ROUGE-L F1 (smallest id on ties).
pub fn retrieval_outputs(
    queries: &HashMap<String, Vec<String>>,
    train: &[Utterance],
) -> Result<HashMap<String, Vec<String>>> {
    let pool: Vec<Entry> = train.iter().map(|u| Entry::new(u.id.clone(), u.transcript.clone())).collect();
    let summaries: HashMap<&str, &Vec<String>> = train.iter().map(|u| (u.id.as_str(), &u.summary)).collect();
    queries
        .iter()
        .map(|(id, q)| {
            let (_, nearest) = leakage_score(q, &pool)?;
            Ok((id.clone(), summaries[nearest.as_str()].clone()))
        })
        .collect()
}

fn outputs_of(records: &[DecodeRecord]) -> HashMap<String, Vec<String>> {
    records.iter().map(|r| (r.id.clone(), words(&r.text))).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(format!("serializing report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs every configured step and writes all artifacts under `out`:
/// `corpus/`, `cmvn.json`, `bpe.json`, `augmented.jsonl`, `stages/<stage>/`,
/// `decodes/<system>.tsv`, `leakage_scores.tsv`, `sweep.tsv` and `report.json`.
/// `progress` receives human-readable lines.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn Write) -> Result<ExperimentReport> {
    cfg.validate()?;
    create_dir(out)?;
    let mut say = |line: String| {
        let _ = writeln!(progress, "{line}");
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out, e))?;

    let corpus = prepare_corpus(cfg, out)?;
    say(format!(
        "corpus: {} train, {} valid, {} eval, {} external pairs",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.eval.len(),
        corpus.external.len()
    ));
    let stats = CmvnStats::from_matrices(corpus.train.iter().filter_map(|u| u.features()))?;
    write_json(&out.join("cmvn.json"), &stats)?;
    let bpe = train_bpe(&corpus.bpe_texts(), cfg.model.vocab_size)?;
    bpe.save(out.join("bpe.json"))?;

    let train_sum = normalized(&corpus.train, &stats, Role::Sum)?;
    let valid_sum = normalized(&corpus.valid, &stats, Role::Sum)?;
    let eval = normalized(&corpus.eval, &stats, Role::Sum)?;
    let external = if cfg.stage(StageKind::Augmented).is_some() {
        let ext = build_external_set(cfg, &corpus, &stats, out)?;
        say(format!("augmented set: {} utterances", ext.len()));
        ext
    } else {
        Vec::new()
    };
    let oov_words = corpus.external_only_words();
    let oov_eval_ids: Vec<String> = eval
        .iter()
        .filter(|u| oov_words.iter().any(|w| u.summary.contains(w)))
        .map(|u| u.id.clone())
        .collect();

    let mut model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, "init"))?;
    let mut optimizer = None;
    let mut stages = Vec::new();
    let mut systems = Vec::new();
    let mut summary_outputs: Vec<(String, HashMap<String, Vec<String>>)> = Vec::new();
    let mut asr_outputs = None;
    create_dir(&out.join("decodes"))?;
    for stage in &cfg.stages {
        let stage = effective_stage(stage, cfg.seed);
        let name = stage.stage.name();
        let dir = out.join("stages").join(name);
        create_dir(&dir)?;
        let (train, valid) = match stage.stage {
            StageKind::Asr => (
                normalized(&corpus.train, &stats, Role::Asr)?,
                normalized(&corpus.valid, &stats, Role::Asr)?,
            ),
            StageKind::Ssum => (train_sum.clone(), valid_sum.clone()),
            StageKind::Augmented => {
                let mut t = train_sum.clone();
                t.extend(external.iter().cloned());
                (t, valid_sum.clone())
            }
        };
        say(format!("stage {name}: {} training utterances", train.len()));
        let mut log = Vec::new();
        let outcome = train_stage(
            model,
            optimizer.take(),
            &stage,
            &StageData {
                train: &train,
                valid: &valid,
                bpe: &bpe,
            },
            Some(&mut log),
        )?;
        fs::write(dir.join("log.tsv"), &log).map_err(|e| Error::io(&dir, e))?;
        say(String::from_utf8_lossy(&log).trim_end().to_string());
        save_checkpoint(dir.join("best.ssc"), &outcome.best.model, &outcome.best.meta())?;
        stages.push(StageReport {
            stage: name.into(),
            best_epoch: outcome.best.epoch,
            best_val_accuracy: outcome.best.validation_accuracy,
            epochs: outcome.history,
        });
        model = outcome.best.model;
        optimizer = Some(outcome.optimizer);

        let records = decode_utterances(&model, &bpe, &eval, &cfg.decode)?;
        write_decodes(out.join("decodes").join(format!("{name}.tsv")), &records)?;
        let outputs = outputs_of(&records);
        let field = stage.target_field;
        let report = score_system(name, field, &eval, &outputs, &oov_words, cfg.eval.oov_subset)?;
        say(format!("{name} on eval ({}):\n{}", report.reference, report.scores.table()));
        systems.push(report);
        match field {
            TargetField::Transcript => asr_outputs = Some(outputs),
            TargetField::Summary => summary_outputs.push((name.to_string(), outputs)),
        }
    }

    if cfg.leakage.retrieval_baseline {
        if let Some(asr) = &asr_outputs {
            let outputs = retrieval_outputs(asr, &corpus.train)?;
            let mut recs: Vec<DecodeRecord> = eval
                .iter()
                .map(|u| DecodeRecord {
                    id: u.id.clone(),
                    text: join_words(&outputs[&u.id]),
                    log_prob: 0.0,
                    finished: true,
                })
                .collect();
            recs.sort_by(|a, b| a.id.cmp(&b.id));
            write_decodes(out.join("decodes").join("retrieval.tsv"), &recs)?;
            systems.push(score_system("retrieval", TargetField::Summary, &eval, &outputs, &oov_words, cfg.eval.oov_subset)?);
            summary_outputs.push(("retrieval".into(), outputs));
        }
    }

    let leakage = if summary_outputs.is_empty() {
        None
    } else {
        let pool: Vec<Entry> = corpus.train.iter().map(|u| Entry::new(u.id.clone(), u.summary.clone())).collect();
        let entries: Vec<Entry> = eval.iter().map(|u| Entry::new(u.id.clone(), u.summary.clone())).collect();
        let scores = compute_leakage(&entries, &pool)?;
        scores.write_tsv(out.join("leakage_scores.tsv"))?;
        let mut counts = Vec::new();
        for &alpha in &cfg.leakage.alphas {
            let r = scores.filter(alpha)?;
            counts.push(AlphaCount {
                alpha,
                kept: r.kept_ids.len(),
                removed_ids: r.removed_ids,
            });
        }
        let refs: HashMap<String, Vec<String>> = eval.iter().map(|u| (u.id.clone(), u.summary.clone())).collect();
        let sweep = threshold_sweep(&scores, &refs, &summary_outputs, &cfg.leakage.alphas, cfg.leakage.metric)?;
        write_sweep(out.join("sweep.tsv"), &sweep)?;
        for row in &sweep {
            say(format!(
                "alpha {:.2} {:<10} kept {:>4} metric {}",
                row.alpha,
                row.system,
                row.n_kept,
                row.metric.map_or("NA".to_string(), |m| format!("{m:.4}"))
            ));
        }
        Some(LeakageSummary {
            planted_dup_ids: corpus.planted_dup_ids.clone(),
            counts,
            sweep,
        })
    };

    let report = ExperimentReport {
        seed: cfg.seed,
        n_train: corpus.train.len(),
        n_valid: corpus.valid.len(),
        n_eval: corpus.eval.len(),
        n_external: corpus.external.len(),
        external_only_words: oov_words,
        oov_eval_ids,
        stages,
        systems,
        leakage,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Loads the artifacts a finished run left behind for decoding new inputs.
pub fn load_run_artifacts(out: &Path) -> Result<(CmvnStats, BpeModel)> {
    let path = out.join("cmvn.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stats = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((stats, BpeModel::load(out.join("bpe.json"))?))
}
