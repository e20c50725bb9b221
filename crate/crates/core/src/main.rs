use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ssum::augment::{
    build_augmented_set, estimate_duration_table, ingest_external_features, run_synthesizer, Lexicon,
    PhonemeInventory, SynthCommand,
};
use ssum::corpus::toy::{read_text_pairs, ToyRenderer};
use ssum::corpus::{
    generate_toy_corpus, join_words, normalize_utterances, read_manifest, train_bpe, words, write_features,
    write_manifest, BpeModel, CmvnStats, Utterance,
};
use ssum::decode::{decode_utterances, read_decodes, write_decodes};
use ssum::eval::{score_corpus, tokenize};
use ssum::leakage::{compute_leakage, threshold_sweep, write_sweep, Entry, LeakageScores, SweepMetric};
use ssum::model::{gradcheck_suite, load_checkpoint, save_checkpoint, GradcheckOptions, Model, ModelConfig};
use ssum::pipeline::{load_config, parse_alignments, run_experiment, ExperimentConfig};
use ssum::training::{train_stage, StageConfig, StageData, StageKind};
use ssum::{Error, Result};

#[derive(Parser)]
#[command(name = "ssum", version, about = "End-to-end speech summarization toolkit")]
struct Cli {
    /// Experiment config (TOML); defaults to the toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Toygen,
    /// Train a subword model on manifest transcripts/summaries and text pairs.
    BpeTrain {
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
        #[arg(long = "pairs")]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Run one training stage.
    Train(TrainArgs),
    /// Build the phoneme-modality set from external text pairs.
    AugmentBuild {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        alignments: Option<PathBuf>,
    },
    /// Turn external text pairs into speech-modality utterances via synthesized features.
    IngestTts {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        cmvn: PathBuf,
        /// Synthesizer template with {text} and {out}.
        #[arg(long, conflicts_with = "feats_dir")]
        synth: Option<String>,
        /// Directory of existing `<pair id>.ssf` files.
        #[arg(long)]
        feats_dir: Option<PathBuf>,
    },
    /// Render text to a feature file with the toy renderer.
    ToyTts {
        #[arg(long)]
        text: String,
    },
    /// Beam-decode a manifest.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        cmvn: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score decodes against manifest references.
    Score {
        #[arg(long)]
        decodes: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "summary")]
        reference: Reference,
        /// Restrict scoring to the ids listed one per line.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Evaluation-set contamination analysis.
    #[command(subcommand)]
    Leakage(LeakageCommand),
    /// Compare analytic and finite-difference gradients on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run the whole experiment described by the config.
    Experiment,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    #[arg(long = "train", required = true)]
    train: Vec<PathBuf>,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    /// Checkpoint to start from; a fresh model otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    /// CMVN statistics; computed from the training speech when absent.
    #[arg(long)]
    cmvn: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum LeakageCommand {
    /// Nearest-reference ROUGE-L F1 of every eval summary.
    Score {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long = "pool", required = true)]
        pool: Vec<PathBuf>,
    },
    /// Keep samples scoring at most alpha.
    Filter {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        alpha: f64,
    },
    /// Metric on the kept subset at each threshold for each system.
    Sweep {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// `name=decodes.tsv`, repeatable.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
        #[arg(long, default_value = "rougeL")]
        metric: String,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Asr,
    Ssum,
    Augmented,
}

impl Stage {
    fn kind(self) -> StageKind {
        match self {
            Stage::Asr => StageKind::Asr,
            Stage::Ssum => StageKind::Ssum,
            Stage::Augmented => StageKind::Augmented,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Summary,
    Transcript,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::preset("toy")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_cmvn(path: &Path) -> Result<CmvnStats> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_manifests(paths: &[PathBuf]) -> Result<Vec<Utterance>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_manifest(p)?);
    }
    Ok(all)
}

fn read_ids(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match &cli.command {
        Command::Toygen => {
            let mut spec = cfg.corpus.toy.clone();
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let out = out_or(&cli, "toy_corpus");
            let c = generate_toy_corpus(&spec)?;
            c.write(&out)?;
            eprintln!(
                "wrote {} train, {} valid, {} eval, {} external pairs to {}",
                c.train.len(),
                c.valid.len(),
                c.eval.len(),
                c.external.len(),
                out.display()
            );
        }
        Command::BpeTrain {
            manifests,
            pairs,
            vocab_size,
        } => {
            let mut texts = Vec::new();
            for u in read_manifests(manifests)? {
                texts.push(u.transcript);
                texts.push(u.summary);
            }
            for p in pairs {
                for pair in read_text_pairs(p)? {
                    texts.push(pair.document);
                    texts.push(pair.summary);
                }
            }
            texts.retain(|t| !t.is_empty());
            let bpe = train_bpe(&texts, vocab_size.unwrap_or(cfg.model.vocab_size))?;
            let out = out_or(&cli, "bpe.json");
            bpe.save(&out)?;
            eprintln!("{} tokens, {} merges -> {}", bpe.vocab_size(), bpe.merges().len(), out.display());
        }
        Command::Train(args) => train(&cli, &cfg, args)?,
        Command::AugmentBuild {
            pairs,
            lexicon,
            alignments,
        } => {
            let inv = PhonemeInventory::default();
            let lexicon = Lexicon::load(lexicon, &inv)?;
            let aligned = match alignments {
                Some(p) => parse_alignments(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?, &inv)?,
                None => Vec::new(),
            };
            let defaults = (cfg.augment.default_duration_mean, cfg.augment.default_duration_std);
            let table = estimate_duration_table(&aligned, inv.size(), defaults)?;
            let pairs = read_text_pairs(pairs)?;
            let set = build_augmented_set(&pairs, &lexicon, &inv, &table, ssum::seed::derive_seed(cfg.seed, "augment"))?;
            let out = out_or(&cli, "augmented");
            create_dir(&out)?;
            table.save(out.join("durations.tsv"), &inv)?;
            write_manifest(out.join("augmented.jsonl"), &set.utterances, out.join("feats"))?;
            eprintln!(
                "{} phoneme utterances ({} empty documents skipped) -> {}",
                set.utterances.len(),
                set.skipped_empty,
                out.display()
            );
        }
        Command::IngestTts {
            pairs,
            cmvn,
            synth,
            feats_dir,
        } => {
            let pairs = read_text_pairs(pairs)?;
            let stats = load_cmvn(cmvn)?;
            let out = out_or(&cli, "ingested");
            create_dir(&out)?;
            let paths = match (synth, feats_dir) {
                (Some(t), None) => {
                    let items: Vec<(String, String)> =
                        pairs.iter().map(|p| (p.id.clone(), join_words(&p.document))).collect();
                    run_synthesizer(&SynthCommand::new(t.clone())?, &items, &out.join("synth"))?
                }
                (None, Some(dir)) => pairs.iter().map(|p| dir.join(format!("{}.ssf", p.id))).collect(),
                _ => return Err(Error::Config("give exactly one of --synth and --feats-dir".into())),
            };
            let summaries: Vec<Vec<String>> = pairs.iter().map(|p| p.summary.clone()).collect();
            let mut utts = ingest_external_features(&paths, &stats, &summaries)?;
            for (u, p) in utts.iter_mut().zip(&pairs) {
                u.id = p.id.clone();
                u.transcript = p.document.clone();
            }
            write_manifest(out.join("ingested.jsonl"), &utts, out.join("feats"))?;
            eprintln!("{} speech utterances -> {}", utts.len(), out.display());
        }
        Command::ToyTts { text } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::Config("toy-tts needs --out".into()))?;
            let key = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let renderer = ToyRenderer::new(&cfg.corpus.toy);
            let (feats, _) = renderer.render(&words(text), &key)?;
            write_features(&out, &feats)?;
        }
        Command::Decode {
            checkpoint,
            manifest,
            bpe,
            cmvn,
            beam,
            max_len,
        } => {
            let model = load_checkpoint(checkpoint)?.model;
            let bpe = BpeModel::load(bpe)?;
            let mut utts = read_manifest(manifest)?;
            let has_speech = utts.iter().any(|u| u.features().is_some());
            match cmvn {
                Some(p) => normalize_utterances(&mut utts, &load_cmvn(p)?)?,
                None if has_speech => return Err(Error::Config("speech input needs --cmvn".into())),
                None => {}
            }
            let mut beam_cfg = cfg.decode;
            if let Some(b) = beam {
                beam_cfg.beam_width = *b;
            }
            if let Some(m) = max_len {
                beam_cfg.max_len = *m;
            }
            let recs = decode_utterances(&model, &bpe, &utts, &beam_cfg)?;
            let out = out_or(&cli, "decodes.tsv");
            write_decodes(&out, &recs)?;
            eprintln!("{} decodes -> {}", recs.len(), out.display());
        }
        Command::Score {
            decodes,
            manifest,
            reference,
            ids,
        } => {
            let hyps: HashMap<String, String> =
                read_decodes(decodes)?.into_iter().map(|r| (r.id, r.text)).collect();
            let keep = ids.as_deref().map(read_ids).transpose()?;
            let mut pairs = Vec::new();
            for u in read_manifest(manifest)? {
                if keep.as_ref().is_some_and(|k| !k.contains(&u.id)) {
                    continue;
                }
                let h = hyps
                    .get(&u.id)
                    .ok_or_else(|| Error::Data(format!("no decode for {}", u.id)))?;
                let r = match reference {
                    Reference::Summary => join_words(&u.summary),
                    Reference::Transcript => join_words(&u.transcript),
                };
                pairs.push((tokenize(&r), tokenize(h)));
            }
            let report = score_corpus(&pairs)?;
            print!("{}", report.table());
            if let Some(out) = &cli.out {
                save_json(out, &report)?;
            }
        }
        Command::Leakage(cmd) => leakage(&cli, &cfg, cmd)?,
        Command::Gradcheck { seeds, tolerance } => {
            let seeds: Vec<u64> = (0..*seeds).map(|s| cfg.seed.wrapping_add(s)).collect();
            let entries = gradcheck_suite(&ModelConfig::tiny(), &seeds, GradcheckOptions::default())?;
            let mut worst = 0.0f64;
            for e in &entries {
                println!(
                    "{:?}\t{:?}\tseed={}\tchecked={}\tmax_rel_err={:.3e}\tworst={}[{}]",
                    e.positional_mode,
                    e.norm_mode,
                    e.seed,
                    e.report.checked,
                    e.report.max_rel_err,
                    e.report.worst.0,
                    e.report.worst.1
                );
                worst = worst.max(e.report.max_rel_err);
            }
            if !(worst < *tolerance) {
                return Err(Error::Numerical(format!(
                    "max relative error {worst:.3e} exceeds {tolerance:.1e}"
                )));
            }
        }
        Command::Experiment => {
            let out = out_or(&cli, "experiment");
            run_experiment(&cfg, &out, &mut std::io::stderr())?;
            eprintln!("report -> {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn train(cli: &Cli, cfg: &ExperimentConfig, args: &TrainArgs) -> Result<()> {
    let kind = args.stage.kind();
    let mut stage = match cfg.stage(kind) {
        Some(s) => s.clone(),
        None => StageConfig::preset(kind.name())?,
    };
    if let Some(e) = args.max_epochs {
        stage.max_epochs = e;
    }
    let stage = ssum::pipeline::effective_stage(&stage, cfg.seed);
    let out = out_or(cli, &format!("run_{}", kind.name()));
    create_dir(&out)?;
    let bpe = BpeModel::load(&args.bpe)?;
    let mut train = read_manifests(&args.train)?;
    let mut valid = read_manifest(&args.valid)?;
    let stats = match &args.cmvn {
        Some(p) => load_cmvn(p)?,
        None => {
            let stats = CmvnStats::from_matrices(train.iter().filter_map(|u| u.features()))?;
            save_json(&out.join("cmvn.json"), &stats)?;
            stats
        }
    };
    normalize_utterances(&mut train, &stats)?;
    normalize_utterances(&mut valid, &stats)?;
    let model = match &args.init {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let mc = ModelConfig {
                vocab_size: bpe.vocab_size(),
                ..cfg.model.clone()
            };
            Model::new(mc, ssum::seed::derive_seed(cfg.seed, "init"))?
        }
    };
    if model.config.vocab_size != bpe.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} differs from the subword model's {}",
            model.config.vocab_size,
            bpe.vocab_size()
        )));
    }
    let mut log = Vec::new();
    let outcome = train_stage(
        model,
        None,
        &stage,
        &StageData {
            train: &train,
            valid: &valid,
            bpe: &bpe,
        },
        Some(&mut log),
    )?;
    eprint!("{}", String::from_utf8_lossy(&log));
    std::fs::write(out.join("log.tsv"), &log).map_err(|e| Error::io(&out, e))?;
    save_checkpoint(out.join("best.ssc"), &outcome.best.model, &outcome.best.meta())?;
    save_checkpoint(out.join("last.ssc"), &outcome.last.model, &outcome.last.meta())?;
    eprintln!(
        "best epoch {} (validation accuracy {:.4}) -> {}",
        outcome.best.epoch,
        outcome.best.validation_accuracy,
        out.display()
    );
    Ok(())
}

fn leakage(cli: &Cli, cfg: &ExperimentConfig, cmd: &LeakageCommand) -> Result<()> {
    let summaries = |path: &Path| -> Result<Vec<Entry>> {
        Ok(read_manifest(path)?
            .into_iter()
            .map(|u| Entry::new(u.id, u.summary))
            .collect())
    };
    match cmd {
        LeakageCommand::Score { eval, pool } => {
            let mut entries = Vec::new();
            for p in pool {
                entries.extend(summaries(p)?);
            }
            let scores = compute_leakage(&summaries(eval)?, &entries)?;
            let out = out_or(cli, "leakage_scores.tsv");
            scores.write_tsv(&out)?;
            eprintln!("{} scores -> {}", scores.samples.len(), out.display());
        }
        LeakageCommand::Filter { scores, alpha } => {
            let r = LeakageScores::read_tsv(scores)?.filter(*alpha)?;
            let out = out_or(cli, "kept.txt");
            let text: String = r.kept_ids.iter().map(|id| format!("{id}\n")).collect();
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
            println!("alpha={alpha}\tkept={}\tremoved={}", r.kept_ids.len(), r.removed_ids.len());
        }
        LeakageCommand::Sweep {
            scores,
            eval,
            systems,
            metric,
            alphas,
        } => {
            let scores = LeakageScores::read_tsv(scores)?;
            let refs: HashMap<String, Vec<String>> = summaries(eval)?.into_iter().map(|e| (e.id, e.words)).collect();
            let mut outputs = Vec::new();
            for s in systems {
                let (name, path) = s
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--system {s:?} must look like name=decodes.tsv")))?;
                let hyps = read_decodes(path)?.into_iter().map(|r| (r.id, tokenize(&r.text))).collect();
                outputs.push((name.to_string(), hyps));
            }
            let alphas = alphas.clone().unwrap_or_else(|| cfg.leakage.alphas.clone());
            let rows = threshold_sweep(&scores, &refs, &outputs, &alphas, SweepMetric::parse(metric)?)?;
            let out = out_or(cli, "sweep.tsv");
            write_sweep(&out, &rows)?;
            for r in &rows {
                let m = r.metric.map_or("NA".to_string(), |m| format!("{m:.4}"));
                println!("{:.2}\t{}\t{}\t{}", r.alpha, r.system, m, r.n_kept);
            }
        }
    }
    Ok(())
}
