//! Deterministic synthetic corpus.
//!
//! Transcripts fill six slots of a fixed template; summaries restate the same six
//! slots in another template. Speech is rendered by G2P, phoneme repetition, and
//! a fixed random vector per phoneme plus Gaussian noise.
//!
//! Summary ROUGE-L between two items sharing `k` slots is `(7 + k) / 13`, so one
//! substituted slot gives 0.923 and two give 0.846. Evaluation items are sampled
//! so that only the planted near-duplicates exceed 0.9.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{join_words, write_manifest, FeatureMatrix, Role, Utterance, UtteranceInput};
use crate::augment::{
    fallback_pronunciation, g2p, repeat_phonemes, DurationTable, Lexicon, PhonemeInventory,
    RepeatedPhonemeSequence, TextPair, WORD_BOUNDARY,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const OPENERS: [&str; 5] = ["so", "now", "okay", "next", "first"];
pub const FIXED_WORDS: [&str; 8] = ["we", "a", "with", "in", "the", "learn", "how", "to"];
pub const SLOT_NAMES: [&str; 6] = ["verb", "adj", "color", "noun", "tool", "place"];
pub const SLOTS: [[&str; 9]; 6] = [
    ["draw", "paint", "fold", "cut", "build", "clean", "stitch", "carve", "wrap"],
    ["small", "big", "soft", "bright", "old", "new", "tall", "round", "flat"],
    ["red", "blue", "green", "black", "white", "pink", "gold", "gray", "brown"],
    ["shoe", "hat", "cake", "box", "kite", "lamp", "vase", "bowl", "doll"],
    ["brush", "glue", "tape", "wire", "thread", "chalk", "foam", "clay", "paper"],
    ["kitchen", "garden", "studio", "garage", "office", "class", "yard", "attic", "park"],
];
const NOUN: usize = 3;
const OPTIONS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_eval: usize,
    pub n_external: usize,
    pub n_planted_dups: usize,
    /// Evaluation items whose noun is drawn from `oov_words`.
    pub n_oov_eval: usize,
    /// Fraction of the remaining evaluation items sampled to share at most three
    /// slots with any training or validation summary.
    pub clean_eval_fraction: f64,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub oov_words: Vec<String>,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            seed: 1,
            n_train: 2000,
            n_valid: 100,
            n_eval: 100,
            n_external: 600,
            n_planted_dups: 5,
            n_oov_eval: 15,
            clean_eval_fraction: 0.5,
            noise_sigma: 0.1,
            feature_dim: 20,
            oov_words: ["gladiator", "sandals", "lantern"].map(String::from).to_vec(),
        }
    }
}

/// Every word the generator can emit outside `oov_words`.
pub fn base_vocabulary() -> BTreeSet<&'static str> {
    OPENERS
        .iter()
        .chain(FIXED_WORDS.iter())
        .chain(SLOTS.iter().flatten())
        .copied()
        .collect()
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_planted_dups > self.n_eval {
            return Err(Error::Config(format!(
                "n_planted_dups {} exceeds n_eval {}",
                self.n_planted_dups, self.n_eval
            )));
        }
        if self.n_planted_dups + self.n_oov_eval > self.n_eval {
            return Err(Error::Config(
                "n_planted_dups + n_oov_eval exceeds n_eval".into(),
            ));
        }
        if self.n_planted_dups > 0 && self.n_train == 0 {
            return Err(Error::Config("planted duplicates need training items".into()));
        }
        if self.n_oov_eval > 0 && self.oov_words.is_empty() {
            return Err(Error::Config("n_oov_eval > 0 needs oov_words".into()));
        }
        if !(0.0..=1.0).contains(&self.clean_eval_fraction) {
            return Err(Error::Config("clean_eval_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let base = base_vocabulary();
        for w in &self.oov_words {
            if base.contains(w.as_str()) {
                return Err(Error::Config(format!(
                    "oov word {w:?} overlaps the toy base vocabulary"
                )));
            }
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::Config(format!("oov word {w:?} must be lowercase a-z")));
            }
        }
        Ok(())
    }
}

/// Slot fillers of one item; `noun_override` replaces the noun with an OOV word.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Combo {
    slots: [usize; 6],
    oov_noun: Option<usize>,
}

impl Combo {
    fn word<'a>(&self, s: usize, oov: &'a [String]) -> &'a str {
        match (s, self.oov_noun) {
            (NOUN, Some(o)) => &oov[o],
            _ => SLOTS[s][self.slots[s]],
        }
    }

    fn shared_slots(&self, other: &Combo) -> usize {
        (0..6)
            .filter(|&s| {
                let a_oov = s == NOUN && self.oov_noun.is_some();
                let b_oov = s == NOUN && other.oov_noun.is_some();
                match (a_oov, b_oov) {
                    (false, false) => self.slots[s] == other.slots[s],
                    (true, true) => self.oov_noun == other.oov_noun,
                    _ => false,
                }
            })
            .count()
    }

    fn random(rng: &mut ChaCha8Rng) -> Combo {
        let mut slots = [0; 6];
        for s in &mut slots {
            *s = rng.gen_range(0..OPTIONS);
        }
        Combo {
            slots,
            oov_noun: None,
        }
    }

    fn transcript(&self, opener: usize, oov: &[String]) -> Vec<String> {
        let w = |s| self.word(s, oov);
        [
            OPENERS[opener], "we", w(0), "a", w(1), w(2), w(3), "with", w(4), "in", "the", w(5),
        ]
        .map(String::from)
        .to_vec()
    }

    fn summary(&self, oov: &[String]) -> Vec<String> {
        let w = |s| self.word(s, oov);
        [
            "learn", "how", "to", w(0), "a", w(1), w(2), w(3), "in", "the", w(5), "with", w(4),
        ]
        .map(String::from)
        .to_vec()
    }
}

/// Renders word sequences into feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRenderer {
    pub inventory: PhonemeInventory,
    pub lexicon: Lexicon,
    pub durations: DurationTable,
    /// One vector per phoneme id.
    pub vectors: Vec<Vec<f32>>,
    pub noise_sigma: f64,
    seed: u64,
}

impl ToyRenderer {
    pub fn new(spec: &ToyCorpusSpec) -> Self {
        let inventory = PhonemeInventory::default();
        let mut lexicon = Lexicon::default();
        for w in base_vocabulary() {
            lexicon.insert(w, fallback_pronunciation(w, &inventory));
        }
        let mut durations = DurationTable::with_defaults(inventory.size(), 3.0, 0.5);
        for id in 3..inventory.size() as u32 {
            durations.set(id, f64::from(3 + id % 3), 0.5);
        }
        durations.boundary_frames = Some(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "phoneme-vectors"));
        let vectors = (0..inventory.size())
            .map(|_| {
                (0..spec.feature_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect()
            })
            .collect();
        ToyRenderer {
            inventory,
            lexicon,
            durations,
            vectors,
            noise_sigma: spec.noise_sigma,
            seed: spec.seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Durations depend only on the text, noise on `key`, so equal texts render equal
    /// features when `noise_sigma` is zero.
    pub fn render<S: AsRef<str>>(&self, words: &[S], key: &str) -> Result<(FeatureMatrix, RepeatedPhonemeSequence)> {
        let seq = g2p(&self.lexicon, &self.inventory, words)?;
        let text = join_words(words);
        let rep = repeat_phonemes(&seq, &self.durations, derive_seed(self.seed, &format!("dur/{text}")));
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(rep.ids.len() * dim);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("noise/{key}")));
        for &p in &rep.ids {
            for &v in &self.vectors[p as usize] {
                let noise = if self.noise_sigma > 0.0 {
                    self.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push((f64::from(v) + noise) as f32);
            }
        }
        Ok((FeatureMatrix::new(rep.ids.len(), dim, data)?, rep))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    /// Summarization-role speech utterances; transcripts are filled in as well.
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub external: Vec<TextPair>,
    pub lexicon: Lexicon,
    /// The durations the renderer sampled from.
    pub true_durations: DurationTable,
    /// `(phoneme id, frames)` for every rendered training phoneme except word boundaries.
    pub alignments: Vec<(u32, usize)>,
    pub planted_dup_ids: Vec<String>,
    pub oov_eval_ids: Vec<String>,
    pub renderer: ToyRenderer,
}

impl ToyCorpus {
    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.eval)
            .flat_map(|u| u.transcript.iter().chain(&u.summary).cloned())
            .collect()
    }

    /// Speech view of a split under another role, e.g. `Role::Asr` for stage (i).
    pub fn as_role(utts: &[Utterance], role: Role) -> Vec<Utterance> {
        utts.iter().map(|u| u.with_role(role)).collect()
    }

    /// Writes manifests, shared feature files, the lexicon, the true duration table,
    /// the external text pairs and the bookkeeping id lists under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let feats = dir.join("feats");
        write_manifest(dir.join("train_asr.jsonl"), &Self::as_role(&self.train, Role::Asr), &feats)?;
        write_manifest(dir.join("train_sum.jsonl"), &self.train, &feats)?;
        write_manifest(dir.join("valid_asr.jsonl"), &Self::as_role(&self.valid, Role::Asr), &feats)?;
        write_manifest(dir.join("valid_sum.jsonl"), &self.valid, &feats)?;
        write_manifest(dir.join("eval.jsonl"), &self.eval, &feats)?;
        write_text_pairs(dir.join("ext_text.tsv"), &self.external)?;
        self.lexicon.save(dir.join("lexicon.tsv"), &self.renderer.inventory)?;
        self.true_durations
            .save(dir.join("durations_true.tsv"), &self.renderer.inventory)?;
        let aligned: String = self
            .alignments
            .iter()
            .map(|(p, n)| format!("{}\t{n}\n", self.renderer.inventory.name(*p).unwrap_or("<unk>")))
            .collect();
        write_text(dir.join("alignments.tsv"), &aligned)?;
        write_text(dir.join("planted.txt"), &lines(&self.planted_dup_ids))?;
        write_text(dir.join("oov_eval.txt"), &lines(&self.oov_eval_ids))?;
        let spec = toml::to_string(&self.spec)
            .map_err(|e| Error::Format(format!("serializing toy spec: {e}")))?;
        write_text(dir.join("toy_spec.toml"), &spec)
    }
}

fn lines(ids: &[String]) -> String {
    ids.iter().map(|i| format!("{i}\n")).collect()
}

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `id TAB document TAB summary` per line.
pub fn write_text_pairs(path: impl AsRef<Path>, pairs: &[TextPair]) -> Result<()> {
    let text: String = pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.id, join_words(&p.document), join_words(&p.summary)))
        .collect();
    write_text(path, &text)
}

pub fn read_text_pairs(path: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            match f[..] {
                [id, doc, sum] => Ok(TextPair {
                    id: id.to_string(),
                    document: super::words(doc),
                    summary: super::words(sum),
                }),
                _ => Err(Error::Format(format!(
                    "{}:{}: expected id, document, summary",
                    path.display(),
                    i + 1
                ))),
            }
        })
        .collect()
}

fn max_shared(c: &Combo, pool: &[Combo]) -> usize {
    pool.iter().map(|p| c.shared_slots(p)).max().unwrap_or(0)
}

pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let renderer = ToyRenderer::new(spec);
    let oov = &spec.oov_words;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "toy-corpus"));

    let train_combos: Vec<Combo> = (0..spec.n_train).map(|_| Combo::random(&mut rng)).collect();
    let valid_combos: Vec<Combo> = (0..spec.n_valid).map(|_| Combo::random(&mut rng)).collect();
    let pool: Vec<Combo> = train_combos.iter().chain(&valid_combos).cloned().collect();

    // Evaluation: planted near-duplicates, OOV-noun items, then regular items.
    let mut eval_combos: Vec<(Combo, bool)> = Vec::with_capacity(spec.n_eval);
    for _ in 0..spec.n_planted_dups {
        let mut c = train_combos[rng.gen_range(0..train_combos.len())].clone();
        let s = rng.gen_range(0..6);
        let shift = rng.gen_range(1..OPTIONS);
        c.slots[s] = (c.slots[s] + shift) % OPTIONS;
        eval_combos.push((c, true));
    }
    let n_regular = spec.n_eval - spec.n_planted_dups - spec.n_oov_eval;
    let n_clean = (spec.clean_eval_fraction * (n_regular + spec.n_oov_eval) as f64).round() as usize;
    let mut made = 0usize;
    let sample = |oov_noun: bool, rng: &mut ChaCha8Rng, made: &mut usize| -> Combo {
        let limit = if *made < n_clean { 3 } else { 4 };
        *made += 1;
        loop {
            let mut c = Combo::random(rng);
            if oov_noun {
                c.oov_noun = Some(rng.gen_range(0..oov.len()));
            }
            if max_shared(&c, &pool) <= limit {
                return c;
            }
        }
    };
    for _ in 0..spec.n_oov_eval {
        let c = sample(true, &mut rng, &mut made);
        eval_combos.push((c, false));
    }
    for _ in 0..n_regular {
        let c = sample(false, &mut rng, &mut made);
        eval_combos.push((c, false));
    }
    eval_combos.shuffle(&mut rng);

    let mut alignments = Vec::new();
    let mut build = |prefix: &str, i: usize, c: &Combo, rng: &mut ChaCha8Rng, keep_alignment: bool| -> Result<Utterance> {
        let id = format!("{prefix}-{i:05}");
        let transcript = c.transcript(rng.gen_range(0..OPENERS.len()), oov);
        let (feats, rep) = renderer.render(&transcript, &id)?;
        if keep_alignment {
            let mut pos = 0;
            for &len in &rep.run_lengths {
                let p = rep.ids[pos];
                if p != WORD_BOUNDARY {
                    alignments.push((p, len));
                }
                pos += len;
            }
        }
        Ok(Utterance {
            id,
            input: UtteranceInput::Speech(feats),
            transcript,
            summary: c.summary(oov),
            role: Role::Sum,
        })
    };
    let mut train = Vec::with_capacity(spec.n_train);
    for (i, c) in train_combos.iter().enumerate() {
        train.push(build("train", i, c, &mut rng, true)?);
    }
    let mut valid = Vec::with_capacity(spec.n_valid);
    for (i, c) in valid_combos.iter().enumerate() {
        valid.push(build("valid", i, c, &mut rng, false)?);
    }
    let mut eval = Vec::with_capacity(spec.n_eval);
    let mut planted_dup_ids = Vec::new();
    let mut oov_eval_ids = Vec::new();
    for (i, (c, planted)) in eval_combos.iter().enumerate() {
        let u = build("eval", i, c, &mut rng, false)?;
        if *planted {
            planted_dup_ids.push(u.id.clone());
        }
        if c.oov_noun.is_some() {
            oov_eval_ids.push(u.id.clone());
        }
        eval.push(u);
    }

    // External pairs share the templates; the noun is OOV half the time.
    let mut external = Vec::with_capacity(spec.n_external);
    for i in 0..spec.n_external {
        let mut c = Combo::random(&mut rng);
        if !oov.is_empty() && rng.gen_bool(0.5) {
            c.oov_noun = Some(rng.gen_range(0..oov.len()));
        }
        external.push(TextPair {
            id: format!("ext-{i:05}"),
            document: c.transcript(rng.gen_range(0..OPENERS.len()), oov),
            summary: c.summary(oov),
        });
    }

    Ok(ToyCorpus {
        spec: spec.clone(),
        train,
        valid,
        eval,
        external,
        lexicon: renderer.lexicon.clone(),
        true_durations: renderer.durations.clone(),
        alignments,
        planted_dup_ids,
        oov_eval_ids,
        renderer,
    })
}
