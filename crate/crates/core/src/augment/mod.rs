//! Phoneme-based augmentation: inventory, G2P, durations, repetition and the
//! external feature plug.

pub mod duration;
pub mod ingest;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Role, Utterance, UtteranceInput};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub use duration::{
    collapse_runs, estimate_duration_table, repeat_phonemes, DurationTable, RepeatedPhonemeSequence,
};
pub use ingest::{ingest_external_features, run_synthesizer, SynthCommand};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const WORD_BOUNDARY: u32 = 2;

/// Stress-free ARPAbet.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeInventory {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for PhonemeInventory {
    fn default() -> Self {
        let names = ["<pad>", "<unk>", "<wb>"]
            .into_iter()
            .chain(ARPABET)
            .map(str::to_string)
            .collect();
        PhonemeInventory::from_names(names).expect("built-in inventory is unique")
    }
}

impl PhonemeInventory {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let index: HashMap<String, u32> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        if index.len() != names.len() {
            return Err(Error::Config("phoneme names must be unique".into()));
        }
        Ok(PhonemeInventory { names, index })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }
}

/// Word to phoneme-id pronunciations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<u32>>,
}

fn strip_stress(symbol: &str) -> &str {
    symbol.trim_end_matches(|c: char| c.is_ascii_digit())
}

impl Lexicon {
    /// Builds from `(word, symbols)` pairs; stress digits on symbols are ignored.
    pub fn from_entries<W, S>(inv: &PhonemeInventory, entries: impl IntoIterator<Item = (W, Vec<S>)>) -> Result<Self>
    where
        W: AsRef<str>,
        S: AsRef<str>,
    {
        let mut map = HashMap::new();
        for (word, symbols) in entries {
            let ids = symbols
                .iter()
                .map(|s| {
                    let s = strip_stress(s.as_ref());
                    inv.id(s).ok_or_else(|| {
                        Error::Format(format!("unknown phoneme {s:?} for word {:?}", word.as_ref()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            map.insert(word.as_ref().to_lowercase(), ids);
        }
        Ok(Lexicon { entries: map })
    }

    pub fn load(path: impl AsRef<Path>, inv: &PhonemeInventory) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected word TAB phonemes", path.display(), i + 1))
            })?;
            entries.push((word.to_string(), phones.split_whitespace().collect::<Vec<_>>()));
        }
        Lexicon::from_entries(inv, entries)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Writes entries sorted by word.
    pub fn save(&self, path: impl AsRef<Path>, inv: &PhonemeInventory) -> Result<()> {
        let path = path.as_ref();
        let mut words: Vec<_> = self.entries.keys().collect();
        words.sort();
        let mut out = String::new();
        for w in words {
            let phones: Vec<&str> = self.entries[w]
                .iter()
                .map(|&id| inv.name(id).unwrap_or("<unk>"))
                .collect();
            out.push_str(&format!("{w}\t{}\n", phones.join(" ")));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn insert(&mut self, word: &str, ids: Vec<u32>) {
        self.entries.insert(word.to_lowercase(), ids);
    }
}

/// Letter fallback for out-of-lexicon words. Digraphs are tried before single letters.
pub const DIGRAPHS: [(&str, &[&str]); 6] = [
    ("ch", &["CH"]),
    ("sh", &["SH"]),
    ("th", &["TH"]),
    ("ng", &["NG"]),
    ("ee", &["IY"]),
    ("oo", &["UW"]),
];

pub fn letter_phonemes(c: char) -> &'static [&'static str] {
    match c {
        'a' => &["AE"],
        'b' => &["B"],
        'c' => &["K"],
        'd' => &["D"],
        'e' => &["EH"],
        'f' => &["F"],
        'g' => &["G"],
        'h' => &["HH"],
        'i' => &["IH"],
        'j' => &["JH"],
        'k' => &["K"],
        'l' => &["L"],
        'm' => &["M"],
        'n' => &["N"],
        'o' => &["AA"],
        'p' => &["P"],
        'q' => &["K"],
        'r' => &["R"],
        's' => &["S"],
        't' => &["T"],
        'u' => &["AH"],
        'v' => &["V"],
        'w' => &["W"],
        'x' => &["K", "S"],
        'y' => &["Y"],
        'z' => &["Z"],
        _ => &[],
    }
}

/// Deterministic spelling-based pronunciation. Characters outside `a-z` become `<unk>`.
pub fn fallback_pronunciation(word: &str, inv: &PhonemeInventory) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < chars.len() {
        if i + 1 < chars.len() {
            let pair: String = chars[i..i + 2].iter().collect();
            for (g, ph) in DIGRAPHS {
                if pair == g {
                    out.extend(ph.iter().filter_map(|p| inv.id(p)));
                    i += 2;
                    continue 'outer;
                }
            }
        }
        let ph = letter_phonemes(chars[i]);
        if ph.is_empty() {
            out.push(UNK);
        } else {
            out.extend(ph.iter().map(|p| inv.id(p).unwrap_or(UNK)));
        }
        i += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeSequence {
    pub ids: Vec<u32>,
    pub source_words: Vec<String>,
    pub oov_flags: Vec<bool>,
}

pub fn g2p<S: AsRef<str>>(lexicon: &Lexicon, inv: &PhonemeInventory, words: &[S]) -> Result<PhonemeSequence> {
    if lexicon.is_empty() {
        return Err(Error::Config("g2p needs a non-empty lexicon".into()));
    }
    let mut seq = PhonemeSequence {
        ids: Vec::new(),
        source_words: Vec::new(),
        oov_flags: Vec::new(),
    };
    for (i, w) in words.iter().enumerate() {
        let w = w.as_ref().to_lowercase();
        if i > 0 {
            seq.ids.push(WORD_BOUNDARY);
        }
        match lexicon.get(&w) {
            Some(ids) => {
                seq.ids.extend_from_slice(ids);
                seq.oov_flags.push(false);
            }
            None => {
                seq.ids.extend(fallback_pronunciation(&w, inv));
                seq.oov_flags.push(true);
            }
        }
        seq.source_words.push(w);
    }
    Ok(seq)
}

/// External text pair: a document and its summary.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub id: String,
    pub document: Vec<String>,
    pub summary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub utterances: Vec<Utterance>,
    /// Pairs dropped because their document was empty.
    pub skipped_empty: usize,
}

/// One phoneme-modality utterance per pair, with ids `repeat_phonemes(g2p(document))`.
/// Each pair draws from its own seed derived from `seed` and the pair id.
pub fn build_augmented_set(
    pairs: &[TextPair],
    lexicon: &Lexicon,
    inv: &PhonemeInventory,
    table: &DurationTable,
    seed: u64,
) -> Result<AugmentedSet> {
    let mut set = AugmentedSet {
        utterances: Vec::with_capacity(pairs.len()),
        skipped_empty: 0,
    };
    for p in pairs {
        if p.document.is_empty() {
            set.skipped_empty += 1;
            continue;
        }
        let seq = g2p(lexicon, inv, &p.document)?;
        let rep = repeat_phonemes(&seq, table, derive_seed(seed, &p.id));
        set.utterances.push(Utterance {
            id: p.id.clone(),
            input: UtteranceInput::Phonemes(rep.ids),
            transcript: p.document.clone(),
            summary: p.summary.clone(),
            role: Role::Ext,
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(inv: &PhonemeInventory, names: &[&str]) -> Vec<u32> {
        names.iter().map(|n| inv.id(n).unwrap()).collect()
    }

    #[test]
    fn inventory_has_42_units() {
        let inv = PhonemeInventory::default();
        assert_eq!(inv.size(), 42);
        assert_eq!(inv.id("<wb>"), Some(WORD_BOUNDARY));
        assert_eq!(inv.id("ZH"), Some(41));
    }

    fn lexicon(inv: &PhonemeInventory) -> Lexicon {
        Lexicon::from_entries(inv, [("cat", vec!["K", "AE1", "T"]), ("a", vec!["AH0"])]).unwrap()
    }

    #[test]
    fn known_word_strips_stress() {
        let inv = PhonemeInventory::default();
        let s = g2p(&lexicon(&inv), &inv, &["cat"]).unwrap();
        assert_eq!(s.ids, ids(&inv, &["K", "AE", "T"]));
        assert_eq!(s.oov_flags, vec![false]);
    }

    #[test]
    fn oov_uses_letter_table() {
        let inv = PhonemeInventory::default();
        let s = g2p(&lexicon(&inv), &inv, &["zzqx"]).unwrap();
        assert_eq!(s.ids, ids(&inv, &["Z", "Z", "K", "K", "S"]));
        assert_eq!(s.oov_flags, vec![true]);
        let s = g2p(&lexicon(&inv), &inv, &["sheep"]).unwrap();
        assert_eq!(s.ids, ids(&inv, &["SH", "IY", "P"]));
        assert_eq!(fallback_pronunciation("a1", &inv), vec![inv.id("AE").unwrap(), UNK]);
    }

    #[test]
    fn boundaries_between_words_and_empty_input() {
        let inv = PhonemeInventory::default();
        let lex = lexicon(&inv);
        let s = g2p(&lex, &inv, &["a", "cat"]).unwrap();
        assert_eq!(s.ids, ids(&inv, &["AH", "<wb>", "K", "AE", "T"]));
        let e = g2p::<&str>(&lex, &inv, &[]).unwrap();
        assert!(e.ids.is_empty() && e.oov_flags.is_empty());
        assert!(matches!(
            g2p(&Lexicon::default(), &inv, &["cat"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lexicon_file_round_trip() {
        let inv = PhonemeInventory::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        fs::write(&p, "cat\tK AE1 T\nshoe\tSH UW1\n").unwrap();
        let lex = Lexicon::load(&p, &inv).unwrap();
        assert_eq!(lex.get("shoe").unwrap(), ids(&inv, &["SH", "UW"]).as_slice());
        let q = dir.path().join("out.tsv");
        lex.save(&q, &inv).unwrap();
        assert_eq!(Lexicon::load(&q, &inv).unwrap(), lex);
        fs::write(&p, "cat\tK QQ T\n").unwrap();
        assert!(matches!(Lexicon::load(&p, &inv), Err(Error::Format(_))));
    }

    #[test]
    fn augmented_set_ids_and_lengths() {
        let inv = PhonemeInventory::default();
        let lex = lexicon(&inv);
        let table = DurationTable::with_defaults(inv.size(), 3.0, 1.0);
        let pairs = vec![
            TextPair {
                id: "e1".into(),
                document: vec!["a".into(), "cat".into(), "gladiator".into()],
                summary: vec!["cat".into()],
            },
            TextPair {
                id: "e2".into(),
                document: vec![],
                summary: vec!["x".into()],
            },
        ];
        let set = build_augmented_set(&pairs, &lex, &inv, &table, 7).unwrap();
        assert_eq!(set.skipped_empty, 1);
        assert_eq!(set.utterances.len(), 1);
        let u = &set.utterances[0];
        assert!(u.phoneme_ids().unwrap().iter().all(|&i| (i as usize) < 42));
        assert_eq!(u.summary, vec!["cat"]);
        assert_eq!(u.role, Role::Ext);
        let again = build_augmented_set(&pairs, &lex, &inv, &table, 7).unwrap();
        assert_eq!(again, set);
        assert!(build_augmented_set(&[], &lex, &inv, &table, 7)
            .unwrap()
            .utterances
            .is_empty());
    }
}
