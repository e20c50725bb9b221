//! Byte-pair-encoding subword tokenizer.
//!
//! Words are split into characters; the last character of every word carries an
//! end-of-word marker (`</w>`), so decoding can restore word boundaries. Merges are
//! learned greedily by pair frequency, ties broken lexicographically.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];
pub const WORD_END: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeModel {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

fn split_word(word: &str) -> Vec<String> {
    let n = word.chars().count();
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{WORD_END}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Minimum vocabulary size able to hold the specials and the symbol alphabet of `texts`.
pub fn min_vocab_size<S: AsRef<str>>(texts: &[Vec<S>]) -> usize {
    let mut alphabet = std::collections::BTreeSet::new();
    for words in texts {
        for w in words {
            alphabet.extend(split_word(w.as_ref()));
        }
    }
    SPECIALS.len() + alphabet.len()
}

pub fn train_bpe<S: AsRef<str>>(texts: &[Vec<S>], vocab_size: usize) -> Result<BpeModel> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for words in texts {
        for w in words {
            let w = w.as_ref();
            if !w.is_empty() {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<String>, usize)> =
        counts.iter().map(|(w, &n)| (split_word(w), n)).collect();
    let alphabet: std::collections::BTreeSet<String> =
        words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let minimum = SPECIALS.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is too small: the specials plus the training alphabet need at least {minimum}"
        )));
    }

    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    vocab.extend(alphabet);
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        // Highest count first, then the lexicographically smallest pair.
        let best = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((a, b)) = best else {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is unreachable: training texts saturate at {} entries",
                vocab.len()
            )));
        };
        let merged = format!("{a}{b}");
        for (symbols, _) in &mut words {
            apply_merge(symbols, &a, &b, &merged);
        }
        if !vocab.contains(&merged) {
            vocab.push(merged);
        }
        merges.push((a, b));
    }
    Ok(BpeModel::from_parts(vocab, merges))
}

fn apply_merge(symbols: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl BpeModel {
    pub fn from_parts(vocab: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut m = BpeModel {
            vocab,
            merges,
            index: HashMap::new(),
            ranks: HashMap::new(),
        };
        m.rebuild_index();
        m
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self.ranks = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols = split_word(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let merged = format!("{a}{b}");
            apply_merge(&mut symbols, a, b, &merged);
        }
        out.extend(symbols.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    /// Token ids for `text`; no `sos`/`eos` are added.
    pub fn encode<S: AsRef<str>>(&self, text: &[S]) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text {
            let w = w.as_ref();
            if !w.is_empty() {
                self.encode_word(w, &mut out);
            }
        }
        out
    }

    /// Words for `ids`. `pad`, `sos` and `eos` are skipped; `unk` decodes to `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Range(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab.len()
                ))
            })?;
            match id {
                PAD | SOS | EOS => continue,
                UNK => current.push_str(SPECIALS[UNK as usize]),
                _ => match tok.strip_suffix(WORD_END) {
                    Some(head) => {
                        current.push_str(head);
                        words.push(std::mem::take(&mut current));
                    }
                    None => current.push_str(tok),
                },
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("serializing BPE model: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: BpeModel = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.vocab.len() < SPECIALS.len()
            || m.vocab[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with the four special tokens",
                path.display()
            )));
        }
        m.rebuild_index();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn no_merges_when_alphabet_fills_vocab() {
        let m = train_bpe(&texts(&["a b", "a b"]), 6).unwrap();
        assert_eq!(m.vocab_size(), 6);
        assert!(m.merges().is_empty());
        assert_eq!(&m.vocab()[..4], &SPECIALS.map(String::from));
        assert_eq!(m.decode(&m.encode(&["a", "b"])).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn first_merge_is_l_o_with_frequency_four() {
        let t = texts(&["low low low", "lowest"]);
        let m = train_bpe(&t, 12).unwrap();
        assert_eq!(m.vocab_size(), 12);
        assert_eq!(m.merges()[0], ("l".to_string(), "o".to_string()));
        // Hand count: "low" x3 and "lowest" x1 each contribute one (l, o);
        // (o, w</w>) only reaches 3.
        // The alphabet has 7 symbols, so vocab 12 leaves room for that single merge;
        // one more entry adds (lo, w</w>) and "low" becomes one token.
        assert_eq!(m.encode(&["low"]).len(), 2);
        let m = train_bpe(&t, 13).unwrap();
        assert_eq!(m.merges()[1], ("lo".to_string(), "w</w>".to_string()));
        let ids = m.encode(&["low"]);
        assert_eq!(ids.len(), 1);
        assert_eq!(m.decode(&ids).unwrap(), vec!["low"]);
    }

    #[test]
    fn too_small_vocab_names_minimum() {
        let err = train_bpe(&texts(&["abc"]), 5).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("at least 7"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_text_and_out_of_range_id() {
        let m = train_bpe(&texts(&["learn to draw"]), 20).unwrap();
        assert!(m.encode::<&str>(&[]).is_empty());
        assert_eq!(
            m.decode(&m.encode(&["learn", "to", "draw"])).unwrap(),
            vec!["learn", "to", "draw"]
        );
        assert!(matches!(m.decode(&[99]), Err(Error::Range(_))));
    }

    #[test]
    fn unknown_symbols_map_to_unk() {
        let m = train_bpe(&texts(&["ab ba"]), 8).unwrap();
        assert_eq!(m.encode(&["az"]), vec![m.id("a").unwrap(), UNK]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = train_bpe(&texts(&["low low lower newest widest"]), 25).unwrap();
        let p = dir.path().join("bpe.json");
        m.save(&p).unwrap();
        let back = BpeModel::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode(&["lowest"]), m.encode(&["lowest"]));
    }

    fn covering_corpus() -> Vec<Vec<String>> {
        // Every letter appears both word-finally and word-internally.
        let letters: Vec<char> = ('a'..='h').collect();
        let mut words = Vec::new();
        for &a in &letters {
            for &b in &letters {
                words.push(format!("{a}{b}{a}"));
            }
        }
        vec![words]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_over_training_alphabet(text in proptest::collection::vec("[a-h]{1,9}", 0..6)) {
            use std::sync::OnceLock;
            static MODEL: OnceLock<BpeModel> = OnceLock::new();
            let m = MODEL.get_or_init(|| train_bpe(&covering_corpus(), 60).unwrap());
            let ids = m.encode(&text);
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(m.decode(&ids).unwrap(), text);
        }
    }
}
