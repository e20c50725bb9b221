//! ROUGE-N, ROUGE-L, METEOR-lite and WER, plus corpus-level reports.

mod porter;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use porter::porter_stem;

/// Lowercases, splits on whitespace and separates leading and trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let punct = |c: char| c.is_ascii_punctuation();
    for raw in text.split_whitespace() {
        let w = raw.to_lowercase();
        let rest = w.trim_start_matches(punct);
        let lead = &w[..w.len() - rest.len()];
        let core = rest.trim_end_matches(punct);
        let trail = &rest[core.len()..];
        out.extend(lead.chars().map(String::from));
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(trail.chars().map(String::from));
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(matched: usize, hyp_total: usize, ref_total: usize) -> Prf {
        let p = if hyp_total == 0 { 0.0 } else { matched as f64 / hyp_total as f64 };
        let r = if ref_total == 0 { 0.0 } else { matched as f64 / ref_total as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf {
            precision: p,
            recall: r,
            f1,
        }
    }
}

fn ngrams<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. `n` must be at least 1.
pub fn rouge_n<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T], n: usize) -> Prf {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let r = ngrams(reference, n);
    let h = ngrams(hyp, n);
    let matched: usize = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
    Prf::from_counts(matched, h.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T]) -> Prf {
    Prf::from_counts(lcs_len(reference, hyp), hyp.len(), reference.len())
}

/// Exact matches first, then Porter-stem matches, each aligning every hypothesis
/// word to the leftmost free reference word. Fmean weights recall 9:1; the
/// fragmentation penalty is `0.5 * (chunks / matches)^3`.
pub fn meteor_lite<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T]) -> f64 {
    let mut ref_used = vec![false; reference.len()];
    let mut align: Vec<Option<usize>> = vec![None; hyp.len()];
    let stages: [fn(&str) -> String; 2] = [|w| w.to_string(), porter_stem];
    for key in stages {
        let rk: Vec<String> = reference.iter().map(|w| key(w.as_ref())).collect();
        for (i, h) in hyp.iter().enumerate() {
            if align[i].is_some() {
                continue;
            }
            let hk = key(h.as_ref());
            if let Some(j) = (0..rk.len()).find(|&j| !ref_used[j] && rk[j] == hk) {
                ref_used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    let pairs: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (0.9 * p + 0.1 * r);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Minimal substitutions, deletions and insertions turning `reference` into `hyp`.
pub fn edit_distance<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut cur = vec![i + 1; hyp.len() + 1];
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r.as_ref() != h.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[hyp.len()]
}

pub fn wer<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hyp) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    pub meteor: f64,
    pub wer: f64,
    pub n_items: usize,
}

impl ScoreReport {
    /// Aligned table with F1 and recall columns, values in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", "metric", "P", "R", "F1");
        for (name, v) in [("ROUGE-1", self.rouge1), ("ROUGE-2", self.rouge2), ("ROUGE-L", self.rouge_l)] {
            let _ = writeln!(
                s,
                "{:<8} {:>8.2} {:>8.2} {:>8.2}",
                name,
                100.0 * v.precision,
                100.0 * v.recall,
                100.0 * v.f1
            );
        }
        let _ = writeln!(s, "{:<8} {:>26.2}", "METEOR", 100.0 * self.meteor);
        let _ = writeln!(s, "{:<8} {:>26.2}", "WER", 100.0 * self.wer);
        let _ = writeln!(s, "{:<8} {:>26}", "items", self.n_items);
        s
    }
}

fn mean_prf(v: &[Prf]) -> Prf {
    let n = v.len() as f64;
    Prf {
        precision: v.iter().map(|x| x.precision).sum::<f64>() / n,
        recall: v.iter().map(|x| x.recall).sum::<f64>() / n,
        f1: v.iter().map(|x| x.f1).sum::<f64>() / n,
    }
}

/// Unweighted means of per-pair scores; WER pools errors over all reference words.
pub fn score_corpus<S: AsRef<str>, T: AsRef<str>>(pairs: &[(Vec<S>, Vec<T>)]) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to score".into()));
    }
    let (mut r1, mut r2, mut rl, mut met) = (Vec::new(), Vec::new(), Vec::new(), 0.0);
    let (mut errors, mut ref_words) = (0usize, 0usize);
    for (r, h) in pairs {
        r1.push(rouge_n(r, h, 1));
        r2.push(rouge_n(r, h, 2));
        rl.push(rouge_l(r, h));
        met += meteor_lite(r, h);
        errors += edit_distance(r, h);
        ref_words += r.len();
    }
    if ref_words == 0 {
        return Err(Error::Data("all references are empty".into()));
    }
    Ok(ScoreReport {
        rouge1: mean_prf(&r1),
        rouge2: mean_prf(&r2),
        rouge_l: mean_prf(&rl),
        meteor: met / pairs.len() as f64,
        wer: errors as f64 / ref_words as f64,
        n_items: pairs.len(),
    })
}

/// Tokenizes both sides with [`tokenize`] before scoring.
pub fn score_texts(pairs: &[(&str, &str)]) -> Result<ScoreReport> {
    let toks: Vec<(Vec<String>, Vec<String>)> = pairs.iter().map(|(r, h)| (tokenize(r), tokenize(h))).collect();
    score_corpus(&toks)
}
