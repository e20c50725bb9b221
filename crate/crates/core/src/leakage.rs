//! Evaluation-set contamination: nearest-reference ROUGE-L scores, threshold
//! filtering and metric-versus-threshold sweeps.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{meteor_lite, rouge_l, rouge_n, score_corpus};

/// Default sweep grid.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];

/// An identified summary, already tokenized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub words: Vec<String>,
}

impl Entry {
    pub fn new(id: impl Into<String>, words: Vec<String>) -> Self {
        Entry { id: id.into(), words }
    }
}

/// Highest ROUGE-L F1 of `summary` against the pool and the id attaining it
/// (lexicographically smallest on ties).
pub fn leakage_score<S: AsRef<str>>(summary: &[S], pool: &[Entry]) -> Result<(f64, String)> {
    let mut best: Option<(f64, &str)> = None;
    for e in pool {
        let f = rouge_l(&e.words, summary).f1;
        let better = match best {
            None => true,
            Some((b, id)) => f > b || (f == b && e.id.as_str() < id),
        };
        if better {
            best = Some((f, &e.id));
        }
    }
    best.map(|(f, id)| (f, id.to_string()))
        .ok_or_else(|| Error::Data("leakage reference pool is empty".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLeakage {
    pub id: String,
    pub score: f64,
    pub nearest_id: String,
}

/// Per-sample scores, computed once and reused for every threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageScores {
    pub samples: Vec<SampleLeakage>,
}

pub fn compute_leakage(eval: &[Entry], pool: &[Entry]) -> Result<LeakageScores> {
    let samples = eval
        .iter()
        .map(|e| {
            let (score, nearest_id) = leakage_score(&e.words, pool)?;
            Ok(SampleLeakage {
                id: e.id.clone(),
                score,
                nearest_id,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LeakageScores { samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub alpha: f64,
    pub samples: Vec<SampleLeakage>,
    pub kept_ids: Vec<String>,
    pub removed_ids: Vec<String>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("threshold {alpha} outside [0, 1]")));
    }
    Ok(())
}

impl LeakageScores {
    /// Removes samples scoring strictly above `alpha`.
    pub fn filter(&self, alpha: f64) -> Result<LeakageReport> {
        check_alpha(alpha)?;
        let (kept, removed): (Vec<&SampleLeakage>, Vec<&SampleLeakage>) =
            self.samples.iter().partition(|s| s.score <= alpha);
        Ok(LeakageReport {
            alpha,
            samples: self.samples.clone(),
            kept_ids: kept.iter().map(|s| s.id.clone()).collect(),
            removed_ids: removed.iter().map(|s| s.id.clone()).collect(),
        })
    }

    /// Tab-separated `id, score, nearest_id`.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        writeln!(out, "id\tscore\tnearest_id").expect("write to vec");
        for s in &self.samples {
            writeln!(out, "{}\t{}\t{}", s.id, s.score, s.nearest_id).expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{}:{}: expected id, score, nearest_id", path.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let score: f64 = f[1].parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&score) {
                return Err(bad());
            }
            samples.push(SampleLeakage {
                id: f[0].to_string(),
                score,
                nearest_id: f[2].to_string(),
            });
        }
        Ok(LeakageScores { samples })
    }
}

pub fn filter_eval_set(eval: &[Entry], pool: &[Entry], alpha: f64) -> Result<LeakageReport> {
    check_alpha(alpha)?;
    compute_leakage(eval, pool)?.filter(alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMetric {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "meteor")]
    Meteor,
}

impl SweepMetric {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "rouge1" => Ok(SweepMetric::Rouge1),
            "rouge2" => Ok(SweepMetric::Rouge2),
            "rougeL" | "rougel" => Ok(SweepMetric::RougeL),
            "meteor" => Ok(SweepMetric::Meteor),
            other => Err(Error::Config(format!("unknown sweep metric {other:?}"))),
        }
    }

    /// Single-pair value of this metric (F1 for the ROUGE variants).
    pub fn pair<S: AsRef<str>, T: AsRef<str>>(self, reference: &[S], hyp: &[T]) -> f64 {
        match self {
            SweepMetric::Rouge1 => rouge_n(reference, hyp, 1).f1,
            SweepMetric::Rouge2 => rouge_n(reference, hyp, 2).f1,
            SweepMetric::RougeL => rouge_l(reference, hyp).f1,
            SweepMetric::Meteor => meteor_lite(reference, hyp),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub system: String,
    /// `None` when nothing survives the threshold.
    pub metric: Option<f64>,
    pub n_kept: usize,
}

/// Metric of each system on the kept subset at each threshold.
/// `references` and every system's outputs are keyed by eval id.
pub fn threshold_sweep(
    scores: &LeakageScores,
    references: &HashMap<String, Vec<String>>,
    systems: &[(String, HashMap<String, Vec<String>>)],
    alphas: &[f64],
    metric: SweepMetric,
) -> Result<Vec<SweepRow>> {
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep thresholds must be sorted ascending".into()));
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        let report = scores.filter(alpha)?;
        for (name, outputs) in systems {
            let mut pairs = Vec::with_capacity(report.kept_ids.len());
            for id in &report.kept_ids {
                let hyp = outputs
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("system {name} has no output for {id}")))?;
                let reference = references
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no reference summary for {id}")))?;
                pairs.push((reference.clone(), hyp.clone()));
            }
            let value = if pairs.is_empty() {
                None
            } else {
                let r = score_corpus(&pairs)?;
                Some(match metric {
                    SweepMetric::Rouge1 => r.rouge1.f1,
                    SweepMetric::Rouge2 => r.rouge2.f1,
                    SweepMetric::RougeL => r.rouge_l.f1,
                    SweepMetric::Meteor => r.meteor,
                })
            };
            rows.push(SweepRow {
                alpha,
                system: name.clone(),
                metric: value,
                n_kept: report.kept_ids.len(),
            });
        }
    }
    Ok(rows)
}

/// Tab-separated `alpha, system, metric, n_kept`; an empty kept set prints `NA`.
pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "alpha\tsystem\tmetric\tn_kept").expect("write to vec");
    for r in rows {
        let m = r.metric.map_or("NA".to_string(), |m| format!("{m:.6}"));
        writeln!(out, "{:.2}\t{}\t{}\t{}", r.alpha, r.system, m, r.n_kept).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::tokenize;
    use proptest::prelude::*;

    fn e(id: &str, text: &str) -> Entry {
        Entry::new(id, tokenize(text))
    }

    #[test]
    fn score_examples() {
        let pool = [e("p1", "a b c d")];
        let (s, id) = leakage_score(&tokenize("a b x y"), &pool).unwrap();
        assert_eq!((s, id.as_str()), (0.5, "p1"));
        let pool = [e("z", "a b c d"), e("b", "q r"), e("a", "a b c d")];
        let (s, id) = leakage_score(&tokenize("a b c d"), &pool).unwrap();
        assert_eq!((s, id.as_str()), (1.0, "a"));
        assert!(matches!(leakage_score(&tokenize("a"), &[]), Err(Error::Data(_))));
    }

    #[test]
    fn strict_threshold_and_full_column() {
        let pool = [e("p", "a b c d")];
        let eval = [e("e1", "a b c d"), e("e2", "a b x y"), e("e3", "q")];
        let r = filter_eval_set(&eval, &pool, 0.5).unwrap();
        assert_eq!(r.kept_ids, vec!["e2", "e3"]);
        assert_eq!(r.removed_ids, vec!["e1"]);
        assert_eq!(filter_eval_set(&eval, &pool, 1.0).unwrap().kept_ids.len(), 3);
        assert!(matches!(filter_eval_set(&eval, &pool, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn pool_containing_eval_scores_one() {
        let train = [e("t1", "a b c"), e("t2", "d e f")];
        let eval = [e("e1", "a b x"), e("e2", "q r s")];
        let mut pool = train.to_vec();
        pool.extend(eval.iter().cloned());
        let s = compute_leakage(&eval, &pool).unwrap();
        assert!(s.samples.iter().all(|x| x.score == 1.0));
        let s = compute_leakage(&eval, &train).unwrap();
        assert!(s.samples.iter().all(|x| x.score < 1.0));
    }

    #[test]
    fn sweep_table_and_missing_output() {
        let pool = [e("p", "a b c d")];
        let eval = [e("e1", "a b c d"), e("e2", "x y z w")];
        let scores = compute_leakage(&eval, &pool).unwrap();
        let refs: HashMap<String, Vec<String>> = eval.iter().map(|x| (x.id.clone(), x.words.clone())).collect();
        let sys = vec![("copy".to_string(), refs.clone())];
        let rows = threshold_sweep(&scores, &refs, &sys, &[0.0, 0.5, 1.0], SweepMetric::RougeL).unwrap();
        assert_eq!(rows.iter().map(|r| r.n_kept).collect::<Vec<_>>(), vec![1, 1, 2]);
        assert_eq!(rows[2].metric, Some(1.0));
        let empty = threshold_sweep(&LeakageScores { samples: vec![SampleLeakage { id: "e1".into(), score: 1.0, nearest_id: "p".into() }] }, &refs, &sys, &[0.5], SweepMetric::RougeL).unwrap();
        assert_eq!(empty[0].metric, None);
        let mut partial = refs.clone();
        partial.remove("e2");
        let err = threshold_sweep(&scores, &refs, &[("s".into(), partial)], &[1.0], SweepMetric::RougeL).unwrap_err();
        assert!(err.to_string().contains("e2"));
        assert!(threshold_sweep(&scores, &refs, &sys, &[1.0, 0.5], SweepMetric::RougeL).is_err());
    }

    #[test]
    fn scores_tsv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let pool = [e("p", "a b c d e f g")];
        let eval = [e("e1", "a b c x e f g"), e("e2", "z")];
        let s = compute_leakage(&eval, &pool).unwrap();
        s.write_tsv(&p).unwrap();
        assert_eq!(LeakageScores::read_tsv(&p).unwrap(), s);
        std::fs::write(&p, "id\tscore\tnearest_id\ne1\t1.5\tp\n").unwrap();
        assert!(matches!(LeakageScores::read_tsv(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn kept_counts_grow_with_alpha(
            pool in prop::collection::vec(prop::collection::vec(0u8..4, 1..6), 1..6),
            eval in prop::collection::vec(prop::collection::vec(0u8..4, 1..6), 1..8),
        ) {
            let words = |v: &Vec<u8>| v.iter().map(|c| format!("w{c}")).collect::<Vec<_>>();
            let pool: Vec<Entry> = pool.iter().enumerate().map(|(i, v)| Entry::new(format!("p{i}"), words(v))).collect();
            let eval: Vec<Entry> = eval.iter().enumerate().map(|(i, v)| Entry::new(format!("e{i}"), words(v))).collect();
            let scores = compute_leakage(&eval, &pool).unwrap();
            let mut prev = 0;
            for a in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9, 1.0] {
                let r = scores.filter(a).unwrap();
                prop_assert!(r.kept_ids.len() >= prev);
                prev = r.kept_ids.len();
                prop_assert_eq!(r.kept_ids.len() + r.removed_ids.len(), eval.len());
                for s in &scores.samples {
                    let recomputed = leakage_score(&eval.iter().find(|x| x.id == s.id).unwrap().words, &pool).unwrap().0;
                    prop_assert_eq!(recomputed, s.score);
                    prop_assert_eq!(r.kept_ids.contains(&s.id), s.score <= a);
                }
                prop_assert_eq!(&r, &filter_eval_set(&eval, &pool, a).unwrap());
            }
            prop_assert_eq!(prev, eval.len());
        }
    }
}
