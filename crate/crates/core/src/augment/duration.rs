//! Per-phoneme duration statistics and stochastic phoneme repetition.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PhonemeInventory, PhonemeSequence, WORD_BOUNDARY};
use crate::error::{Error, Result};

pub const DEFAULT_MEAN: f64 = 8.0;
pub const DEFAULT_STD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DurationTable {
    /// `(mean, std)` frames per phoneme id.
    pub stats: Vec<(f64, f64)>,
    pub default: (f64, f64),
    /// Fixed run length for word boundaries; `None` samples them like any phoneme.
    pub boundary_frames: Option<usize>,
}

impl DurationTable {
    pub fn with_defaults(size: usize, mean: f64, std: f64) -> Self {
        DurationTable {
            stats: vec![(mean, std); size],
            default: (mean, std),
            boundary_frames: Some(1),
        }
    }

    pub fn get(&self, id: u32) -> (f64, f64) {
        self.stats.get(id as usize).copied().unwrap_or(self.default)
    }

    pub fn set(&mut self, id: u32, mean: f64, std: f64) {
        self.stats[id as usize] = (mean, std);
    }

    /// One `name TAB mean TAB std` line per phoneme.
    pub fn save(&self, path: impl AsRef<Path>, inv: &PhonemeInventory) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, (m, s)) in self.stats.iter().enumerate() {
            let name = inv.name(id as u32).unwrap_or("<unk>");
            out.push_str(&format!("{name}\t{m}\t{s}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Phonemes missing from the file keep the defaults.
    pub fn load(path: impl AsRef<Path>, inv: &PhonemeInventory) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = DurationTable::with_defaults(inv.size(), DEFAULT_MEAN, DEFAULT_STD);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{}:{}: expected name, mean, std", path.display(), i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, m, s] = fields[..] else { return Err(bad()) };
            let id = inv.id(name).ok_or_else(bad)?;
            let m: f64 = m.trim().parse().map_err(|_| bad())?;
            let s: f64 = s.trim().parse().map_err(|_| bad())?;
            if !(m > 0.0 && s >= 0.0) {
                return Err(Error::Data(format!(
                    "{}:{}: duration needs mean > 0 and std >= 0",
                    path.display(),
                    i + 1
                )));
            }
            table.set(id, m, s);
        }
        Ok(table)
    }
}

/// Sample mean and population std per phoneme; unseen phonemes get the defaults.
pub fn estimate_duration_table(
    aligned: &[(u32, usize)],
    inventory_size: usize,
    default: (f64, f64),
) -> Result<DurationTable> {
    let mut sum = vec![0.0; inventory_size];
    let mut sq = vec![0.0; inventory_size];
    let mut n = vec![0usize; inventory_size];
    for &(p, len) in aligned {
        if len == 0 {
            return Err(Error::Data(format!("phoneme {p} has a non-positive duration")));
        }
        let p = p as usize;
        if p >= inventory_size {
            return Err(Error::Range(format!(
                "phoneme id {p} outside inventory of {inventory_size}"
            )));
        }
        let x = len as f64;
        sum[p] += x;
        sq[p] += x * x;
        n[p] += 1;
    }
    let mut table = DurationTable::with_defaults(inventory_size, default.0, default.1);
    for p in 0..inventory_size {
        if n[p] > 0 {
            let k = n[p] as f64;
            let mean = sum[p] / k;
            let var = (sq[p] / k - mean * mean).max(0.0);
            table.stats[p] = (mean, var.sqrt());
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatedPhonemeSequence {
    pub ids: Vec<u32>,
    pub run_lengths: Vec<usize>,
}

/// Repeats each phoneme a number of times drawn from `N(mean, std)`, rounded and
/// clamped to at least one frame.
pub fn repeat_phonemes(seq: &PhonemeSequence, table: &DurationTable, seed: u64) -> RepeatedPhonemeSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RepeatedPhonemeSequence {
        ids: Vec::new(),
        run_lengths: Vec::with_capacity(seq.ids.len()),
    };
    for &p in &seq.ids {
        let run = match table.boundary_frames {
            Some(k) if p == WORD_BOUNDARY => k.max(1),
            _ => sample_run(table.get(p), &mut rng),
        };
        out.ids.extend(std::iter::repeat(p).take(run));
        out.run_lengths.push(run);
    }
    out
}

fn sample_run((mean, std): (f64, f64), rng: &mut ChaCha8Rng) -> usize {
    let x = if std > 0.0 {
        Normal::new(mean, std).expect("std is positive").sample(rng)
    } else {
        mean
    };
    x.round().max(1.0) as usize
}

/// Inverse of [`repeat_phonemes`] using the recorded run lengths.
pub fn collapse_runs(rep: &RepeatedPhonemeSequence) -> Vec<u32> {
    let mut out = Vec::with_capacity(rep.run_lengths.len());
    let mut pos = 0;
    for &len in &rep.run_lengths {
        out.push(rep.ids[pos]);
        pos += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(ids: Vec<u32>) -> PhonemeSequence {
        PhonemeSequence {
            ids,
            source_words: vec![],
            oov_flags: vec![],
        }
    }

    #[test]
    fn constant_phoneme_gives_zero_std() {
        let t = estimate_duration_table(&[(7, 5), (7, 5), (7, 5)], 42, (8.0, 2.0)).unwrap();
        assert_eq!(t.get(7), (5.0, 0.0));
        assert_eq!(t.get(9), (8.0, 2.0));
    }

    #[test]
    fn empty_corpus_gives_defaults() {
        let t = estimate_duration_table(&[], 42, (DEFAULT_MEAN, DEFAULT_STD)).unwrap();
        assert!(t.stats.iter().all(|&s| s == (8.0, 2.0)));
    }

    #[test]
    fn zero_length_is_data_error() {
        assert!(matches!(
            estimate_duration_table(&[(4, 0)], 42, (8.0, 2.0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn population_std_by_hand() {
        // lengths 2 and 4: mean 3, population std 1
        let t = estimate_duration_table(&[(5, 2), (5, 4)], 42, (8.0, 2.0)).unwrap();
        assert_eq!(t.get(5), (3.0, 1.0));
    }

    #[test]
    fn deterministic_runs_of_three() {
        let t = DurationTable::with_defaults(42, 3.0, 0.0);
        let r = repeat_phonemes(&seq(vec![10, 11, 12]), &t, 0);
        assert_eq!(r.ids, vec![10, 10, 10, 11, 11, 11, 12, 12, 12]);
        assert_eq!(r.run_lengths, vec![3, 3, 3]);
        assert!(repeat_phonemes(&seq(vec![]), &t, 0).ids.is_empty());
    }

    #[test]
    fn boundaries_stay_single() {
        let t = DurationTable::with_defaults(42, 3.0, 0.0);
        let r = repeat_phonemes(&seq(vec![10, WORD_BOUNDARY, 11]), &t, 0);
        assert_eq!(r.run_lengths, vec![3, 1, 3]);
        let mut sampled = t.clone();
        sampled.boundary_frames = None;
        assert_eq!(repeat_phonemes(&seq(vec![WORD_BOUNDARY]), &sampled, 0).run_lengths, vec![3]);
    }

    #[test]
    fn sample_mean_matches_distribution() {
        let t = DurationTable::with_defaults(42, 8.0, 1.0);
        let r = repeat_phonemes(&seq(vec![20; 10_000]), &t, 11);
        let mean = r.run_lengths.iter().sum::<usize>() as f64 / 10_000.0;
        assert!((7.9..=8.1).contains(&mean), "{mean}");
    }

    #[test]
    fn sigma_zero_table_is_recovered_exactly() {
        let mut truth = DurationTable::with_defaults(42, 8.0, 2.0);
        for p in 3..42u32 {
            truth.set(p, f64::from(p % 5 + 1), 0.0);
        }
        truth.boundary_frames = None;
        let s = seq((3..42).chain(3..42).collect());
        let r = repeat_phonemes(&s, &truth, 5);
        let aligned: Vec<(u32, usize)> = s.ids.iter().copied().zip(r.run_lengths).collect();
        let est = estimate_duration_table(&aligned, 42, (8.0, 2.0)).unwrap();
        assert_eq!(est.stats[3..], truth.stats[3..]);
    }

    #[test]
    fn tsv_round_trip() {
        let inv = PhonemeInventory::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dur.tsv");
        let mut t = DurationTable::with_defaults(42, 8.0, 2.0);
        t.set(inv.id("AA").unwrap(), 3.25, 0.5);
        t.save(&p, &inv).unwrap();
        assert_eq!(DurationTable::load(&p, &inv).unwrap(), t);
        fs::write(&p, "AA\t-1\t0\n").unwrap();
        assert!(matches!(DurationTable::load(&p, &inv), Err(Error::Data(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn collapse_inverts_repeat(ids in proptest::collection::vec(0u32..42, 0..40), seed in any::<u64>()) {
            let t = DurationTable::with_defaults(42, 2.0, 1.5);
            let s = seq(ids.clone());
            let r = repeat_phonemes(&s, &t, seed);
            prop_assert_eq!(r.ids.len(), r.run_lengths.iter().sum::<usize>());
            prop_assert!(r.run_lengths.iter().all(|&k| k >= 1));
            prop_assert_eq!(collapse_runs(&r), ids);
            prop_assert_eq!(repeat_phonemes(&s, &t, seed), r);
        }
    }
}
