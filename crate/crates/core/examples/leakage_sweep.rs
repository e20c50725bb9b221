//! Score eval summaries against a training pool, filter, and sweep thresholds.

use std::collections::HashMap;

use ssum::corpus::{generate_toy_corpus, ToyCorpusSpec};
use ssum::leakage::{compute_leakage, threshold_sweep, Entry, SweepMetric, DEFAULT_ALPHAS};

fn main() -> ssum::Result<()> {
    let c = generate_toy_corpus(&ToyCorpusSpec::default())?;
    let pool: Vec<Entry> = c.train.iter().map(|u| Entry::new(u.id.clone(), u.summary.clone())).collect();
    let eval: Vec<Entry> = c.eval.iter().map(|u| Entry::new(u.id.clone(), u.summary.clone())).collect();
    let scores = compute_leakage(&eval, &pool)?;
    let filtered = scores.filter(0.9)?;
    println!("alpha 0.9 removes {:?}", filtered.removed_ids);
    println!("planted:           {:?}", c.planted_dup_ids);

    // A system that copies the nearest training summary, and one that echoes the reference.
    let refs: HashMap<String, Vec<String>> = eval.iter().map(|e| (e.id.clone(), e.words.clone())).collect();
    let by_id: HashMap<&str, &Entry> = pool.iter().map(|e| (e.id.as_str(), e)).collect();
    let copier = scores
        .samples
        .iter()
        .map(|s| (s.id.clone(), by_id[s.nearest_id.as_str()].words.clone()))
        .collect();
    let systems = vec![("copier".to_string(), copier), ("oracle".to_string(), refs.clone())];
    for row in threshold_sweep(&scores, &refs, &systems, &DEFAULT_ALPHAS, SweepMetric::RougeL)? {
        println!("{:.1}\t{}\t{:?}\t{}", row.alpha, row.system, row.metric, row.n_kept);
    }
    Ok(())
}
