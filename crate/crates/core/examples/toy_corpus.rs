//! Generate the synthetic corpus and print a few utterances.
//!
//! cargo run --example toy_corpus -- [out_dir]

use ssum::corpus::{generate_toy_corpus, join_words, ToyCorpusSpec};

fn main() -> ssum::Result<()> {
    let c = generate_toy_corpus(&ToyCorpusSpec::default())?;
    println!(
        "{} train / {} valid / {} eval / {} external pairs, {} words",
        c.train.len(),
        c.valid.len(),
        c.eval.len(),
        c.external.len(),
        c.vocabulary().len()
    );
    for u in c.train.iter().take(3) {
        println!("{} [{} frames]", u.id, u.num_frames());
        println!("  transcript: {}", join_words(&u.transcript));
        println!("  summary:    {}", join_words(&u.summary));
    }
    println!("planted near-duplicates: {:?}", c.planted_dup_ids);
    if let Some(dir) = std::env::args().nth(1) {
        c.write(dir.as_ref())?;
        println!("written to {dir}");
    }
    Ok(())
}
