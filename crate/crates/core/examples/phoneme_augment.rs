//! Turn external text pairs into phoneme-modality training utterances.

use ssum::augment::{build_augmented_set, estimate_duration_table, g2p, repeat_phonemes, PhonemeInventory};
use ssum::corpus::{generate_toy_corpus, join_words, ToyCorpusSpec};

fn main() -> ssum::Result<()> {
    let c = generate_toy_corpus(&ToyCorpusSpec::default())?;
    let inv = PhonemeInventory::default();
    let table = estimate_duration_table(&c.alignments, inv.size(), (8.0, 2.0))?;

    let pair = &c.external[0];
    let seq = g2p(&c.lexicon, &inv, &pair.document)?;
    let rep = repeat_phonemes(&seq, &table, 11);
    let names: Vec<&str> = seq.ids.iter().map(|&i| inv.name(i).unwrap_or("?")).collect();
    println!("{}", join_words(&pair.document));
    println!("  {} phonemes: {}", seq.ids.len(), names.join(" "));
    println!("  {} frames after duration sampling", rep.ids.len());

    let set = build_augmented_set(&c.external, &c.lexicon, &inv, &table, 11)?;
    let frames: usize = set.utterances.iter().map(|u| u.num_frames()).sum();
    println!("{} utterances, {} frames total", set.utterances.len(), frames);
    Ok(())
}
