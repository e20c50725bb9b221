//! Train a subword model on toy summaries and round-trip a sentence.

use ssum::corpus::{generate_toy_corpus, train_bpe, words, ToyCorpusSpec};

fn main() -> ssum::Result<()> {
    let c = generate_toy_corpus(&ToyCorpusSpec::default())?;
    let texts: Vec<Vec<String>> = c.train.iter().map(|u| u.summary.clone()).collect();
    let bpe = train_bpe(&texts, 120)?;
    println!("{} tokens, {} merges", bpe.vocab_size(), bpe.merges().len());

    let sentence = words("learn how to fold a shiny lantern");
    let ids = bpe.encode(&sentence);
    let pieces: Vec<&str> = ids.iter().map(|&i| bpe.token(i).unwrap_or("?")).collect();
    println!("{pieces:?}");
    assert_eq!(bpe.decode(&ids)?, sentence);
    Ok(())
}
