//! ROUGE, METEOR and WER on a handful of pairs.

use ssum::eval::{meteor_lite, rouge_l, rouge_n, score_texts, tokenize, wer};

fn main() -> ssum::Result<()> {
    let reference = tokenize("learn how to fold a red hat in the kitchen");
    let hyp = tokenize("learn to fold the red hats in a kitchen");
    println!("ROUGE-1 {:?}", rouge_n(&reference, &hyp, 1));
    println!("ROUGE-2 {:?}", rouge_n(&reference, &hyp, 2));
    println!("ROUGE-L {:?}", rouge_l(&reference, &hyp));
    println!("METEOR  {:.4}", meteor_lite(&reference, &hyp));
    println!("WER     {:.4}", wer(&reference, &hyp)?);

    let report = score_texts(&[
        ("learn how to fold a red hat", "learn how to fold a red hat"),
        ("learn how to paint a cup", "learn to paint cups"),
    ])?;
    print!("{}", report.table());
    Ok(())
}
