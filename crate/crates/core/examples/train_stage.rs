//! Train the speech recognition stage briefly on a small toy corpus.

use ssum::corpus::{generate_toy_corpus, normalize_utterances, train_bpe, CmvnStats, Role, ToyCorpusSpec};
use ssum::model::{Model, ModelConfig};
use ssum::training::{train_stage, StageConfig, StageData};

fn main() -> ssum::Result<()> {
    let spec = ToyCorpusSpec { n_train: 200, n_valid: 20, n_eval: 20, n_external: 20, ..Default::default() };
    let c = generate_toy_corpus(&spec)?;
    let mut train: Vec<_> = c.train.iter().map(|u| u.with_role(Role::Asr)).collect();
    let mut valid: Vec<_> = c.valid.iter().map(|u| u.with_role(Role::Asr)).collect();
    let stats = CmvnStats::from_matrices(train.iter().filter_map(|u| u.features()))?;
    normalize_utterances(&mut train, &stats)?;
    normalize_utterances(&mut valid, &stats)?;
    let texts: Vec<Vec<String>> = train.iter().map(|u| u.transcript.clone()).collect();
    let bpe = train_bpe(&texts, 100)?;

    let model = Model::new(ModelConfig { vocab_size: bpe.vocab_size(), ..ModelConfig::toy() }, 1)?;
    let stage = StageConfig { max_epochs: 3, ..StageConfig::asr_toy() };
    let mut log = Vec::new();
    let out = train_stage(model, None, &stage, &StageData { train: &train, valid: &valid, bpe: &bpe }, Some(&mut log))?;
    print!("{}", String::from_utf8_lossy(&log));
    println!("best epoch {} with validation accuracy {:.3}", out.best.epoch, out.best.validation_accuracy);
    Ok(())
}
