//! Encode speech and phonemes with one model and take a decoder step.

use ssum::corpus::bpe::SOS;
use ssum::corpus::FeatureMatrix;
use ssum::model::{count_parameters, Model, ModelConfig, ModelInput};

fn main() -> ssum::Result<()> {
    let cfg = ModelConfig::toy();
    let model = Model::new(cfg.clone(), 7)?;
    println!("toy model: {} parameters", model.param_count());
    println!("base model would have {}", count_parameters(&ModelConfig::base()).total());

    let frames = 48;
    let data: Vec<f32> = (0..frames * cfg.input_dim).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect();
    let feats = FeatureMatrix::new(frames, cfg.input_dim, data)?;
    let speech = model.encode_input(ModelInput::Speech(&feats))?;
    let phones = model.encode_input(ModelInput::Phonemes(&[5, 5, 9, 9, 9, 12, 4, 4]))?;
    println!("speech: {frames} frames -> {} encoder states", speech.valid_len());
    println!("phonemes: 8 ids -> {} encoder states", phones.valid_len());

    let step = model.decoder_step(&[SOS], &speech)?;
    let (best, p) = step
        .distribution
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    println!("first-token distribution sums to {:.6}; argmax {best} with p={p:.4}", step.distribution.iter().sum::<f64>());
    Ok(())
}
