//! Beam search over an untrained model, comparing widths.

use ssum::decode::{beam_search, BeamConfig};
use ssum::model::{Model, ModelConfig, ModelInput};

fn main() -> ssum::Result<()> {
    let model = Model::new(ModelConfig { vocab_size: 12, ..ModelConfig::tiny() }, 3)?;
    let enc = model.encode_input(ModelInput::Phonemes(&[4, 4, 7, 7, 7, 9, 20, 20]))?;
    for width in [1, 2, 4, 8] {
        let r = beam_search(&model, &enc, &BeamConfig { beam_width: width, max_len: 10, length_norm: false })?;
        println!(
            "width {width}: {:?} log p = {:.3} finished={} ({} hypotheses kept)",
            r.best.content(),
            r.best.log_prob,
            r.best.finished,
            r.n_best.len()
        );
    }
    Ok(())
}
