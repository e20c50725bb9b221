//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{frame_target, Example, ForwardOptions, Model, ModelConfig, ModelInput, NormMode, PositionalMode};
use crate::corpus::bpe::SPECIALS;
use crate::corpus::FeatureMatrix;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub per_tensor: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            per_tensor: None,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and entry of the worst mismatch.
    pub worst: (String, usize),
}

/// Builds a randomly perturbed model and a two-item batch (speech and phonemes), then compares
/// analytic and numeric gradients for the selected entries.
pub fn gradcheck(config: &ModelConfig, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // Zero-initialized biases put ReLU inputs exactly on the kink.
    for p in &mut model.params {
        for x in p.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    let frames = rng.gen_range(9..14);
    let feats = FeatureMatrix::new(
        frames,
        config.input_dim,
        (0..frames * config.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let phones: Vec<u32> = (0..rng.gen_range(6..10))
        .map(|_| rng.gen_range(3..config.phoneme_inventory as u32))
        .collect();
    let target = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(2..5);
        let toks: Vec<u32> = (0..n)
            .map(|_| rng.gen_range(SPECIALS.len() as u32..config.vocab_size as u32))
            .collect();
        frame_target(&toks)
    };
    let t1 = target(&mut rng);
    let t2 = target(&mut rng);
    let batch = [
        Example {
            input: ModelInput::Speech(&feats),
            target: &t1,
        },
        Example {
            input: ModelInput::Phonemes(&phones),
            target: &t2,
        },
    ];
    let (_, grads) = model.loss_and_grads(&batch, ForwardOptions::default())?;

    let mut probe = model.clone();
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (String::new(), 0),
    };
    for (t, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let entries: Vec<usize> = match opts.per_tensor {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = probe.params[t].data()[j];
            probe.params[t].data_mut()[j] = orig + opts.eps;
            let up = probe.forward_loss(&batch)?.loss;
            probe.params[t].data_mut()[j] = orig - opts.eps;
            let down = probe.forward_loss(&batch)?.loss;
            probe.params[t].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = grad.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (model.layout.specs[t].name.clone(), j);
            }
        }
    }
    Ok(report)
}

/// One gradient check per positional mode, normalization mode and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub positional_mode: PositionalMode,
    pub norm_mode: NormMode,
    pub seed: u64,
    pub report: GradcheckReport,
}

pub fn gradcheck_suite(base: &ModelConfig, seeds: &[u64], opts: GradcheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for positional_mode in [PositionalMode::Learned, PositionalMode::AbsoluteSinusoidal] {
        for norm_mode in [NormMode::LayerNorm, NormMode::BatchNorm] {
            let cfg = ModelConfig {
                positional_mode,
                norm_mode,
                ..base.clone()
            };
            for &seed in seeds {
                out.push(SuiteEntry {
                    positional_mode,
                    norm_mode,
                    seed,
                    report: gradcheck(&cfg, seed, opts)?,
                });
            }
        }
    }
    Ok(out)
}
