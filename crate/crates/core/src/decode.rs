//! Beam search over the decoder.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::bpe::{EOS, PAD, SOS};
use crate::corpus::{join_words, BpeModel, Utterance};
use crate::error::{Error, Result};
use crate::model::{Encoding, Model, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with sos; ends with eos when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without sos and eos.
    pub fn content(&self) -> &[u32] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / (self.tokens.len() - 1).max(1) as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Rank final hypotheses by log-probability per token.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 4,
            max_len: 64,
            length_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished hypotheses by score, then any still running at `max_len`.
    pub n_best: Vec<Hypothesis>,
}

/// Expands every running hypothesis by every token except pad and sos, keeps the
/// `beam_width` best (ties to the smaller token id, then the older hypothesis) and
/// retires those ending in eos.
pub fn beam_search(model: &Model, enc: &Encoding, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.beam_width < 1 {
        return Err(Error::Config("beam_width must be at least 1".into()));
    }
    if cfg.max_len == 0 || cfg.max_len > model.config.max_target_len {
        return Err(Error::Config(format!(
            "max_len {} must lie in 1..={}",
            cfg.max_len, model.config.max_target_len
        )));
    }
    let mut running = vec![Hypothesis {
        tokens: vec![SOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if running.is_empty() {
            break;
        }
        let prefixes: Vec<&[u32]> = running.iter().map(|h| h.tokens.as_slice()).collect();
        let steps = model.decoder_steps(&prefixes, enc)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(running.len() * model.config.vocab_size);
        for (h, (hyp, step)) in running.iter().zip(&steps).enumerate() {
            for (tok, &p) in step.distribution.iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD || tok == SOS {
                    continue;
                }
                cands.push((hyp.log_prob + p.ln(), h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.beam_width);
        let mut next = Vec::with_capacity(cands.len());
        for (score, h, tok) in cands {
            let mut tokens = running[h].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                finished: tok == EOS,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        running = next;
    }
    let by_score = |a: &Hypothesis, b: &Hypothesis| b.score(cfg.length_norm).total_cmp(&a.score(cfg.length_norm));
    finished.sort_by(by_score);
    running.sort_by(by_score);
    let best = finished.first().or(running.first()).cloned().expect("beam never empties without finishing");
    finished.extend(running);
    Ok(BeamResult { best, n_best: finished })
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRecord {
    pub id: String,
    pub text: String,
    pub log_prob: f64,
    pub finished: bool,
}

pub fn hypothesis_text(bpe: &BpeModel, hyp: &Hypothesis) -> Result<String> {
    Ok(join_words(&bpe.decode(hyp.content())?))
}

/// Encodes and beam-decodes every utterance in order.
pub fn decode_utterances(model: &Model, bpe: &BpeModel, utts: &[Utterance], cfg: &BeamConfig) -> Result<Vec<DecodeRecord>> {
    utts.iter()
        .map(|u| {
            let enc = model.encode_input(ModelInput::from(u))?;
            let r = beam_search(model, &enc, cfg)?;
            Ok(DecodeRecord {
                id: u.id.clone(),
                text: hypothesis_text(bpe, &r.best)?,
                log_prob: r.best.log_prob,
                finished: r.best.finished,
            })
        })
        .collect()
}

/// Tab-separated `id, text, log_prob, finished`.
pub fn write_decodes(path: impl AsRef<Path>, records: &[DecodeRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}\t{}\t{:.6}\t{}", r.id, r.text, r.log_prob, r.finished).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_decodes(path: impl AsRef<Path>) -> Result<Vec<DecodeRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("{}:{}: expected id, text, log_prob, finished", path.display(), n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(DecodeRecord {
                id: f[0].to_string(),
                text: f[1].to_string(),
                log_prob: f[2].parse().map_err(|_| bad())?,
                finished: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
