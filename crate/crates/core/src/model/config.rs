use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Conv2dGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    Learned,
    AbsoluteSinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    LayerNorm,
    BatchNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_ff: usize,
    pub dec_ff: usize,
    pub enc_heads: usize,
    pub dec_heads: usize,
    pub conv_kernel: usize,
    pub subsample_rate: usize,
    pub vocab_size: usize,
    pub phoneme_inventory: usize,
    pub positional_mode: PositionalMode,
    pub norm_mode: NormMode,
    pub max_target_len: usize,
    /// Feature dimension of speech input.
    pub input_dim: usize,
    /// Output channels of the four pre-encoder convolutions.
    pub cnn_channels: [usize; 4],
    pub phoneme_embed_dim: usize,
    /// Hidden units per direction of the phoneme BiLSTM.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 512-dim model: 12 Conformer blocks, 6 decoder blocks with 4 heads.
    pub fn base() -> Self {
        ModelConfig {
            embed_dim: 512,
            enc_layers: 12,
            dec_layers: 6,
            enc_ff: 2048,
            dec_ff: 2048,
            enc_heads: 8,
            dec_heads: 4,
            conv_kernel: 31,
            subsample_rate: 4,
            vocab_size: 1000,
            phoneme_inventory: 42,
            positional_mode: PositionalMode::Learned,
            norm_mode: NormMode::LayerNorm,
            max_target_len: 256,
            input_dim: 40,
            cnn_channels: [32, 32, 64, 64],
            phoneme_embed_dim: 256,
            lstm_hidden: 256,
            lstm_layers: 3,
            dropout: 0.1,
        }
    }

    /// 768-dim model with a 3072-unit, 12-head decoder.
    pub fn large() -> Self {
        ModelConfig {
            embed_dim: 768,
            dec_ff: 3072,
            dec_heads: 12,
            ..Self::base()
        }
    }

    /// Desk-scale model for the synthetic corpus.
    pub fn toy() -> Self {
        ModelConfig {
            embed_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            enc_ff: 128,
            dec_ff: 128,
            enc_heads: 4,
            dec_heads: 4,
            conv_kernel: 7,
            subsample_rate: 4,
            vocab_size: 120,
            phoneme_inventory: 42,
            positional_mode: PositionalMode::Learned,
            norm_mode: NormMode::LayerNorm,
            max_target_len: 64,
            input_dim: 20,
            cnn_channels: [4, 4, 8, 8],
            phoneme_embed_dim: 32,
            lstm_hidden: 32,
            lstm_layers: 3,
            dropout: 0.0,
        }
    }

    /// Smallest configuration exercising every component; used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            enc_ff: 12,
            dec_ff: 12,
            enc_heads: 2,
            dec_heads: 2,
            conv_kernel: 3,
            subsample_rate: 4,
            vocab_size: 11,
            phoneme_inventory: 42,
            positional_mode: PositionalMode::Learned,
            norm_mode: NormMode::LayerNorm,
            max_target_len: 16,
            input_dim: 5,
            cnn_channels: [2, 2, 2, 2],
            phoneme_embed_dim: 4,
            lstm_hidden: 3,
            lstm_layers: 3,
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected base, large, toy or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        for (name, h) in [("enc_heads", self.enc_heads), ("dec_heads", self.dec_heads)] {
            if h == 0 || self.embed_dim % h != 0 {
                return fail(format!("embed_dim {} is not divisible by {name} {h}", self.embed_dim));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if ![1, 2, 4].contains(&self.subsample_rate) {
            return fail(format!(
                "subsample_rate {} unsupported (1, 2 or 4)",
                self.subsample_rate
            ));
        }
        if self.embed_dim % 2 != 0 {
            return fail("embed_dim must be even for sinusoidal tables".into());
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must cover the four special tokens".into());
        }
        if self.phoneme_inventory < 3 {
            return fail("phoneme_inventory too small".into());
        }
        if self.max_target_len == 0 {
            return fail("max_target_len must be positive".into());
        }
        if self.input_dim == 0 || self.cnn_channels.contains(&0) {
            return fail("input_dim and cnn_channels must be positive".into());
        }
        if [self.enc_ff, self.dec_ff, self.phoneme_embed_dim, self.lstm_hidden, self.lstm_layers].contains(&0) {
            return fail("layer widths and lstm_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Strides of the four convolutions (each stride-2 layer halves time and frequency).
    pub fn cnn_strides(&self) -> [usize; 4] {
        match self.subsample_rate {
            1 => [1, 1, 1, 1],
            2 => [2, 1, 1, 1],
            _ => [2, 1, 2, 1],
        }
    }

    /// Convolution geometry for an input of `in_freq` bins.
    pub fn cnn_geoms(&self, in_freq: usize) -> [Conv2dGeom; 4] {
        let strides = self.cnn_strides();
        let mut freq = in_freq;
        let mut in_ch = 1;
        let mut out = [Conv2dGeom {
            in_ch: 1,
            in_freq,
            out_ch: 1,
            stride: 1,
        }; 4];
        for i in 0..4 {
            out[i] = Conv2dGeom {
                in_ch,
                in_freq: freq,
                out_ch: self.cnn_channels[i],
                stride: strides[i],
            };
            freq = out[i].out_freq();
            in_ch = self.cnn_channels[i];
        }
        out
    }

    /// Encoder length for `frames` input frames: `ceil(frames / rate)`.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        self.cnn_strides()
            .iter()
            .fold(frames, |n, &s| Conv2dGeom::out_len(n, s))
    }
}

/// Parameter counts per component, computed from the configuration alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub speech_preencoder: usize,
    pub phoneme_preencoder: usize,
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.speech_preencoder + self.phoneme_preencoder + self.encoder + self.decoder
    }

    /// Everything used at inference on speech.
    pub fn speech_model(&self) -> usize {
        self.total() - self.phoneme_preencoder
    }
}

fn conv_stack_count(cfg: &ModelConfig, in_freq: usize) -> usize {
    let strides = cfg.cnn_strides();
    let (mut c_in, mut f) = (1, in_freq);
    let mut n = 0;
    for (c, s) in cfg.cnn_channels.iter().zip(strides) {
        n += c * c_in * 9 + c;
        c_in = *c;
        f = if s == 1 { f } else { (f + s - 1) / s };
    }
    n + c_in * f * cfg.embed_dim + cfg.embed_dim
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.embed_dim;
    let h = cfg.lstm_hidden;
    let ln = 2 * d;
    let linear = |i: usize, o: usize| i * o + o;

    let mut lstm = 0;
    for l in 0..cfg.lstm_layers {
        let input = if l == 0 { cfg.phoneme_embed_dim } else { 2 * h };
        lstm += 2 * (linear(input, 4 * h) + h * 4 * h);
    }
    let phoneme = cfg.phoneme_inventory * cfg.phoneme_embed_dim + lstm + 2 * (2 * h) + conv_stack_count(cfg, 2 * h);

    let ff_enc = ln + linear(d, cfg.enc_ff) + linear(cfg.enc_ff, d);
    let mhsa = ln + 4 * linear(d, d) + d * d + 2 * d;
    let conv = ln + linear(d, 2 * d) + cfg.conv_kernel * d + d + 2 * d + linear(d, d);
    let enc_block = 2 * ff_enc + mhsa + conv + ln;

    let dec_block = 3 * ln + 8 * linear(d, d) + linear(d, cfg.dec_ff) + linear(cfg.dec_ff, d);
    let lpe = match cfg.positional_mode {
        PositionalMode::Learned => cfg.max_target_len * d,
        PositionalMode::AbsoluteSinusoidal => 0,
    };
    let decoder = cfg.vocab_size * d + lpe + cfg.dec_layers * dec_block + ln + linear(d, cfg.vocab_size);

    ParamCount {
        speech_preencoder: conv_stack_count(cfg, cfg.input_dim),
        phoneme_preencoder: phoneme,
        encoder: cfg.enc_layers * enc_block,
        decoder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_preset_matches_reported_shape_and_size() {
        let c = ModelConfig::large();
        assert_eq!((c.embed_dim, c.enc_layers, c.dec_layers, c.dec_ff, c.dec_heads), (768, 12, 6, 3072, 12));
        let n = count_parameters(&c).speech_model() as f64;
        assert!((n - 203e6).abs() / 203e6 <= 0.10, "{n}");
    }

    #[test]
    fn subsampled_lengths() {
        let c = ModelConfig::toy();
        assert_eq!(c.subsampled_len(40), 10);
        assert_eq!(c.subsampled_len(4), 1);
        for t in 4..=64 {
            assert_eq!(c.subsampled_len(t), t.div_ceil(4));
        }
        let c2 = ModelConfig {
            subsample_rate: 2,
            ..c
        };
        assert_eq!(c2.subsampled_len(9), 5);
    }

    #[test]
    fn validation_rejects_bad_heads_and_kernel() {
        let mut c = ModelConfig::tiny();
        c.enc_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.subsample_rate = 3;
        assert!(c.validate().is_err());
        for name in ["base", "large", "toy", "tiny"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }
}
