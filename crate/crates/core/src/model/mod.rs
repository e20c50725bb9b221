//! Attentional encoder-decoder: speech and phoneme pre-encoders, Conformer
//! encoder with relative-position self-attention, Transformer decoder.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::bpe::{EOS, PAD, SOS};
use crate::corpus::{FeatureMatrix, Utterance, UtteranceInput};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Conv2dGeom, Graph, Var};
use crate::tensor::Mat;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use gradcheck::{gradcheck, gradcheck_suite, GradcheckOptions, GradcheckReport, SuiteEntry};
pub use config::{count_parameters, ModelConfig, NormMode, ParamCount, PositionalMode};
pub use params::Layout;
use params::{Attention, ConvStack, DecoderBlock, EncoderBlock, Linear, Norm};

/// Pre-encoder output: `[L x d]` states, `mask[i]` true for positions derived from real input.
#[derive(Clone, Debug, PartialEq)]
pub struct PreEncoding {
    pub states: Mat,
    pub mask: Vec<bool>,
}

impl PreEncoding {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub states: Mat,
    pub mask: Vec<bool>,
}

impl Encoding {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    pub hidden: Vec<f64>,
    pub distribution: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Speech(&'a FeatureMatrix),
    Phonemes(&'a [u32]),
}

impl<'a> From<&'a Utterance> for ModelInput<'a> {
    fn from(u: &'a Utterance) -> Self {
        match &u.input {
            UtteranceInput::Speech(f) => ModelInput::Speech(f),
            UtteranceInput::Phonemes(ids) => ModelInput::Phonemes(ids),
        }
    }
}

/// One training pair. `target` is framed as `sos, tokens.., eos` and may carry
/// trailing `pad`s, which are ignored.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input: ModelInput<'a>,
    pub target: &'a [u32],
}

/// `sos + tokens + eos`.
pub fn frame_target(tokens: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(SOS);
    out.extend_from_slice(tokens);
    out.push(EOS);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    /// Mean cross-entropy per non-pad target token.
    pub loss: f64,
    pub token_accuracy: f64,
    pub n_tokens: usize,
    pub n_correct: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Mat>,
}

/// Sinusoidal rows for the given (possibly negative) positions.
pub fn sinusoid_table(positions: impl Iterator<Item = f64>, d: usize) -> Mat {
    let rows: Vec<Vec<f64>> = positions
        .map(|p| {
            let mut row = vec![0.0; d];
            for i in 0..d / 2 {
                let freq = (10000f64).powf(-2.0 * i as f64 / d as f64);
                row[2 * i] = (p * freq).sin();
                row[2 * i + 1] = (p * freq).cos();
            }
            row
        })
        .collect();
    if rows.is_empty() {
        Mat::zeros(0, d)
    } else {
        Mat::from_rows(&rows)
    }
}

/// Forward-pass builder on one tape.
pub(crate) struct Fwd<'m> {
    pub g: Graph<'m>,
    model: &'m Model,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'m> Fwd<'m> {
    pub fn new(model: &'m Model, track: bool, opts: ForwardOptions) -> Self {
        Fwd {
            g: if track {
                Graph::new(&model.params)
            } else {
                Graph::inference(&model.params)
            },
            model,
            dropout: opts.dropout,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        }
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn lay(&self) -> &'m Layout {
        &self.model.layout
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.g.param(l.w);
        let b = self.g.param(l.b);
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn layer_norm(&mut self, x: Var, n: Norm) -> Var {
        let (gain, bias) = (self.g.param(n.gain), self.g.param(n.bias));
        self.g.layer_norm(x, gain, bias)
    }

    fn drop(&mut self, x: Var) -> Var {
        if self.dropout <= 0.0 {
            return x;
        }
        let (r, c) = self.g.value(x).shape();
        let keep = 1.0 - self.dropout;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.g.constant(Mat::from_vec(r, c, mask));
        self.g.mul(x, m)
    }

    /// Four masked conv layers and the projection to `d`. Returns `(states, valid rows)`.
    fn conv_stack(&mut self, x: Var, valid: usize, stack: &ConvStack) -> (Var, usize) {
        let mut x = x;
        let mut valid = valid;
        for conv in &stack.convs {
            let (w, b) = (self.g.param(conv.w), self.g.param(conv.b));
            let y = self.g.conv2d(x, w, b, conv.geom);
            let y = self.g.relu(y);
            valid = Conv2dGeom::out_len(valid, conv.geom.stride);
            x = self.g.mask_rows(y, valid);
        }
        let y = self.linear(x, stack.proj);
        (self.g.mask_rows(y, valid), valid)
    }

    pub fn speech_preencode(&mut self, feats: Var, valid_frames: usize) -> (Var, usize) {
        let stack = &self.lay().speech;
        let x = self.g.mask_rows(feats, valid_frames);
        self.conv_stack(x, valid_frames, stack)
    }

    pub fn phoneme_preencode(&mut self, ids: &[u32]) -> (Var, usize) {
        let lay = &self.lay().phoneme;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = self.g.param(lay.embedding);
        let mut x = self.g.gather(table, &idx);
        for layer in &lay.lstm {
            let mut outs = [x; 2];
            for (dir, out) in layer.iter().zip(outs.iter_mut()) {
                let xp = self.linear(x, dir.input);
                let u = self.g.param(dir.recurrent);
                *out = self.g.lstm(xp, u, std::ptr::eq(dir, &layer[1]));
            }
            x = self.g.concat_cols(&outs);
        }
        let x = self.layer_norm(x, lay.norm);
        self.conv_stack(x, ids.len(), &lay.stack)
    }

    fn feed_forward(&mut self, x: Var, ff: params::FeedForward) -> Var {
        let h = self.layer_norm(x, ff.norm);
        let h = self.linear(h, ff.l1);
        let h = self.g.swish(h);
        let h = self.linear(h, ff.l2);
        self.drop(h)
    }

    fn heads(&mut self, q: Var, k: Var, v: Var, n_heads: usize, mask: AttnMask, rel: Option<(Var, Var)>) -> Var {
        let d = self.g.value(q).cols();
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut ctx = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let kh = self.g.slice_cols(k, h * dk, dk);
            let vh = self.g.slice_cols(v, h * dk, dk);
            let scores = match rel {
                None => {
                    let qh = self.g.slice_cols(q, h * dk, dk);
                    self.g.matmul_nt(qh, kh)
                }
                Some((qv, p)) => {
                    let qh = self.g.slice_cols(q, h * dk, dk);
                    let ac = self.g.matmul_nt(qh, kh);
                    let qvh = self.g.slice_cols(qv, h * dk, dk);
                    let ph = self.g.slice_cols(p, h * dk, dk);
                    let bd = self.g.matmul_nt(qvh, ph);
                    let bd = self.g.rel_shift(bd);
                    self.g.add(ac, bd)
                }
            };
            let scores = self.g.scale(scores, scale);
            let att = self.g.softmax(scores, mask);
            ctx.push(self.g.matmul(att, vh));
        }
        if ctx.len() == 1 {
            ctx[0]
        } else {
            self.g.concat_cols(&ctx)
        }
    }

    fn rel_self_attention(&mut self, x: Var, m: params::RelSelfAttention) -> Var {
        let n = self.g.value(x).rows();
        let d = self.cfg().embed_dim;
        let h = self.layer_norm(x, m.norm);
        let q = self.linear(h, m.attn.q);
        let k = self.linear(h, m.attn.k);
        let v = self.linear(h, m.attn.v);
        let offsets = (0..2 * n - 1).map(|i| (n as f64 - 1.0) - i as f64);
        let r = self.g.constant(sinusoid_table(offsets, d));
        let wp = self.g.param(m.pos);
        let p = self.g.matmul(r, wp);
        let (bu, bv) = (self.g.param(m.bias_u), self.g.param(m.bias_v));
        let qu = self.g.add_row(q, bu);
        let qv = self.g.add_row(q, bv);
        let ctx = self.heads(qu, k, v, self.cfg().enc_heads, AttnMask::None, Some((qv, p)));
        let out = self.linear(ctx, m.attn.o);
        self.drop(out)
    }

    /// Encoder over items whose states hold only valid rows. In batch-norm mode the
    /// convolution module normalizes over all frames of all items together.
    pub fn encode_batch(&mut self, items: &[Var]) -> Vec<Var> {
        let mut xs = items.to_vec();
        let blocks: &'m [EncoderBlock] = &self.lay().encoder;
        for blk in blocks {
            let mut inner = Vec::with_capacity(xs.len());
            for x in xs.iter_mut() {
                let f = self.feed_forward(*x, blk.ff1);
                let f = self.g.scale(f, 0.5);
                *x = self.g.add(*x, f);
                let a = self.rel_self_attention(*x, blk.mhsa);
                *x = self.g.add(*x, a);
                let c = &blk.conv;
                let h = self.layer_norm(*x, c.norm);
                let h = self.linear(h, c.pointwise1);
                let h = self.g.glu(h);
                let (w, b) = (self.g.param(c.depthwise_w), self.g.param(c.depthwise_b));
                inner.push(self.g.depthwise_conv(h, w, b));
            }
            let normed: Vec<Var> = match self.cfg().norm_mode {
                NormMode::LayerNorm => inner
                    .iter()
                    .map(|&h| self.layer_norm(h, blk.conv.inner_norm))
                    .collect(),
                NormMode::BatchNorm => {
                    let lens: Vec<usize> = inner.iter().map(|&h| self.g.value(h).rows()).collect();
                    let all = self.g.concat_rows(&inner);
                    let (gain, bias) = (self.g.param(blk.conv.inner_norm.gain), self.g.param(blk.conv.inner_norm.bias));
                    let bn = self.g.batch_norm(all, gain, bias);
                    let mut start = 0;
                    lens.iter()
                        .map(|&n| {
                            let s = self.g.slice_rows(bn, start, n);
                            start += n;
                            s
                        })
                        .collect()
                }
            };
            for (x, h) in xs.iter_mut().zip(normed) {
                let h = self.g.swish(h);
                let h = self.linear(h, blk.conv.pointwise2);
                let h = self.drop(h);
                *x = self.g.add(*x, h);
                let f = self.feed_forward(*x, blk.ff2);
                let f = self.g.scale(f, 0.5);
                *x = self.g.add(*x, f);
                *x = self.layer_norm(*x, blk.final_norm);
            }
        }
        xs
    }

    fn attention(&mut self, x: Var, mem: Var, a: Attention, mask: AttnMask) -> Var {
        let q = self.linear(x, a.q);
        let k = self.linear(mem, a.k);
        let v = self.linear(mem, a.v);
        let ctx = self.heads(q, k, v, self.cfg().dec_heads, mask, None);
        let out = self.linear(ctx, a.o);
        self.drop(out)
    }

    /// Decoder hidden states (after the final norm) for every input position.
    pub fn decode_states(&mut self, enc: Var, tokens: &[u32]) -> Result<Var> {
        let cfg = self.cfg();
        if tokens.len() > cfg.max_target_len {
            return Err(Error::Range(format!(
                "decoder input of {} tokens exceeds max_target_len {}",
                tokens.len(),
                cfg.max_target_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Range(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let lay = &self.lay().decoder;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = self.g.param(lay.embedding);
        let e = self.g.gather(emb, &ids);
        let pos = match lay.lpe {
            Some(lpe) => {
                let table = self.g.param(lpe);
                let positions: Vec<usize> = (0..ids.len()).collect();
                self.g.gather(table, &positions)
            }
            None => self
                .g
                .constant(sinusoid_table((0..ids.len()).map(|p| p as f64), cfg.embed_dim)),
        };
        let x0 = self.g.add(e, pos);
        let mut x = self.drop(x0);
        let blocks: &'m [DecoderBlock] = &lay.blocks;
        for blk in blocks {
            let h = self.layer_norm(x, blk.self_norm);
            let a = self.attention(h, h, blk.self_attn, AttnMask::Causal);
            x = self.g.add(x, a);
            let h = self.layer_norm(x, blk.cross_norm);
            let a = self.attention(h, enc, blk.cross_attn, AttnMask::None);
            x = self.g.add(x, a);
            let h = self.layer_norm(x, blk.ff_norm);
            let h = self.linear(h, blk.ff1);
            let h = self.g.relu(h);
            let h = self.linear(h, blk.ff2);
            let h = self.drop(h);
            x = self.g.add(x, h);
        }
        Ok(self.layer_norm(x, lay.final_norm))
    }

    pub fn logits(&mut self, hidden: Var) -> Var {
        let out = self.lay().decoder.output;
        self.linear(hidden, out)
    }

    /// Pre-encodes one input; returns valid rows only.
    pub fn preencode_input(&mut self, input: ModelInput) -> Result<Var> {
        self.model.check_input(input)?;
        Ok(match input {
            ModelInput::Speech(f) => {
                let x = self.g.constant(f.to_mat());
                let (s, n) = self.speech_preencode(x, f.rows());
                self.g.slice_rows(s, 0, n)
            }
            ModelInput::Phonemes(ids) => {
                let (s, n) = self.phoneme_preencode(ids);
                self.g.slice_rows(s, 0, n)
            }
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_vec(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = params::init_tensors(&layout, seed);
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    /// Wraps existing tensors, checking their shapes against the layout.
    pub fn from_params(config: ModelConfig, params: Vec<Mat>) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} tensors given, layout has {}",
                params.len(),
                layout.len()
            )));
        }
        for (p, s) in params.iter().zip(&layout.specs) {
            if p.shape() != (s.rows, s.cols) {
                return Err(Error::Shape(format!(
                    "{} is {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    (s.rows, s.cols)
                )));
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.specs.iter().position(|s| s.name == name)
    }

    fn check_input(&self, input: ModelInput) -> Result<()> {
        match input {
            ModelInput::Speech(f) => {
                if f.rows() == 0 {
                    return Err(Error::Shape("speech input has no frames".into()));
                }
                if f.cols() != self.config.input_dim {
                    return Err(Error::Shape(format!(
                        "speech input has {} dims, model expects {}",
                        f.cols(),
                        self.config.input_dim
                    )));
                }
            }
            ModelInput::Phonemes(ids) => {
                if ids.is_empty() {
                    return Err(Error::Shape("phoneme input is empty".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.phoneme_inventory) {
                    return Err(Error::Range(format!(
                        "phoneme id {bad} outside inventory of {}",
                        self.config.phoneme_inventory
                    )));
                }
            }
        }
        Ok(())
    }

    /// `valid_frames` marks how many leading frames are real; the rest is padding.
    pub fn speech_preencode(&self, features: &FeatureMatrix, valid_frames: Option<usize>) -> Result<PreEncoding> {
        self.check_input(ModelInput::Speech(features))?;
        let valid = valid_frames.unwrap_or(features.rows()).min(features.rows());
        let mut f = Fwd::new(self, false, ForwardOptions::default());
        let x = f.g.constant(features.to_mat());
        let (s, n) = f.speech_preencode(x, valid);
        let states = f.g.value(s).clone();
        let mask = (0..states.rows()).map(|i| i < n).collect();
        Ok(PreEncoding { states, mask })
    }

    pub fn phoneme_preencode(&self, ids: &[u32]) -> Result<PreEncoding> {
        self.check_input(ModelInput::Phonemes(ids))?;
        let mut f = Fwd::new(self, false, ForwardOptions::default());
        let (s, n) = f.phoneme_preencode(ids);
        let states = f.g.value(s).clone();
        let mask = (0..states.rows()).map(|i| i < n).collect();
        Ok(PreEncoding { states, mask })
    }

    pub fn encode(&self, pre: &PreEncoding) -> Encoding {
        self.encode_batch(std::slice::from_ref(pre)).pop().expect("one item")
    }

    /// Each item is truncated to its valid prefix, encoded, and zero-padded back.
    pub fn encode_batch(&self, pres: &[PreEncoding]) -> Vec<Encoding> {
        let mut f = Fwd::new(self, false, ForwardOptions::default());
        let vars: Vec<Var> = pres
            .iter()
            .map(|p| f.g.constant(p.states.slice_rows(0, p.valid_len())))
            .collect();
        let outs = f.encode_batch(&vars);
        pres.iter()
            .zip(outs)
            .map(|(p, v)| {
                let mut states = Mat::zeros(p.states.rows(), p.states.cols());
                let val = f.g.value(v);
                for r in 0..val.rows() {
                    states.row_mut(r).copy_from_slice(val.row(r));
                }
                Encoding {
                    states,
                    mask: p.mask.clone(),
                }
            })
            .collect()
    }

    pub fn encode_input(&self, input: ModelInput) -> Result<Encoding> {
        let pre = match input {
            ModelInput::Speech(f) => self.speech_preencode(f, None)?,
            ModelInput::Phonemes(ids) => self.phoneme_preencode(ids)?,
        };
        Ok(self.encode(&pre))
    }

    /// Distribution over the token following `prefix`.
    pub fn decoder_step(&self, prefix: &[u32], enc: &Encoding) -> Result<DecoderStepOutput> {
        Ok(self.decoder_steps(&[prefix], enc)?.pop().expect("one prefix"))
    }

    /// [`Model::decoder_step`] for several prefixes sharing one encoding.
    pub fn decoder_steps(&self, prefixes: &[&[u32]], enc: &Encoding) -> Result<Vec<DecoderStepOutput>> {
        let mut f = Fwd::new(self, false, ForwardOptions::default());
        let e = f.g.constant(enc.states.slice_rows(0, enc.valid_len()));
        let mut out = Vec::with_capacity(prefixes.len());
        for prefix in prefixes {
            if prefix.first() != Some(&SOS) {
                return Err(Error::Data("decoder prefix must start with sos".into()));
            }
            let h = f.decode_states(e, prefix)?;
            let last = f.g.slice_rows(h, prefix.len() - 1, 1);
            let logits = f.logits(last);
            out.push(DecoderStepOutput {
                hidden: f.g.value(last).data().to_vec(),
                distribution: softmax_vec(f.g.value(logits).data()),
            });
        }
        Ok(out)
    }

    /// Teacher-forced outputs at every position of `tokens`; row `l` predicts token `l + 1`.
    pub fn decoder_forward(&self, tokens: &[u32], enc: &Encoding) -> Result<Vec<DecoderStepOutput>> {
        if tokens.first() != Some(&SOS) {
            return Err(Error::Data("decoder input must start with sos".into()));
        }
        let mut f = Fwd::new(self, false, ForwardOptions::default());
        let e = f.g.constant(enc.states.slice_rows(0, enc.valid_len()));
        let h = f.decode_states(e, tokens)?;
        let logits = f.logits(h);
        let (h, logits) = (f.g.value(h), f.g.value(logits));
        Ok((0..tokens.len())
            .map(|r| DecoderStepOutput {
                hidden: h.row(r).to_vec(),
                distribution: softmax_vec(logits.row(r)),
            })
            .collect())
    }

    fn build_loss(&self, f: &mut Fwd, batch: &[Example]) -> Result<(Var, LossStats)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut pres = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.target.first() != Some(&SOS) {
                return Err(Error::Data("targets must start with sos".into()));
            }
            pres.push(f.preencode_input(ex.input)?);
        }
        let encs = f.encode_batch(&pres);
        let mut total: Option<Var> = None;
        let (mut n_tokens, mut n_correct) = (0usize, 0usize);
        for (ex, enc) in batch.iter().zip(encs) {
            let len = ex.target.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
            if len < 2 {
                continue;
            }
            let inputs = &ex.target[..len - 1];
            let targets: Vec<Option<usize>> = ex.target[1..len]
                .iter()
                .map(|&t| (t != PAD).then_some(t as usize))
                .collect();
            let h = f.decode_states(enc, inputs)?;
            let logits = f.logits(h);
            let lv = f.g.value(logits);
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    n_tokens += 1;
                    if argmax(lv.row(r)) == t {
                        n_correct += 1;
                    }
                }
            }
            let ce = f.g.cross_entropy(logits, &targets);
            total = Some(match total {
                None => ce,
                Some(acc) => f.g.add(acc, ce),
            });
        }
        let (Some(total), true) = (total, n_tokens > 0) else {
            return Err(Error::Data("batch has no non-pad target tokens".into()));
        };
        let loss = f.g.scale(total, 1.0 / n_tokens as f64);
        let value = f.g.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value}")));
        }
        Ok((
            loss,
            LossStats {
                loss: value,
                token_accuracy: n_correct as f64 / n_tokens as f64,
                n_tokens,
                n_correct,
            },
        ))
    }

    /// Teacher-forced mean cross-entropy and token accuracy, without gradients.
    pub fn forward_loss(&self, batch: &[Example]) -> Result<LossStats> {
        let mut f = Fwd::new(self, false, ForwardOptions::default());
        Ok(self.build_loss(&mut f, batch)?.1)
    }

    /// Loss statistics and the gradient for every parameter tensor.
    pub fn loss_and_grads(&self, batch: &[Example], opts: ForwardOptions) -> Result<(LossStats, Vec<Mat>)> {
        let mut f = Fwd::new(self, true, opts);
        let (root, stats) = self.build_loss(&mut f, batch)?;
        let grads = f.g.backward(root);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok((stats, grads))
    }
}
