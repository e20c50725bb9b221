//! Parameter layout and initialization.
//!
//! Every tensor is a [`Mat`]; a [`Layout`] records where each component's tensors
//! live in the flat parameter list. Names are dotted paths whose first segment is
//! the module (`speech_preencoder`, `phoneme_preencoder`, `encoder`, `decoder`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, PositionalMode};
use crate::graph::Conv2dGeom;
use crate::tensor::Mat;

pub const MODULES: [&str; 4] = ["speech_preencoder", "phoneme_preencoder", "encoder", "decoder"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Normal(f64),
    /// `[H x 4H]` recurrent matrix; each `H x H` gate block orthogonal.
    OrthogonalGates,
    /// LSTM bias `[1 x 4H]`: zero except the forget gate, which starts at one.
    ForgetBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    /// `[in x out]`
    pub w: usize,
    /// `[1 x out]`
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub geom: Conv2dGeom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub convs: Vec<Conv>,
    pub proj: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmDir {
    pub input: Linear,
    pub recurrent: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemePre {
    pub embedding: usize,
    /// Forward and backward direction per layer.
    pub lstm: Vec<[LstmDir; 2]>,
    pub norm: Norm,
    pub stack: ConvStack,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: Norm,
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelSelfAttention {
    pub norm: Norm,
    pub attn: Attention,
    /// `[d x d]` projection of the sinusoidal relative table.
    pub pos: usize,
    pub bias_u: usize,
    pub bias_v: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvModule {
    pub norm: Norm,
    pub pointwise1: Linear,
    /// `[kernel x d]`
    pub depthwise_w: usize,
    pub depthwise_b: usize,
    pub inner_norm: Norm,
    pub pointwise2: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderBlock {
    pub ff1: FeedForward,
    pub mhsa: RelSelfAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub final_norm: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderBlock {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross_norm: Norm,
    pub cross_attn: Attention,
    pub ff_norm: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayout {
    pub embedding: usize,
    pub lpe: Option<usize>,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: Norm,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub speech: ConvStack,
    pub phoneme: PhonemePre,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: DecoderLayout,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), input, output, Init::FanIn(input)),
            b: self.add(format!("{name}.bias"), 1, output, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), 1, dim, Init::Ones),
            bias: self.add(format!("{name}.bias"), 1, dim, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn conv_stack(&mut self, name: &str, cfg: &ModelConfig, in_freq: usize) -> ConvStack {
        let geoms = cfg.cnn_geoms(in_freq);
        let convs = geoms
            .iter()
            .enumerate()
            .map(|(i, &geom)| Conv {
                w: self.add(
                    format!("{name}.conv{i}.weight"),
                    geom.out_ch,
                    geom.patch_len(),
                    Init::FanIn(geom.patch_len()),
                ),
                b: self.add(format!("{name}.conv{i}.bias"), 1, geom.out_ch, Init::Zeros),
                geom,
            })
            .collect();
        let last = geoms[3];
        let proj = self.linear(&format!("{name}.proj"), last.out_ch * last.out_freq(), cfg.embed_dim);
        ConvStack { convs, proj }
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), d),
            l1: self.linear(&format!("{name}.l1"), d, ff),
            l2: self.linear(&format!("{name}.l2"), ff, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.embed_dim;
        let mut b = Builder { specs: Vec::new() };

        let speech = b.conv_stack("speech_preencoder", cfg, cfg.input_dim);

        let h = cfg.lstm_hidden;
        let embedding = b.add(
            "phoneme_preencoder.embedding".into(),
            cfg.phoneme_inventory,
            cfg.phoneme_embed_dim,
            Init::Normal(1.0),
        );
        let mut lstm = Vec::new();
        for l in 0..cfg.lstm_layers {
            let input = if l == 0 { cfg.phoneme_embed_dim } else { 2 * h };
            let mut dir = |tag: &str| {
                let name = format!("phoneme_preencoder.lstm{l}.{tag}");
                LstmDir {
                    input: Linear {
                        w: b.add(format!("{name}.input.weight"), input, 4 * h, Init::FanIn(input)),
                        b: b.add(format!("{name}.input.bias"), 1, 4 * h, Init::ForgetBias),
                    },
                    recurrent: b.add(format!("{name}.recurrent"), h, 4 * h, Init::OrthogonalGates),
                }
            };
            let fwd = dir("fwd");
            let bwd = dir("bwd");
            lstm.push([fwd, bwd]);
        }
        let norm = b.norm("phoneme_preencoder.norm", 2 * h);
        let stack = b.conv_stack("phoneme_preencoder", cfg, 2 * h);
        let phoneme = PhonemePre {
            embedding,
            lstm,
            norm,
            stack,
        };

        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                EncoderBlock {
                    ff1: b.feed_forward(&format!("{p}.ff1"), d, cfg.enc_ff),
                    mhsa: RelSelfAttention {
                        norm: b.norm(&format!("{p}.mhsa.norm"), d),
                        attn: b.attention(&format!("{p}.mhsa"), d),
                        pos: b.add(format!("{p}.mhsa.pos.weight"), d, d, Init::FanIn(d)),
                        bias_u: b.add(format!("{p}.mhsa.bias_u"), 1, d, Init::Zeros),
                        bias_v: b.add(format!("{p}.mhsa.bias_v"), 1, d, Init::Zeros),
                    },
                    conv: ConvModule {
                        norm: b.norm(&format!("{p}.conv.norm"), d),
                        pointwise1: b.linear(&format!("{p}.conv.pointwise1"), d, 2 * d),
                        depthwise_w: b.add(
                            format!("{p}.conv.depthwise.weight"),
                            cfg.conv_kernel,
                            d,
                            Init::FanIn(cfg.conv_kernel),
                        ),
                        depthwise_b: b.add(format!("{p}.conv.depthwise.bias"), 1, d, Init::Zeros),
                        inner_norm: b.norm(&format!("{p}.conv.inner_norm"), d),
                        pointwise2: b.linear(&format!("{p}.conv.pointwise2"), d, d),
                    },
                    ff2: b.feed_forward(&format!("{p}.ff2"), d, cfg.enc_ff),
                    final_norm: b.norm(&format!("{p}.final_norm"), d),
                }
            })
            .collect();

        let emb = b.add("decoder.embedding".into(), cfg.vocab_size, d, Init::Normal(1.0));
        let lpe = match cfg.positional_mode {
            PositionalMode::Learned => Some(b.add(
                "decoder.lpe".into(),
                cfg.max_target_len,
                d,
                Init::Normal(1.0),
            )),
            PositionalMode::AbsoluteSinusoidal => None,
        };
        let blocks = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("decoder.blocks.{i}");
                DecoderBlock {
                    self_norm: b.norm(&format!("{p}.self_norm"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    cross_norm: b.norm(&format!("{p}.cross_norm"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ff_norm: b.norm(&format!("{p}.ff_norm"), d),
                    ff1: b.linear(&format!("{p}.ff.l1"), d, cfg.dec_ff),
                    ff2: b.linear(&format!("{p}.ff.l2"), cfg.dec_ff, d),
                }
            })
            .collect();
        let final_norm = b.norm("decoder.final_norm", d);
        let output = b.linear("decoder.output", d, cfg.vocab_size);
        let decoder = DecoderLayout {
            embedding: emb,
            lpe,
            blocks,
            final_norm,
            output,
        };

        Layout {
            specs: b.specs,
            speech,
            phoneme,
            encoder,
            decoder,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Scalar count by enumeration of tensor shapes.
    pub fn scalar_count(&self) -> usize {
        self.specs.iter().map(|s| s.rows * s.cols).sum()
    }

    pub fn module_of(&self, index: usize) -> &str {
        let name = &self.specs[index].name;
        name.split('.').next().unwrap_or(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }
}

/// Modified Gram-Schmidt on a Gaussian matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Mat {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let rj = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(&rj) {
                    *a -= dot * b;
                }
            }
            let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|a| *a /= norm);
        }
        if ok {
            return Mat::from_rows(&rows);
        }
    }
}

pub fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Mat {
    let (r, c) = (spec.rows, spec.cols);
    match spec.init {
        Init::Zeros => Mat::zeros(r, c),
        Init::Ones => Mat::filled(r, c, 1.0),
        Init::FanIn(fan) => {
            let a = 1.0 / (fan.max(1) as f64).sqrt();
            Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-a..a)).collect())
        }
        Init::Normal(std) => Mat::from_vec(
            r,
            c,
            (0..r * c).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        ),
        Init::OrthogonalGates => {
            let mut m = Mat::zeros(r, c);
            for gate in 0..4 {
                let q = orthogonal(r, rng);
                for i in 0..r {
                    m.row_mut(i)[gate * r..(gate + 1) * r].copy_from_slice(q.row(i));
                }
            }
            m
        }
        Init::ForgetBias => {
            let h = c / 4;
            let mut m = Mat::zeros(r, c);
            for j in h..2 * h {
                m.set(0, j, 1.0);
            }
            m
        }
    }
}

/// Draws every tensor in layout order from one seeded stream.
pub fn init_tensors(layout: &Layout, seed: u64) -> Vec<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout.specs.iter().map(|s| init_tensor(s, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::count_parameters;
    use crate::tensor::gemm;

    #[test]
    fn enumerated_count_matches_formula() {
        for cfg in [ModelConfig::tiny(), ModelConfig::toy(), ModelConfig::base(), ModelConfig::large()] {
            let layout = Layout::new(&cfg);
            assert_eq!(layout.scalar_count(), count_parameters(&cfg).total());
            let mut sin = cfg.clone();
            sin.positional_mode = PositionalMode::AbsoluteSinusoidal;
            assert_eq!(Layout::new(&sin).scalar_count(), count_parameters(&sin).total());
        }
    }

    #[test]
    fn per_module_counts_match_names() {
        let cfg = ModelConfig::tiny();
        let layout = Layout::new(&cfg);
        let count = count_parameters(&cfg);
        let of = |m: &str| -> usize {
            (0..layout.len())
                .filter(|&i| layout.module_of(i) == m)
                .map(|i| layout.specs[i].rows * layout.specs[i].cols)
                .sum()
        };
        assert_eq!(of("speech_preencoder"), count.speech_preencoder);
        assert_eq!(of("phoneme_preencoder"), count.phoneme_preencoder);
        assert_eq!(of("encoder"), count.encoder);
        assert_eq!(of("decoder"), count.decoder);
        assert!((0..layout.len()).all(|i| MODULES.contains(&layout.module_of(i))));
    }

    #[test]
    fn orthogonal_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(5, &mut rng);
        let qqt = gemm(&q, false, &q, true);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qqt.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let layout = Layout::new(&ModelConfig::tiny());
        assert_eq!(init_tensors(&layout, 9), init_tensors(&layout, 9));
        assert_ne!(init_tensors(&layout, 9), init_tensors(&layout, 10));
    }
}
