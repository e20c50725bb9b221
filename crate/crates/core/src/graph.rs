//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! referenced by index into a borrowed parameter slice, so building a graph never
//! copies weights. [`Graph::backward`] returns the gradient of a scalar node with
//! respect to every parameter that took part in the pass.

use crate::tensor::{gemm, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key positions each query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Every row sees columns `0..n`.
    KeyPrefix(usize),
}

/// 3x3 convolution with zero padding 1, applied to a `[time x (channels * freq)]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub in_ch: usize,
    pub in_freq: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl Conv2dGeom {
    pub const KERNEL: usize = 3;

    pub fn out_len(len: usize, stride: usize) -> usize {
        if len == 0 {
            0
        } else {
            (len - 1) / stride + 1
        }
    }

    pub fn out_freq(&self) -> usize {
        Self::out_len(self.in_freq, self.stride)
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * Self::KERNEL * Self::KERNEL
    }
}

#[derive(Clone, Debug)]
struct LstmCache {
    /// Post-activation gates `[i f g o]`, one row per time step.
    gates: Mat,
    cell: Mat,
    cell_tanh: Mat,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaskRows {
        a: Var,
        valid: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
        patches: Mat,
    },
    RelShift(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Lstm {
        xp: Var,
        u: Var,
        reverse: bool,
        cache: Box<LstmCache>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
    Sum(Var),
}

enum Value {
    Owned(Mat),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p [Mat],
    track_params: bool,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    /// Graph whose parameter nodes require gradients.
    pub fn new(params: &'p [Mat]) -> Self {
        Graph {
            params,
            track_params: true,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    /// Forward-only graph: nothing requires gradients.
    pub fn inference(params: &'p [Mat]) -> Self {
        Graph {
            track_params: false,
            ..Graph::new(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => &self.params[*i],
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Leaf,
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = gemm(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, am.cols()), "add_row expects a 1 x n bias");
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a), &[a])
    }

    /// Gated linear unit over columns: `left * sigmoid(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.cols() % 2 == 0, "glu needs an even column count");
        let half = am.cols() / 2;
        let mut out = Mat::zeros(am.rows(), half);
        for r in 0..am.rows() {
            let row = am.row(r);
            for c in 0..half {
                out.set(r, c, row[c] * sigmoid(row[half + c]));
            }
        }
        self.push(out, Op::Glu(a), &[a])
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: AttnMask) -> Var {
        let am = self.value(a);
        let mut out = Mat::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            let visible = match mask {
                AttnMask::None => am.cols(),
                AttnMask::Causal => (r + 1).min(am.cols()),
                AttnMask::KeyPrefix(n) => n.min(am.cols()),
            };
            let row = &am.row(r)[..visible];
            if row.is_empty() {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let dst = out.row_mut(r);
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in &mut dst[..visible] {
                *d /= total;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row, then applies `gain` and `bias` (both `1 x n`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let am = self.value(a);
        let (rows, cols) = am.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = am.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, &x) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let out = affine_cols(&xhat, self.value(gain), self.value(bias));
        self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    /// Normalizes each column with statistics over all rows (batch and time).
    pub fn batch_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let am = self.value(a);
        let (rows, cols) = am.shape();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, &x) in mean.iter_mut().zip(am.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((v, &x), &m) in var.iter_mut().zip(am.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / rows as f64 + BATCH_NORM_EPS).sqrt())
            .collect();
        let mut xhat = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                xhat.set(r, c, (am.get(r, c) - mean[c]) * inv_std[c]);
            }
        }
        let out = affine_cols(&xhat, self.value(gain), self.value(bias));
        self.push(
            out,
            Op::BatchNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Mat::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Zeroes every row at index `>= valid`.
    pub fn mask_rows(&mut self, a: Var, valid: usize) -> Var {
        let mut out = self.value(a).clone();
        for r in valid.min(out.rows())..out.rows() {
            out.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
        }
        self.push(out, Op::MaskRows { a, valid }, &[a])
    }

    /// Per-column convolution over time with zero "same" padding.
    /// `w` is `[kernel x channels]` with odd kernel, `b` is `1 x channels`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        let (t_len, ch) = xm.shape();
        let k = wm.rows();
        assert_eq!(wm.cols(), ch, "depthwise kernel channel mismatch");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let pad = k / 2;
        let mut out = Mat::zeros(t_len, ch);
        for t in 0..t_len {
            let dst = out.row_mut(t);
            dst.copy_from_slice(bm.data());
            for kk in 0..k {
                let src = t + kk;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xr = xm.row(src - pad);
                let wr = wm.row(kk);
                for c in 0..ch {
                    dst[c] += wr[c] * xr[c];
                }
            }
        }
        self.push(out, Op::DepthwiseConv { x, w, b }, &[x, w, b])
    }

    /// 3x3 convolution over (time, freq) with padding 1 and equal stride on both
    /// axes. `w` is `[out_ch x (in_ch * 9)]`, `b` is `1 x out_ch`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Var {
        let xm = self.value(x);
        assert_eq!(
            xm.cols(),
            geom.in_ch * geom.in_freq,
            "conv2d input width mismatch"
        );
        let t_out = Conv2dGeom::out_len(xm.rows(), geom.stride);
        let f_out = geom.out_freq();
        let patches = im2col(xm, geom, t_out, f_out);
        // [t_out * f_out x out_ch]
        let y = gemm(&patches, false, self.value(w), true);
        let bm = self.value(b);
        let mut out = Mat::zeros(t_out, geom.out_ch * f_out);
        for t in 0..t_out {
            for f in 0..f_out {
                let yr = y.row(t * f_out + f);
                for co in 0..geom.out_ch {
                    out.set(t, co * f_out + f, yr[co] + bm.data()[co]);
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                patches,
            },
            &[x, w, b],
        )
    }

    /// Maps `[L x (2L-1)]` scores over relative offsets (ordered from `L-1` down to
    /// `-(L-1)`) onto `[L x L]` query/key scores: `out[i][j] = in[i][L-1-i+j]`.
    pub fn rel_shift(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let l = am.rows();
        assert_eq!(am.cols(), 2 * l - 1, "rel_shift expects L x (2L-1)");
        let mut out = Mat::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                out.set(i, j, am.get(i, l - 1 - i + j));
            }
        }
        self.push(out, Op::RelShift(a), &[a])
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tm = self.value(table);
        let mut out = Mat::zeros(ids.len(), tm.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tm.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// One direction of an LSTM layer. `xp` holds the input projections
    /// `[T x 4H]` (gate order i, f, g, o, bias included); `u` is the recurrent
    /// matrix `[H x 4H]`. Output rows stay in input time order.
    pub fn lstm(&mut self, xp: Var, u: Var, reverse: bool) -> Var {
        let (xm, um) = (self.value(xp), self.value(u));
        let t_len = xm.rows();
        let h = um.rows();
        assert_eq!(xm.cols(), 4 * h, "lstm input projection width mismatch");
        assert_eq!(um.cols(), 4 * h, "lstm recurrent matrix width mismatch");
        let mut gates = Mat::zeros(t_len, 4 * h);
        let mut cell = Mat::zeros(t_len, h);
        let mut cell_tanh = Mat::zeros(t_len, h);
        let mut out = Mat::zeros(t_len, h);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut pre = vec![0.0; 4 * h];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            pre.copy_from_slice(xm.row(t));
            for (k, &hk) in h_prev.iter().enumerate() {
                if hk != 0.0 {
                    for (p, &w) in pre.iter_mut().zip(um.row(k)) {
                        *p += hk * w;
                    }
                }
            }
            let g = gates.row_mut(t);
            for j in 0..h {
                g[j] = sigmoid(pre[j]);
                g[h + j] = sigmoid(pre[h + j]);
                g[2 * h + j] = pre[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(pre[3 * h + j]);
            }
            for j in 0..h {
                let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
                let tc = c.tanh();
                c_prev[j] = c;
                h_prev[j] = g[3 * h + j] * tc;
            }
            cell.row_mut(t).copy_from_slice(&c_prev);
            for (d, &c) in cell_tanh.row_mut(t).iter_mut().zip(&c_prev) {
                *d = c.tanh();
            }
            out.row_mut(t).copy_from_slice(&h_prev);
        }
        let cache = Box::new(LstmCache {
            gates,
            cell,
            cell_tanh,
        });
        self.push(
            out,
            Op::Lstm {
                xp,
                u,
                reverse,
                cache,
            },
            &[xp, u],
        )
    }

    /// Sum over rows of `-log softmax(logits)[target]`; rows with `None` targets
    /// are ignored. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "one target per logit row");
        let mut probs = Mat::zeros(lm.rows(), lm.cols());
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = lm.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            if let Some(t) = *t {
                loss += log_z - row[t];
            }
        }
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a), &[a])
    }

    /// Gradients of the scalar `root` with respect to every parameter. Parameters
    /// that did not participate get zero matrices.
    pub fn backward(&self, root: Var) -> Vec<Mat> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.param_vars[i]
                    .and_then(|v| grads[v.0].take())
                    .unwrap_or_else(|| Mat::zeros(p.rows(), p.cols()))
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = match &self.nodes[idx].value {
            Value::Owned(m) => m,
            Value::Param(_) => return,
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // C = op(A) op(B): dop(A) = G op(B)^T
                    let da = if *ta {
                        gemm(bm, *tb, g, true)
                    } else {
                        gemm(g, false, bm, !*tb)
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if *tb {
                        gemm(g, true, am, *ta)
                    } else {
                        gemm(am, !*ta, g, false)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.col_sums());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Relu(a) => {
                let d = g.zip_map(out, |gx, y| if y > 0.0 { gx } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gx, y| gx * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gx, y| gx * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Swish(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| {
                    let s = sigmoid(x);
                    gx * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::Glu(a) => {
                let am = self.value(*a);
                let half = am.cols() / 2;
                let mut d = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let row = am.row(r);
                    let gr = g.row(r);
                    let dr = d.row_mut(r);
                    for c in 0..half {
                        let s = sigmoid(row[half + c]);
                        dr[c] = gr[c] * s;
                        dr[half + c] = gr[c] * row[c] * s * (1.0 - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = Mat::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for ((dst, &p), &gx) in d.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *dst = p * (gx - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gain);
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, g.zip_map(xhat, |x, y| x * y).col_sums());
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, g.col_sums());
                }
                if self.needs(*a) {
                    let (rows, cols) = g.shape();
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gm.data()).map(|(g, w)| g * w).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            d.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx));
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::BatchNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gain);
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, g.zip_map(xhat, |x, y| x * y).col_sums());
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, g.col_sums());
                }
                if self.needs(*a) {
                    let (rows, cols) = g.shape();
                    let mut mean_d = vec![0.0; cols];
                    let mut mean_dx = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let dxh = g.get(r, c) * gm.data()[c];
                            mean_d[c] += dxh;
                            mean_dx[c] += dxh * xhat.get(r, c);
                        }
                    }
                    let n = rows as f64;
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let dxh = g.get(r, c) * gm.data()[c];
                            d.set(
                                r,
                                c,
                                inv_std[c]
                                    * (dxh - mean_d[c] / n - xhat.get(r, c) * mean_dx[c] / n),
                            );
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::SliceRows { a, start } => {
                let am = self.value(*a);
                let mut d = Mat::zeros(am.rows(), am.cols());
                let cols = am.cols();
                d.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols { a, start } => {
                let am = self.value(*a);
                let mut d = Mat::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, n));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, n));
                    }
                    offset += n;
                }
            }
            Op::MaskRows { a, valid } => {
                let mut d = g.clone();
                for r in (*valid).min(d.rows())..d.rows() {
                    d.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                }
                self.accumulate(grads, *a, d);
            }
            Op::DepthwiseConv { x, w, b } => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                let (t_len, ch) = xm.shape();
                let k = wm.rows();
                let pad = k / 2;
                let mut dx = Mat::zeros(t_len, ch);
                let mut dw = Mat::zeros(k, ch);
                for t in 0..t_len {
                    let gr = g.row(t);
                    for kk in 0..k {
                        let src = t + kk;
                        if src < pad || src - pad >= t_len {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..ch {
                            dx.data_mut()[s * ch + c] += wm.get(kk, c) * gr[c];
                            dw.data_mut()[kk * ch + c] += xm.get(s, c) * gr[c];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.col_sums());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                patches,
            } => {
                let t_out = g.rows();
                let f_out = geom.out_freq();
                let mut dy = Mat::zeros(t_out * f_out, geom.out_ch);
                for t in 0..t_out {
                    for f in 0..f_out {
                        for co in 0..geom.out_ch {
                            dy.set(t * f_out + f, co, g.get(t, co * f_out + f));
                        }
                    }
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, gemm(&dy, true, patches, false));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy.col_sums());
                }
                if self.needs(*x) {
                    let dpatch = gemm(&dy, false, self.value(*w), false);
                    let xm = self.value(*x);
                    let dx = col2im(&dpatch, *geom, xm.rows(), t_out, f_out);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::RelShift(a) => {
                let l = g.rows();
                let mut d = Mat::zeros(l, 2 * l - 1);
                for i in 0..l {
                    for j in 0..l {
                        let c = l - 1 - i + j;
                        d.set(i, c, d.get(i, c) + g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather { table, ids } => {
                let tm = self.value(*table);
                let mut d = Mat::zeros(tm.rows(), tm.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &gx) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *dst += gx;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::Lstm {
                xp,
                u,
                reverse,
                cache,
            } => {
                let um = self.value(*u);
                let h = um.rows();
                let t_len = out.rows();
                let mut dxp = Mat::zeros(t_len, 4 * h);
                let mut du = Mat::zeros(h, 4 * h);
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                let mut dpre = vec![0.0; 4 * h];
                for step in (0..t_len).rev() {
                    let t = if *reverse { t_len - 1 - step } else { step };
                    let prev = if step == 0 {
                        None
                    } else if *reverse {
                        Some(t + 1)
                    } else {
                        Some(t - 1)
                    };
                    let gates = cache.gates.row(t);
                    let tc = cache.cell_tanh.row(t);
                    for j in 0..h {
                        let (i_g, f_g, g_g, o_g) =
                            (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                        let dh = g.get(t, j) + dh_next[j];
                        let c_prev = prev.map_or(0.0, |p| cache.cell.get(p, j));
                        let d_o = dh * tc[j];
                        let dc = dc_next[j] + dh * o_g * (1.0 - tc[j] * tc[j]);
                        let d_i = dc * g_g;
                        let d_g = dc * i_g;
                        let d_f = dc * c_prev;
                        dc_next[j] = dc * f_g;
                        dpre[j] = d_i * i_g * (1.0 - i_g);
                        dpre[h + j] = d_f * f_g * (1.0 - f_g);
                        dpre[2 * h + j] = d_g * (1.0 - g_g * g_g);
                        dpre[3 * h + j] = d_o * o_g * (1.0 - o_g);
                    }
                    dxp.row_mut(t).copy_from_slice(&dpre);
                    match prev {
                        Some(p) => {
                            let h_prev = out.row(p);
                            for k in 0..h {
                                let hk = h_prev[k];
                                for (d, &dp) in du.row_mut(k).iter_mut().zip(&dpre) {
                                    *d += hk * dp;
                                }
                                dh_next[k] = um.row(k).iter().zip(&dpre).map(|(w, d)| w * d).sum();
                            }
                        }
                        None => dh_next.iter_mut().for_each(|x| *x = 0.0),
                    }
                }
                self.accumulate(grads, *xp, dxp);
                self.accumulate(grads, *u, du);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (dst, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *dst = scale * p;
                        }
                        d.set(r, t, d.get(r, t) - scale);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(a) => {
                let am = self.value(*a);
                self.accumulate(grads, *a, Mat::filled(am.rows(), am.cols(), g.get(0, 0)));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine_cols(xhat: &Mat, gain: &Mat, bias: &Mat) -> Mat {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    out
}

fn im2col(x: &Mat, geom: Conv2dGeom, t_out: usize, f_out: usize) -> Mat {
    let k = Conv2dGeom::KERNEL;
    let t_in = x.rows() as isize;
    let f_in = geom.in_freq as isize;
    let mut patches = Mat::zeros(t_out * f_out, geom.patch_len());
    for t in 0..t_out {
        for f in 0..f_out {
            let row = patches.row_mut(t * f_out + f);
            for ci in 0..geom.in_ch {
                for kt in 0..k {
                    let ts = (t * geom.stride + kt) as isize - 1;
                    if ts < 0 || ts >= t_in {
                        continue;
                    }
                    let xr = x.row(ts as usize);
                    for kf in 0..k {
                        let fs = (f * geom.stride + kf) as isize - 1;
                        if fs < 0 || fs >= f_in {
                            continue;
                        }
                        row[ci * k * k + kt * k + kf] = xr[ci * geom.in_freq + fs as usize];
                    }
                }
            }
        }
    }
    patches
}

fn col2im(dpatch: &Mat, geom: Conv2dGeom, t_in: usize, t_out: usize, f_out: usize) -> Mat {
    let k = Conv2dGeom::KERNEL;
    let f_in = geom.in_freq as isize;
    let mut dx = Mat::zeros(t_in, geom.in_ch * geom.in_freq);
    for t in 0..t_out {
        for f in 0..f_out {
            let row = dpatch.row(t * f_out + f);
            for ci in 0..geom.in_ch {
                for kt in 0..k {
                    let ts = (t * geom.stride + kt) as isize - 1;
                    if ts < 0 || ts >= t_in as isize {
                        continue;
                    }
                    let dr = dx.row_mut(ts as usize);
                    for kf in 0..k {
                        let fs = (f * geom.stride + kf) as isize - 1;
                        if fs < 0 || fs >= f_in {
                            continue;
                        }
                        dr[ci * geom.in_freq + fs as usize] += row[ci * k * k + kt * k + kf];
                    }
                }
            }
        }
    }
    dx
}

/// `a += b * s`, used by optimizers and gradient accumulation.
pub fn axpy(a: &mut Mat, b: &Mat, s: f64) {
    assert_eq!(a.shape(), b.shape(), "axpy shape mismatch");
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += s * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of `f` (built on a graph over `params`).
    fn check(params: &mut [Mat], f: impl Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(params);
            let root = f(&mut g);
            g.backward(root)
        };
        let eval = |ps: &[Mat]| {
            let mut g = Graph::inference(ps);
            let root = f(&mut g);
            g.value(root).get(0, 0)
        };
        let eps = 1e-6;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data()[i];
                params[p].data_mut()[i] = orig + eps;
                let up = eval(params);
                params[p].data_mut()[i] = orig - eps;
                let down = eval(params);
                params[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[p].data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "param {p}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    // Weighted sum so that every output element gets a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
        let (r, c) = g.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        let m = g.mul(v, w);
        g.sum(m)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 5), random(&mut rng, 1, 5)];
        check(&mut ps, |g| {
            let a = g.param(0);
            let b = g.param(1);
            let bias = g.param(2);
            let m = g.matmul(a, b);
            let m = g.add_row(m, bias);
            let s = g.swish(m);
            let t = g.tanh(s);
            let at = g.matmul_nt(t, t);
            let sg = g.sigmoid(at);
            weighted_sum(g, sg, 9)
        });
    }

    #[test]
    fn glu_softmax_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = vec![
            random(&mut rng, 5, 6),
            random(&mut rng, 1, 3),
            random(&mut rng, 1, 3),
        ];
        check(&mut ps, |g| {
            let x = g.param(0);
            let gl = g.glu(x);
            let (gain, bias) = (g.param(1), g.param(2));
            let ln = g.layer_norm(gl, gain, bias);
            let bn = g.batch_norm(ln, gain, bias);
            let sc = g.matmul_nt(bn, gl);
            let sm = g.softmax(sc, AttnMask::Causal);
            let sm2 = g.softmax(sc, AttnMask::KeyPrefix(3));
            let both = g.add(sm, sm2);
            weighted_sum(g, both, 3)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = vec![random(&mut rng, 4, 7), random(&mut rng, 6, 3)];
        check(&mut ps, |g| {
            let x = g.param(0);
            let sh = g.rel_shift(x);
            let a = g.slice_cols(sh, 1, 2);
            let b = g.slice_rows(sh, 1, 2);
            let b = g.matmul_nt(b, b);
            let table = g.param(1);
            let emb = g.gather(table, &[0, 5, 5, 2]);
            let c = g.concat_cols(&[a, emb]);
            let d = g.concat_rows(&[c, c]);
            let d = g.mask_rows(d, 6);
            let d = g.relu(d);
            let s1 = weighted_sum(g, d, 4);
            let s2 = weighted_sum(g, b, 5);
            g.add(s1, s2)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = Conv2dGeom {
            in_ch: 2,
            in_freq: 5,
            out_ch: 3,
            stride: 2,
        };
        let mut ps = vec![
            random(&mut rng, 7, 10),
            random(&mut rng, 3, 18),
            random(&mut rng, 1, 3),
            random(&mut rng, 3, 9),
            random(&mut rng, 1, 9),
        ];
        check(&mut ps, |g| {
            let p: Vec<Var> = (0..5).map(|i| g.param(i)).collect();
            let y = g.conv2d(p[0], p[1], p[2], geom);
            let z = g.depthwise_conv(y, p[3], p[4]);
            weighted_sum(g, z, 6)
        });
    }

    #[test]
    fn lstm_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = vec![random(&mut rng, 5, 12), random(&mut rng, 3, 12)];
        check(&mut ps, |g| {
            let (xp, u) = (g.param(0), g.param(1));
            let f = g.lstm(xp, u, false);
            let b = g.lstm(xp, u, true);
            let h = g.concat_cols(&[f, b]);
            g.cross_entropy(h, &[Some(0), None, Some(5), Some(2), Some(1)])
        });
    }

    #[test]
    fn softmax_masks_and_single_element() {
        let ps: Vec<Mat> = vec![];
        let mut g = Graph::inference(&ps);
        let x = g.constant(Mat::from_vec(1, 1, vec![3.7]));
        let s = g.softmax(x, AttnMask::None);
        assert_eq!(g.value(s).get(0, 0), 1.0);
        let y = g.constant(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let c = g.softmax(y, AttnMask::Causal);
        assert_eq!(g.value(c).get(0, 1), 0.0);
        assert_eq!(g.value(c).get(0, 0), 1.0);
    }

    #[test]
    fn conv_output_lengths() {
        assert_eq!(Conv2dGeom::out_len(40, 2), 20);
        assert_eq!(Conv2dGeom::out_len(41, 2), 21);
        assert_eq!(Conv2dGeom::out_len(1, 2), 1);
        assert_eq!(Conv2dGeom::out_len(9, 1), 9);
        assert_eq!(Conv2dGeom::out_len(0, 2), 0);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ps = vec![random(&mut rng, 2, 2), random(&mut rng, 3, 3)];
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let s = g.sum(x);
        let grads = g.backward(s);
        assert_eq!(grads[1], Mat::zeros(3, 3));
        assert_eq!(grads[0], Mat::filled(2, 2, 1.0));
    }
}
