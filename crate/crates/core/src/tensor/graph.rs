use std::collections::BTreeMap;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a node of one [`Graph`]. Handles from different graphs must not
/// be mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Log,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul
        )
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Reshape(Var),
    Expand {
        input: Var,
        outer: usize,
        inner: usize,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    L1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the named parameters that
/// reach it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.entries
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// A define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    track_branches: bool,
    branch_hash: u64,
    clamp_events: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track_branches: false,
            branch_hash: FNV_OFFSET,
            clamp_events: 0,
        }
    }

    /// A graph that hashes every branch decision taken by non-smooth ops
    /// (relu signs, pooling winners, L1 signs, clamp hits). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn with_branch_tracking() -> Self {
        Graph {
            track_branches: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// Number of elements that any [`Graph::clamp`] call had to move.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Bound parameters by name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn note_branch(&mut self, bits: impl Iterator<Item = u64>) {
        if !self.track_branches {
            return;
        }
        let mut h = self.branch_hash;
        for b in bits {
            h ^= b;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. Names are unique within a graph.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var, TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Contract(format!(
                "parameter '{name}' bound twice"
            )));
        }
        let v = self.push(t, Op::Param(name.clone()), true);
        self.params.insert(name, v);
        Ok(v)
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    fn zip_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn elementwise(
        &mut self,
        kind: ElementwiseKind,
        a: Var,
        b: Option<Var>,
    ) -> Result<Var, TensorError> {
        match (kind.is_binary(), b) {
            (true, None) => {
                return Err(TensorError::Contract(format!(
                    "{kind:?} needs two operands"
                )))
            }
            (false, Some(_)) => {
                return Err(TensorError::Contract(format!("{kind:?} takes one operand")))
            }
            _ => {}
        }
        match kind {
            ElementwiseKind::Add => self.add(a, b.unwrap()),
            ElementwiseKind::Sub => self.sub(a, b.unwrap()),
            ElementwiseKind::Mul => self.mul(a, b.unwrap()),
            ElementwiseKind::Neg => Ok(self.neg(a)),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseKind::Tanh => Ok(self.tanh(a)),
            ElementwiseKind::Log => self.log(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |x| -x);
        let ng = self.ng(a);
        self.push(out, Op::Neg(a), ng)
    }

    /// Rectifier with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.note_branch_signs(a, 0.0);
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map_unary(a, |x| if x > 0.0 { x } else { slope * x });
        self.note_branch_signs(a, 0.0);
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    fn note_branch_signs(&mut self, a: Var, at: f64) {
        if self.track_branches {
            let bits: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .map(|&x| u64::from(x > at))
                .collect();
            self.note_branch(bits.into_iter());
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Natural log; every input must be strictly positive. NaN passes
    /// through so the caller's loss check can name the diverged term.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(&x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        let out = self.map_unary(a, f64::ln);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Log(a), ng))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.map_unary(a, |x| scale * x + shift);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Clamps into `[lo, hi]`. Moved elements pass no gradient and are
    /// counted in [`Graph::clamp_events`].
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let hits = self
            .value(a)
            .data()
            .iter()
            .filter(|&&x| x < lo || x > hi)
            .count();
        self.clamp_events += hits;
        if self.track_branches {
            let bits: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .map(|&x| u64::from(x < lo) | (u64::from(x > hi) << 1))
                .collect();
            self.note_branch(bits.into_iter());
        }
        let out = self.map_unary(a, |x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// Cross-correlation of `[C_in,H,W]` or `[B,C_in,H,W]` input with a
    /// `[C_out,C_in,kh,kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        let (batch, c_in, h, w, batched) = match *si.as_slice() {
            [c, h, w] => (1, c, h, w, false),
            [b, c, h, w] => (b, c, h, w, true),
            _ => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("input must be [C,H,W] or [B,C,H,W], got {si:?}"),
                ))
            }
        };
        let &[c_out, kc, kh, kw] = sk.as_slice() else {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel must be [C_out,C_in,kh,kw], got {sk:?}"),
            ));
        };
        if kc != c_in {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let img_len = c_in * h * w;
        let mut cols = vec![0.0; batch * rows * p];
        let mut out = vec![0.0; batch * c_out * p];
        let kdata = self.value(kernel).data();
        let idata = self.value(input).data();
        for b in 0..batch {
            let c = &mut cols[b * rows * p..(b + 1) * rows * p];
            im2col(&geom, &idata[b * img_len..(b + 1) * img_len], c);
            gemm_nn(
                c_out,
                rows,
                p,
                kdata,
                c,
                &mut out[b * c_out * p..(b + 1) * c_out * p],
            );
        }
        let shape = if batched {
            vec![batch, c_out, geom.out_h, geom.out_w]
        } else {
            vec![c_out, geom.out_h, geom.out_w]
        };
        let ng = self.ng(input) || self.ng(kernel);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                c_out,
                cols,
            },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2 over `[B,C,H,W]`; odd edges are
    /// dropped. Ties go to the first element in row-major window order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.value(input).shape().to_vec();
        let &[b, c, h, w] = s.as_slice() else {
            return Err(TensorError::shape(
                "max_pool2",
                format!("input must be [B,C,H,W], got {s:?}"),
            ));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::shape(
                "max_pool2",
                format!("{h}x{w} too small to pool"),
            ));
        }
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        self.note_branch(argmax.iter().map(|&i| i as u64));
        let ng = self.ng(input);
        Ok(self.push(
            Tensor::from_raw(vec![b, c, oh, ow], out),
            Op::MaxPool2 { input, argmax },
            ng,
        ))
    }

    /// Nearest-neighbour ×2 upsampling over `[B,C,H,W]`.
    pub fn upsample2(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.value(input).shape().to_vec();
        let &[b, c, h, w] = s.as_slice() else {
            return Err(TensorError::shape(
                "upsample2",
                format!("input must be [B,C,H,W], got {s:?}"),
            ));
        };
        let data = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(plane * oh + y) * ow + x] = data[(plane * h + y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.ng(input);
        Ok(self.push(
            Tensor::from_raw(vec![b, c, oh, ow], out),
            Op::Upsample2(input),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Explicit repetition: the `n` values of `a` become `[outer, n, inner]`
    /// with `out[o, i, j] = a[i]`.
    pub fn expand(&mut self, a: Var, outer: usize, inner: usize) -> Result<Var, TensorError> {
        if outer == 0 || inner == 0 {
            return Err(TensorError::shape("expand", "repeat counts must be positive"));
        }
        let src = self.value(a).data();
        let n = src.len();
        let mut out = Vec::with_capacity(outer * n * inner);
        for _ in 0..outer {
            for &v in src {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_raw(vec![outer, n, inner], out),
            Op::Expand { input: a, outer, inner },
            ng,
        ))
    }

    /// Gathers rows (entries of the leading axis) in the given order.
    /// Repeated indices are allowed; their gradients accumulate.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if rows.is_empty() {
            return Err(TensorError::shape("select_rows", "no rows selected"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::shape(
                "select_rows",
                format!("row {r} out of range for leading extent {}", shape[0]),
            ));
        }
        let per = t.numel() / shape[0];
        let mut out = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
        }
        let mut oshape = shape;
        oshape[0] = rows.len();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_raw(oshape, out),
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let s = self.value(logits).shape().to_vec();
        let &[b, k] = s.as_slice() else {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("logits must be [B,K], got {s:?}"),
            ));
        };
        if labels.len() != b {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for (r, row) in data.chunks(k).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[r]];
            for (j, &x) in row.iter().enumerate() {
                probs[r * k + j] = (x - m).exp() / z;
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Mean absolute difference; subgradient 0 where `a == b`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("l1_distance", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.numel() as f64;
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        if self.track_branches {
            let bits: Vec<u64> = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Less) => 0,
                    Some(std::cmp::Ordering::Greater) => 2,
                    _ => 1,
                })
                .collect();
            self.note_branch(bits.into_iter());
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(total / n), Op::L1(a, b), ng))
    }

    /// Reverse sweep from a single-element `loss`. Parameters the loss does
    /// not reach are absent from the result.
    pub fn backward(&self, loss: Var) -> Result<GradientMap, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = GradientMap::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.entries.insert(
                        name.clone(),
                        Tensor::from_raw(node.value.shape().to_vec(), g),
                    );
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_into(ga, &g));
                    self.acc(&mut grads, *b, |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_into(ga, &g));
                    self.acc(&mut grads, *b, |gb| {
                        for (x, &y) in gb.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &y) in ga.iter_mut().zip(&g).zip(vb) {
                            *x += gy * y;
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for ((x, &gy), &y) in gb.iter_mut().zip(&g).zip(va) {
                            *x += gy * y;
                        }
                    });
                }
                Op::Neg(a) => self.acc(&mut grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(&g) {
                        *x -= y;
                    }
                }),
                Op::Relu(a) => {
                    let va = self.value(*a).data();
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &v) in ga.iter_mut().zip(&g).zip(va) {
                            if v > 0.0 {
                                *x += gy;
                            }
                        }
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let va = self.value(*a).data();
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &v) in ga.iter_mut().zip(&g).zip(va) {
                            *x += if v > 0.0 { gy } else { slope * gy };
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &s) in ga.iter_mut().zip(&g).zip(y) {
                            *x += gy * s * (1.0 - s);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &t) in ga.iter_mut().zip(&g).zip(y) {
                            *x += gy * (1.0 - t * t);
                        }
                    });
                }
                Op::Log(a) => {
                    let va = self.value(*a).data();
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &v) in ga.iter_mut().zip(&g).zip(va) {
                            *x += gy / v;
                        }
                    });
                }
                Op::Affine(a, s) => self.acc(&mut grads, *a, |ga| {
                    for (x, &gy) in ga.iter_mut().zip(&g) {
                        *x += s * gy;
                    }
                }),
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(*a).data();
                    self.acc(&mut grads, *a, |ga| {
                        for ((x, &gy), &v) in ga.iter_mut().zip(&g).zip(va) {
                            if v >= *lo && v <= *hi {
                                *x += gy;
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, |ga| gemm_nt(m, n, k, &g, vb, ga));
                    self.acc(&mut grads, *b, |gb| gemm_tn(k, m, n, va, &g, gb));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                    batch,
                    c_out,
                    cols,
                } => {
                    let (rows, p) = (geom.col_rows(), geom.col_cols());
                    let img_len = geom.c_in * geom.h * geom.w;
                    self.acc(&mut grads, *kernel, |gk| {
                        for b in 0..*batch {
                            gemm_nt(
                                *c_out,
                                p,
                                rows,
                                &g[b * c_out * p..(b + 1) * c_out * p],
                                &cols[b * rows * p..(b + 1) * rows * p],
                                gk,
                            );
                        }
                    });
                    let kdata = self.value(*kernel).data();
                    self.acc(&mut grads, *input, |gi| {
                        let mut gcols = vec![0.0; rows * p];
                        for b in 0..*batch {
                            gcols.iter_mut().for_each(|x| *x = 0.0);
                            gemm_tn(
                                rows,
                                *c_out,
                                p,
                                kdata,
                                &g[b * c_out * p..(b + 1) * c_out * p],
                                &mut gcols,
                            );
                            col2im(geom, &gcols, &mut gi[b * img_len..(b + 1) * img_len]);
                        }
                    });
                }
                Op::MaxPool2 { input, argmax } => self.acc(&mut grads, *input, |gi| {
                    for (&src, &gy) in argmax.iter().zip(&g) {
                        gi[src] += gy;
                    }
                }),
                Op::Upsample2(input) => {
                    let s = self.value(*input).shape();
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    self.acc(&mut grads, *input, |gi| {
                        for plane in 0..planes {
                            for y in 0..oh {
                                for x in 0..ow {
                                    gi[(plane * h + y / 2) * w + x / 2] +=
                                        g[(plane * oh + y) * ow + x];
                                }
                            }
                        }
                    });
                }
                Op::Reshape(a) => self.acc(&mut grads, *a, |ga| add_into(ga, &g)),
                Op::Expand {
                    input,
                    outer,
                    inner,
                } => {
                    let n = self.value(*input).numel();
                    self.acc(&mut grads, *input, |gi| {
                        for o in 0..*outer {
                            for (i, x) in gi.iter_mut().enumerate() {
                                let start = (o * n + i) * inner;
                                *x += g[start..start + inner].iter().sum::<f64>();
                            }
                        }
                    });
                }
                Op::SelectRows { input, rows } => {
                    let per = g.len() / rows.len();
                    self.acc(&mut grads, *input, |gi| {
                        for (k, &r) in rows.iter().enumerate() {
                            add_into(&mut gi[r * per..(r + 1) * per], &g[k * per..(k + 1) * per]);
                        }
                    });
                }
                Op::Sum(a) => self.acc(&mut grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }),
                Op::Mean(a) => {
                    let n = self.value(*a).numel() as f64;
                    self.acc(&mut grads, *a, |ga| {
                        for x in ga.iter_mut() {
                            *x += g[0] / n;
                        }
                    });
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    labels,
                } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    self.acc(&mut grads, *logits, |gl| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                            }
                        }
                    });
                }
                Op::L1(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let scale = g[0] / va.len() as f64;
                    let sign = |x: f64, y: f64| {
                        if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    self.acc(&mut grads, *a, |ga| {
                        for ((d, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                            *d += scale * sign(x, y);
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for ((d, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                            *d -= scale * sign(x, y);
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}
