//! The recording graph. Every operation appends a node holding its output
//! value and whatever it needs for the backward pass; `backward` then visits
//! the nodes in exact reverse order of execution.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{self, ConvGeom};
use super::interp;
use super::pool;
use super::scalar::{gemm, Scalar};
use super::tensor::{numel, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// identical shapes
    Same,
    /// `[B,C,1,1]` against `[B,C,H,W]`
    Channel,
    /// `[B,1,H,W]` against `[B,C,H,W]`
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Abs,
    Scale(f64),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Pool2d { x: Var, kind: PoolKind, window: usize, stride: usize, arg: Vec<u32> },
    GlobalPool { x: Var, kind: PoolKind, arg: Vec<u32> },
    Interp { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Binary { kind: Binary, a: Var, b: Var, bc: Broadcast },
    Unary { kind: Unary, x: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Diff { x: Var, axis: usize },
    Reduce { x: Var, kind: ReduceKind, out_strides: Vec<usize> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    track_branches: bool,
    branch_hash: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, word: u64) -> u64 {
    let mut z = h ^ word.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // stay strictly inside (0, 1) even where the exponential saturates
    s.max(T::min_positive_value()).min(T::below_one())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn dims4(op: &'static str, what: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(shape_err(op, format!("{what} must be rank 4, got {shape:?}"))),
    }
}

/// Maps a flat input index onto the output of a reduction.
fn reduce_index(mut i: usize, shape: &[usize], out_strides: &[usize]) -> usize {
    let mut o = 0;
    for d in (0..shape.len()).rev() {
        o += (i % shape[d]) * out_strides[d];
        i /= shape[d];
    }
    o
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false, track_branches: false, branch_hash: 0 }
    }

    /// A graph that hashes every branch decision (ReLU/LeakyReLU masks, |x|
    /// signs, max-pool winners) into [`Graph::branch_signature`].
    pub fn with_branch_tracking() -> Self {
        Self { track_branches: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of all branch decisions taken so far; zero unless tracking is on.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn note(&mut self, word: u64) {
        self.branch_hash = mix(self.branch_hash, word);
    }

    fn note_mask(&mut self, bits: impl Iterator<Item = bool>) {
        if !self.track_branches {
            return;
        }
        let (mut word, mut n) = (0u64, 0u32);
        for b in bits {
            word = (word << 1) | u64::from(b);
            n += 1;
            if n == 64 {
                self.note(word);
                word = 0;
                n = 0;
            }
        }
        self.note(word ^ (u64::from(n) << 56));
    }

    fn note_args(&mut self, arg: &[u32]) {
        if self.track_branches {
            for &a in arg {
                self.note(u64::from(a));
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v` after [`Graph::backward`], same layout as its value.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grad(v)?;
        Tensor::new(self.shape(v), g.to_vec()).ok()
    }

    // ---- operations -------------------------------------------------------

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (batch, cin, h, wd) = dims4(OP, "input", self.shape(x))?;
        let (cout, wcin, kh, kw) = dims4(OP, "weight", self.shape(w))?;
        if stride == 0 {
            return Err(arg_err(OP, "stride must be positive"));
        }
        if wcin != cin {
            return Err(shape_err(OP, format!("input channels {cin} != weight in-channels {wcin}")));
        }
        if h + 2 * padding < kh {
            return Err(shape_err(OP, format!("padded height {} < kernel height {kh}", h + 2 * padding)));
        }
        if wd + 2 * padding < kw {
            return Err(shape_err(OP, format!("padded width {} < kernel width {kw}", wd + 2 * padding)));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(OP, format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        if x == w || Some(x) == b || Some(w) == b {
            return Err(arg_err(OP, "input, weight and bias must be distinct values"));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let out = conv::forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let value = Tensor::new(&[batch, cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        const OP: &str = "pool2d";
        let (b, c, h, w) = dims4(OP, "input", self.shape(x))?;
        if window == 0 || stride == 0 {
            return Err(arg_err(OP, "window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(arg_err(OP, format!("window {window} exceeds spatial extent {h}x{w}")));
        }
        let (out, arg) = pool::pool_forward(self.value(x).data(), b * c, h, w, window, stride, kind == PoolKind::Max);
        self.note_args(&arg);
        let value = Tensor::new(&[b, c, (h - window) / stride + 1, (w - window) / stride + 1], out)?;
        Ok(self.push(value, Op::Pool2d { x, kind, window, stride, arg }, &[x]))
    }

    /// Per-channel reduction over all spatial positions, output `[B,C,1,1]`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (b, c, h, w) = dims4("global_pool", "input", self.shape(x))?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        let mut arg = Vec::new();
        for plane in data.chunks_exact(hw) {
            match kind {
                PoolKind::Avg => {
                    let s = plane.iter().fold(T::zero(), |a, &v| a + v);
                    out.push(s / T::from_f64(hw as f64));
                }
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    arg.push(best as u32);
                }
            }
        }
        self.note_args(&arg);
        let value = Tensor::new(&[b, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalPool { x, kind, arg }, &[x]))
    }

    /// Bilinear resize with half-pixel centers; same-size resize copies.
    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "interpolate_bilinear";
        let (b, c, h, w) = dims4(OP, "input", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(arg_err(OP, "output size must be positive"));
        }
        let out = interp::forward(self.value(x).data(), b * c, h, w, out_h, out_w);
        let value = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Interp { x }, &[x]))
    }

    /// `x[B,D] · wᵀ[D,N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let [batch, d] = *self.shape(x) else {
            return Err(shape_err(OP, format!("input must be rank 2, got {:?}", self.shape(x))));
        };
        let [n, wd] = *self.shape(w) else {
            return Err(shape_err(OP, format!("weight must be rank 2, got {:?}", self.shape(w))));
        };
        if wd != d {
            return Err(arg_err(OP, format!("input width {d} != weight width {wd}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(arg_err(OP, format!("bias shape {:?} != [{n}]", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); batch * n];
        gemm(
            batch,
            d,
            n,
            T::one(),
            (self.value(x).data(), d, 1),
            (self.value(w).data(), 1, d),
            T::zero(),
            &mut out,
            n,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                add_into(row, bias);
            }
        }
        let value = Tensor::new(&[batch, n], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if let ([ba, ca, _, _], [bb, cb, 1, 1]) = (sa, sb) {
            if ba == bb && ca == cb {
                return Ok(Broadcast::Channel);
            }
        }
        if let ([ba, _, ha, wa], [bb, 1, hb, wb]) = (sa, sb) {
            if ba == bb && ha == hb && wa == wb {
                return Ok(Broadcast::Spatial);
            }
        }
        Err(arg_err(op, format!("cannot broadcast {sb:?} against {sa:?}")))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = self.broadcast_kind(name, a, b)?;
        let shape = self.shape(a).to_vec();
        let map = index_map(bc, &shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[map(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bc }, &[a, b]))
    }

    /// Element-wise sum; `b` may broadcast as `[B,C,1,1]` or `[B,1,H,W]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                Unary::LeakyRelu(s) => {
                    if v > T::zero() {
                        v
                    } else {
                        v * T::from_f64(s)
                    }
                }
                Unary::Sigmoid => sigmoid(v),
                Unary::Abs => v.abs(),
                Unary::Scale(c) => v * T::from_f64(c),
            })
            .collect();
        let value = Tensor::new(xv.shape(), out).expect("unary preserves shape");
        if self.track_branches {
            match kind {
                Unary::Relu | Unary::LeakyRelu(_) => {
                    let bits: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
                    self.note_mask(bits.into_iter());
                }
                Unary::Abs => {
                    let bits: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
                    self.note_mask(bits.into_iter());
                    let zeros: Vec<bool> = self.value(x).data().iter().map(|&v| v == T::zero()).collect();
                    self.note_mask(zeros.into_iter());
                }
                _ => {}
            }
        }
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    /// `scale[c]·x + shift[c]` for `x` shaped `[B, C, ...]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        const OP: &str = "channel_affine";
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(OP, format!("input must be at least rank 2, got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err(OP, format!("scale/shift must be [{c}]")));
        }
        let inner: usize = shape[2..].iter().product();
        let (sv, tv) = (self.value(scale).data(), self.value(shift).data());
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                sv[ch] * v + tv[ch]
            })
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = *inputs.first().ok_or_else(|| arg_err(OP, "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(arg_err(OP, format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(arg_err(OP, format!("shape {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let blk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Forward differences `x[i+1] - x[i]` along `axis`.
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        const OP: &str = "diff";
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] < 2 {
            return Err(arg_err(OP, format!("axis {axis} of {shape:?} needs extent >= 2")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            for j in 0..n - 1 {
                let lo = (o * n + j) * inner;
                let hi = lo + inner;
                for k in 0..inner {
                    out.push(xv[hi + k] - xv[lo + k]);
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = n - 1;
        let value = Tensor::new(&oshape, out)?;
        Ok(self.push(value, Op::Diff { x, axis }, &[x]))
    }

    /// Sum or mean over `axes` (`None` = all axes); reduced axes are dropped.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: Option<&[usize]>) -> Result<Var> {
        const OP: &str = "reduce";
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![axes.is_none(); shape.len()];
        if let Some(axes) = axes {
            for &a in axes {
                if a >= shape.len() {
                    return Err(arg_err(OP, format!("axis {a} out of range for rank {}", shape.len())));
                }
                if reduced[a] {
                    return Err(arg_err(OP, format!("axis {a} listed twice")));
                }
                reduced[a] = true;
            }
        }
        let oshape: Vec<usize> = shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let mut out_strides = vec![0usize; shape.len()];
        let mut s = 1;
        for d in (0..shape.len()).rev() {
            if !reduced[d] {
                out_strides[d] = s;
                s *= shape[d];
            }
        }
        let count = numel(&shape) / numel(&oshape);
        let mut out = vec![T::zero(); numel(&oshape)];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            let o = reduce_index(i, &shape, &out_strides);
            out[o] = out[o] + v;
        }
        if kind == ReduceKind::Mean {
            let inv = T::from_f64(count as f64);
            out.iter_mut().for_each(|v| *v = *v / inv);
        }
        let value = Tensor::new(&oshape, out)?;
        Ok(self.push(value, Op::Reduce { x, kind, out_strides }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Sum, None).expect("full reduction is always valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Mean, None).expect("full reduction is always valid")
    }

    /// Per-row `-log softmax(logits)[label]`, output `[B]`, using the
    /// log-sum-exp form.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let [b, n] = *self.shape(logits) else {
            return Err(shape_err(OP, format!("logits must be [B,N], got {:?}", self.shape(logits))));
        };
        if labels.len() != b {
            return Err(arg_err(OP, format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(arg_err(OP, format!("label {bad} out of range for {n} classes")));
        }
        let mut out = Vec::with_capacity(b);
        let mut probs = Vec::with_capacity(b * n);
        for (row, &label) in self.value(logits).data().chunks_exact(n).zip(labels) {
            let mut top = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[top] {
                    top = i;
                }
            }
            let m = row[top];
            let others =
                row.iter().enumerate().filter(|&(i, _)| i != top).fold(T::zero(), |acc, (_, &v)| acc + (v - m).exp());
            let log_z = others.ln_1p();
            out.push((m - row[label]) + log_z);
            probs.extend(row.iter().map(|&v| (v - m - log_z).exp()));
        }
        let value = Tensor::new(&[b], out)?;
        Ok(self.push(value, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of `loss` for every value that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph; call reset_grads first".to_string()));
        }
        if self.value(loss).numel() != 1 {
            return Err(arg_err("backward", format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        self.consumed = true;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    fn take_slot(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]))
    }

    fn put_slot(&mut self, v: Var, g: Option<Vec<T>>) {
        if let Some(g) = g {
            self.grads[v.0] = Some(g);
        }
    }

    /// Runs `f` with the gradient buffer of `v` when `v` needs one.
    fn with_slot(&mut self, v: Var, f: impl FnOnce(&Self, &mut [T])) {
        if let Some(mut buf) = self.take_slot(v) {
            f(self, &mut buf);
            self.grads[v.0] = Some(buf);
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.take_slot(*x);
                let mut dw = self.take_slot(*w);
                let mut db = b.and_then(|b| self.take_slot(b));
                conv::backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put_slot(*x, dx);
                self.put_slot(*w, dw);
                if let Some(b) = b {
                    self.put_slot(*b, db);
                }
            }
            Op::Pool2d { x, kind, window, stride, arg } => {
                let (b, c, h, w) = dims4("pool2d", "input", self.shape(*x)).expect("recorded shape");
                self.with_slot(*x, |_, dx| {
                    pool::pool_backward(g, arg, b * c, h, w, *window, *stride, *kind == PoolKind::Max, dx)
                });
            }
            Op::GlobalPool { x, kind, arg } => {
                let hw: usize = self.shape(*x)[2..].iter().product();
                self.with_slot(*x, |_, dx| {
                    for (p, &gv) in g.iter().enumerate() {
                        match kind {
                            PoolKind::Avg => {
                                let share = gv / T::from_f64(hw as f64);
                                dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = *d + share);
                            }
                            PoolKind::Max => {
                                let j = p * hw + arg[p] as usize;
                                dx[j] = dx[j] + gv;
                            }
                        }
                    }
                });
            }
            Op::Interp { x } => {
                let (b, c, h, w) = dims4("interp", "input", self.shape(*x)).expect("recorded shape");
                let (oh, ow) = (self.nodes[i].value.shape()[2], self.nodes[i].value.shape()[3]);
                self.with_slot(*x, |_, dx| interp::backward(g, b * c, h, w, oh, ow, dx));
            }
            Op::Linear { x, w, b } => {
                let (batch, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[0];
                self.with_slot(*x, |s, dx| {
                    gemm(batch, n, d, T::one(), (g, n, 1), (s.value(*w).data(), d, 1), T::one(), dx, d, 1)
                });
                self.with_slot(*w, |s, dw| {
                    gemm(n, batch, d, T::one(), (g, 1, n), (s.value(*x).data(), d, 1), T::one(), dw, d, 1)
                });
                if let Some(b) = b {
                    self.with_slot(*b, |_, db| {
                        for row in g.chunks_exact(n) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::Binary { kind, a, b, bc } => {
                let map = index_map(*bc, self.shape(*a));
                let kind = *kind;
                self.with_slot(*a, |s, da| match kind {
                    Binary::Add | Binary::Sub => add_into(da, g),
                    Binary::Mul => {
                        let bv = s.value(*b).data();
                        for (j, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                            *d = *d + gv * bv[map(j)];
                        }
                    }
                });
                self.with_slot(*b, |s, db| {
                    let av = s.value(*a).data();
                    for (j, &gv) in g.iter().enumerate() {
                        let k = map(j);
                        db[k] = match kind {
                            Binary::Add => db[k] + gv,
                            Binary::Sub => db[k] - gv,
                            Binary::Mul => db[k] + gv * av[j],
                        };
                    }
                });
            }
            Op::Unary { kind, x } => {
                let kind = *kind;
                let out = i;
                self.with_slot(*x, |s, dx| {
                    let xv = s.value(*x).data();
                    let yv = s.nodes[out].value.data();
                    for j in 0..dx.len() {
                        let local = match kind {
                            Unary::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LeakyRelu(sl) => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::from_f64(sl)
                                }
                            }
                            Unary::Sigmoid => yv[j] * (T::one() - yv[j]),
                            Unary::Abs => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else if xv[j] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Scale(c) => T::from_f64(c),
                        };
                        dx[j] = dx[j] + g[j] * local;
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let ch = |j: usize| (j / inner) % c;
                self.with_slot(*x, |s, dx| {
                    let sv = s.value(*scale).data();
                    for (j, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d = *d + gv * sv[ch(j)];
                    }
                });
                self.with_slot(*scale, |s, ds| {
                    let xv = s.value(*x).data();
                    for (j, &gv) in g.iter().enumerate() {
                        ds[ch(j)] = ds[ch(j)] + gv * xv[j];
                    }
                });
                self.with_slot(*shift, |_, dt| {
                    for (j, &gv) in g.iter().enumerate() {
                        dt[ch(j)] = dt[ch(j)] + gv;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let base = self.nodes[i].value.shape().to_vec();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let blk = self.shape(v)[*axis] * inner;
                    self.with_slot(v, |_, dv| {
                        for o in 0..outer {
                            add_into(&mut dv[o * blk..(o + 1) * blk], &g[o * total + offset..o * total + offset + blk]);
                        }
                    });
                    offset += blk;
                }
            }
            Op::Reshape { x } => self.with_slot(*x, |_, dx| add_into(dx, g)),
            Op::Diff { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[*axis];
                self.with_slot(*x, |_, dx| {
                    for o in 0..outer {
                        for j in 0..n - 1 {
                            let lo = (o * n + j) * inner;
                            let hi = lo + inner;
                            let gi = (o * (n - 1) + j) * inner;
                            for k in 0..inner {
                                dx[hi + k] = dx[hi + k] + g[gi + k];
                                dx[lo + k] = dx[lo + k] - g[gi + k];
                            }
                        }
                    }
                });
            }
            Op::Reduce { x, kind, out_strides } => {
                let shape = self.shape(*x).to_vec();
                let count = numel(&shape) / g.len();
                let inv = if *kind == ReduceKind::Mean { T::one() / T::from_f64(count as f64) } else { T::one() };
                self.with_slot(*x, |_, dx| {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d = *d + g[reduce_index(j, &shape, out_strides)] * inv;
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = self.shape(*logits)[1];
                self.with_slot(*logits, |_, dl| {
                    for (r, (&gv, &label)) in g.iter().zip(labels).enumerate() {
                        for c in 0..n {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            dl[r * n + c] = dl[r * n + c] + gv * (probs[r * n + c] - onehot);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

/// Index of the right-hand operand element paired with left element `i`.
fn index_map(bc: Broadcast, shape: &[usize]) -> impl Fn(usize) -> usize {
    let (c, hw) = if shape.len() == 4 { (shape[1], shape[2] * shape[3]) } else { (1, 1) };
    move |i| match bc {
        Broadcast::Same => i,
        Broadcast::Channel => i / hw,
        Broadcast::Spatial => (i / (c * hw)) * hw + i % hw,
    }
}
