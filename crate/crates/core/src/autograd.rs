//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its output
//! value and enough information to run its backward rule. Inputs always live
//! at smaller indices than outputs, so a single reverse sweep is a valid
//! topological traversal.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    ScaleByElement {
        x: Var,
        weights: Var,
        index: usize,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recording tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn rank2(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(format!("{what} expects a rank-2 tensor, got {s:?}"))),
    }
}

/// Zero-padded "same" segment boundaries for adaptive average pooling.
pub fn pool_segments(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|s| (s * len / n, ((s + 1) * len).div_ceil(n)))
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2(self.value(a), "matmul")?;
        let (k2, n) = rank2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// `x·w + b` with `x: [r, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds `b: [n]` to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    /// `x·sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x), &[x])
    }

    /// Gated linear unit over the last axis: `first_half ⊙ sigmoid(second_half)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let two_d = vx.last_dim();
        if !two_d.is_multiple_of(2) {
            return Err(Error::dim(format!(
                "glu needs an even last axis, got {:?}",
                vx.shape()
            )));
        }
        let d = two_d / 2;
        let data = vx
            .data()
            .chunks_exact(two_d)
            .flat_map(|row| {
                let (a, b) = row.split_at(d);
                a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b))
            })
            .collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Glu(x), &[x]))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total = total + e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / total;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last axis of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[i] * h + b[i]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- convolutions --------------------------------------------------

    /// Same-padded 2-D cross-correlation, `x: [C_in, H, W]`,
    /// `kernel: [C_out, C_in, kh, kw]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ci, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::dim(format!("conv2d input must be [C,H,W], got {s:?}"))),
        };
        let (co, kci, kh, kw) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(Error::dim(format!(
                    "conv2d kernel must be [C_out,C_in,kh,kw], got {s:?}"
                )))
            }
        };
        if kci != ci {
            return Err(Error::dim(format!(
                "conv2d kernel {:?} does not match input channels of {:?}",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!(
                "conv2d same padding needs odd kernel sides, got {kh}x{kw}"
            )));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        if kh > 2 * (h + 2 * ph) || kw > 2 * (w + 2 * pw) {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than twice the padded input {h}x{w}"
            )));
        }
        if self.shape(bias) != [co] {
            return Err(Error::dim(format!(
                "conv2d bias {:?} does not match {co} output channels",
                self.shape(bias)
            )));
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![T::zero(); co * h * w];
        for o in 0..co {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let k = kd[((o * ci + c) * kh + i) * kw + j];
                        if k == T::zero() {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y + i;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let src = &xd[(c * h + sy - ph) * w..(c * h + sy - ph + 1) * w];
                            let dst = &mut plane[y * w..(y + 1) * w];
                            let (lo, hi) = (pw.saturating_sub(j), (w + pw - j).min(w));
                            for xo in lo..hi {
                                dst[xo] = dst[xo] + k * src[xo + j - pw];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([co, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }, &[x, kernel, bias]))
    }

    /// Same-padded per-channel convolution over time, `x: [T, d]`, `kernel: [d, k]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, d) = rank2(self.value(x), "depthwise_conv1d")?;
        let (kd, k) = rank2(self.value(kernel), "depthwise_conv1d kernel")?;
        if kd != d {
            return Err(Error::dim(format!(
                "depthwise kernel {:?} does not match channels of {:?}",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        if k % 2 == 0 {
            return Err(Error::dim(format!("depthwise kernel width {k} must be odd")));
        }
        let p = k / 2;
        let xd = self.value(x).data();
        let kw = self.value(kernel).data();
        let mut out = vec![T::zero(); t * d];
        for ti in 0..t {
            for j in 0..k {
                let src = ti + j;
                if src < p || src - p >= t {
                    continue;
                }
                let s = src - p;
                for c in 0..d {
                    out[ti * d + c] = out[ti * d + c] + xd[s * d + c] * kw[c * k + j];
                }
            }
        }
        let value = Tensor::new([t, d], out)?;
        Ok(self.push(value, Op::DepthwiseConv1d { x, kernel }, &[x, kernel]))
    }

    /// Zero-padded temporal im2col: `[T, d] -> [T', kernel·d]` with padding
    /// `kernel / 2` and `T' = (T - 1) / stride + 1`.
    pub fn unfold_time(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, d) = rank2(self.value(x), "unfold_time")?;
        if kernel.is_multiple_of(2) || stride == 0 {
            return Err(Error::dim(format!(
                "unfold_time needs an odd kernel and positive stride, got {kernel}/{stride}"
            )));
        }
        let p = kernel / 2;
        let t_out = (t - 1) / stride + 1;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); t_out * kernel * d];
        for j in 0..t_out {
            for i in 0..kernel {
                let src = j * stride + i;
                if src < p || src - p >= t {
                    continue;
                }
                let s = src - p;
                out[(j * kernel + i) * d..(j * kernel + i + 1) * d].copy_from_slice(&xd[s * d..(s + 1) * d]);
            }
        }
        let value = Tensor::new([t_out, kernel * d], out)?;
        Ok(self.push(value, Op::Unfold { x, kernel, stride }, &[x]))
    }

    // ---- structural ----------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let xd = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| xd[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let value = Tensor::new([r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let (r, _) = rank2(self.value(first), "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = rank2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::dim(format!(
                    "concat_cols row mismatch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new([r, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let (_, c) = rank2(self.value(first), "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = rank2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::dim(format!(
                    "concat_rows column mismatch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows `index` of `x: [R, C]` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = rank2(self.value(x), "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!(
                "row {bad} out of range for {:?}",
                self.shape(x)
            )));
        }
        let vx = self.value(x);
        let data = index.iter().flat_map(|&i| vx.row(i).iter().copied()).collect();
        let value = Tensor::new([index.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Adaptive average pooling of `x: [T, C]` into `n` row segments.
    pub fn segment_mean(&mut self, x: Var, n: usize) -> Result<Var> {
        let (t, c) = rank2(self.value(x), "segment_mean")?;
        if n == 0 || t < n {
            return Err(Error::dim(format!("cannot pool {t} frames into {n} segments")));
        }
        let segments = pool_segments(t, n);
        let vx = self.value(x);
        let mut data = vec![T::zero(); n * c];
        for (s, &(lo, hi)) in segments.iter().enumerate() {
            let inv = T::one() / T::of((hi - lo) as f64);
            for i in lo..hi {
                for (o, &v) in data[s * c..(s + 1) * c].iter_mut().zip(vx.row(i)) {
                    *o = *o + v;
                }
            }
            for o in &mut data[s * c..(s + 1) * c] {
                *o = *o * inv;
            }
        }
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, Op::SegmentMean { x, segments }, &[x]))
    }

    /// Multiplies `x` by the single element `weights[index]`.
    pub fn scale_by_element(&mut self, x: Var, weights: Var, index: usize) -> Result<Var> {
        let w = *self.value(weights).data().get(index).ok_or_else(|| {
            Error::dim(format!(
                "element {index} out of range for {:?}",
                self.shape(weights)
            ))
        })?;
        let value = self.value(x).map(|v| v * w);
        Ok(self.push(value, Op::ScaleByElement { x, weights, index }, &[x, weights]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("stack of nothing"))?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::dim(format!(
                    "stack shape mismatch: {inner:?} vs {:?}",
                    self.shape(p)
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::scalar(vx.sum() / T::of(vx.numel() as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = rank2(self.value(logits), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let vl = self.value(logits);
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &label) in vl.data().chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total = total + log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(total / T::of(b as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf if n.requires_grad => Some(g.unwrap_or_else(|| vec![T::zero(); n.value.numel()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dC·Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::one(),
                        da,
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB = Aᵀ·dC
                    T::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        db,
                    );
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
                let n = y.last_dim();
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    let vb = self.value(*b).data();
                    for ((d, &g), &o) in da.iter_mut().zip(g).zip(vb) {
                        *d = *d + g * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let va = self.value(*a).data();
                    for ((d, &g), &o) in db.iter_mut().zip(g).zip(va) {
                        *d = *d + g * o;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *f);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let vx = self.value(*x).data();
                    for ((d, &g), &v) in dx.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Swish(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let vx = self.value(*x).data();
                    for ((d, &g), &v) in dx.iter_mut().zip(g).zip(vx) {
                        let s = sigmoid(v);
                        *d = *d + g * (s + v * s * (T::one() - s));
                    }
                }
            }
            Op::Glu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let vx = self.value(*x).data();
                    let two_d = self.value(*x).last_dim();
                    let dd = two_d / 2;
                    for ((dx_row, x_row), g_row) in dx
                        .chunks_exact_mut(two_d)
                        .zip(vx.chunks_exact(two_d))
                        .zip(g.chunks_exact(dd))
                    {
                        for i in 0..dd {
                            let a = x_row[i];
                            let s = sigmoid(x_row[dd + i]);
                            dx_row[i] = dx_row[i] + g_row[i] * s;
                            dx_row[dd + i] = dx_row[dd + i] + g_row[i] * a * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = y.last_dim();
                    for ((dx_row, y_row), g_row) in dx
                        .chunks_exact_mut(n)
                        .zip(y.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: T = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                        for i in 0..n {
                            dx_row[i] = dx_row[i] + y_row[i] * (g_row[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.last_dim();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (g_row, h_row) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for i in 0..d {
                            dg[i] = dg[i] + g_row[i] * h_row[i];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for g_row in g.chunks_exact(d) {
                        db.iter_mut().zip(g_row).for_each(|(d, &g)| *d = *d + g);
                    }
                }
                let gam = self.value(*gamma).data();
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = T::one() / T::of(d as f64);
                    for (r, ((dx_row, g_row), h_row)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for i in 0..d {
                            let dh = g_row[i] * gam[i];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h_row[i];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for i in 0..d {
                            let dh = g_row[i] * gam[i];
                            dx_row[i] = dx_row[i] + rstd[r] * (dh - mean_dh - h_row[i] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, bias } => {
                let (ci, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let ks = self.shape(*kernel);
                let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                if let Some(db) = self.slot(grads, *bias) {
                    for o in 0..co {
                        db[o] = db[o] + g[o * h * w..(o + 1) * h * w].iter().copied().sum();
                    }
                }
                let xd = self.value(*x).data();
                let kd = self.value(*kernel).data();
                // Shared loop nest: visits every (output, tap, input) triple once.
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for o in 0..co {
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ki = ((o * ci + c) * kh + i) * kw + j;
                                    for yy in 0..h {
                                        let sy = yy + i;
                                        if sy < ph || sy - ph >= h {
                                            continue;
                                        }
                                        let (lo, hi) = (pw.saturating_sub(j), (w + pw - j).min(w));
                                        for xo in lo..hi {
                                            let xi = (c * h + sy - ph) * w + xo + j - pw;
                                            f(ki, o * h * w + yy * w + xo, xi);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                if let Some(dk) = self.slot(grads, *kernel) {
                    visit(&mut |ki, oi, xi| dk[ki] = dk[ki] + g[oi] * xd[xi]);
                }
                if let Some(dx) = self.slot(grads, *x) {
                    visit(&mut |ki, oi, xi| dx[xi] = dx[xi] + g[oi] * kd[ki]);
                }
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*kernel)[1];
                let p = k / 2;
                let xd = self.value(*x).data();
                let kw = self.value(*kernel).data();
                if let Some(dk) = self.slot(grads, *kernel) {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti + j;
                            if src < p || src - p >= t {
                                continue;
                            }
                            let s = src - p;
                            for c in 0..d {
                                dk[c * k + j] = dk[c * k + j] + g[ti * d + c] * xd[s * d + c];
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti + j;
                            if src < p || src - p >= t {
                                continue;
                            }
                            let s = src - p;
                            for c in 0..d {
                                dx[s * d + c] = dx[s * d + c] + g[ti * d + c] * kw[c * k + j];
                            }
                        }
                    }
                }
            }
            Op::Unfold { x, kernel, stride } => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let p = kernel / 2;
                let t_out = y.shape()[0];
                if let Some(dx) = self.slot(grads, *x) {
                    for j in 0..t_out {
                        for i in 0..*kernel {
                            let src = j * stride + i;
                            if src < p || src - p >= t {
                                continue;
                            }
                            let s = src - p;
                            let gi = &g[(j * kernel + i) * d..(j * kernel + i + 1) * d];
                            for (dv, &gv) in dx[s * d..(s + 1) * d].iter_mut().zip(gi) {
                                *dv = *dv + gv;
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = y.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, g_row) in g.chunks_exact(len).enumerate() {
                        for (d, &gv) in dx[i * c + start..i * c + start + len].iter_mut().zip(g_row) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if let Some(dp) = self.slot(grads, *p) {
                        for (i, dp_row) in dp.chunks_exact_mut(pc).enumerate() {
                            let src = &g[i * total + offset..i * total + offset + pc];
                            dp_row.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(dp) = self.slot(grads, *p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &g)| *d = *d + g);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let c = y.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &i) in index.iter().enumerate() {
                        for (d, &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let c = y.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (s, &(lo, hi)) in segments.iter().enumerate() {
                        let inv = T::one() / T::of((hi - lo) as f64);
                        for i in lo..hi {
                            for (d, &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                                *d = *d + gv * inv;
                            }
                        }
                    }
                }
            }
            Op::ScaleByElement { x, weights, index } => {
                let w = self.value(*weights).data()[*index];
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * w);
                }
                if let Some(dw) = self.slot(grads, *weights) {
                    let vx = self.value(*x).data();
                    let dot: T = vx.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    dw[*index] = dw[*index] + dot;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = g[0] / T::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let c = self.shape(*logits)[1];
                    let s = g[0] / T::of(labels.len() as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            dl[r * c + j] = dl[r * c + j] + s * (probs[r * c + j] - target);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to every gradient-tracking leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// The gradient of `leaf`; zeros when the leaf was unreachable from the loss.
    /// `None` for non-leaves and leaves without gradient tracking.
    pub fn get(&self, leaf: Var) -> Option<&[T]> {
        self.grads.get(leaf.0)?.as_deref()
    }

    pub fn take(&mut self, leaf: Var) -> Option<Vec<T>> {
        self.grads.get_mut(leaf.0)?.take()
    }
}
