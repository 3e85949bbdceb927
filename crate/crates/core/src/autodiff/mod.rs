//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices are
//! already a topological order and `backward` is a single reverse sweep.
//! Broadcasting is limited to per-channel bias addition and scalar operations;
//! everything else requires matching shapes.

mod gradcheck;

pub use gradcheck::{finite_diff_grad, relative_error};

use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvGeometry, Scalar, Tensor, TensorError,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation behaviour for one call.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value folded into running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogitsSum {
        logits: Var,
        target: Vec<T>,
    },
    SumAll(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Clamp(Var, T, T),
    RepeatRows(Var, usize),
    GroupSum(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// An operation tape. Values are computed eagerly as operations are recorded.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn require_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<(), TensorError> {
    if t.ndim() != rank {
        return Err(TensorError::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
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
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a `requires_grad` leaf after `backward`; `None` when the leaf
    /// was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the leaf was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            TensorError::shape("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()))
        })?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` (C) along axis 1 of `x` (N, C, ...).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.ndim() < 2 || bv.ndim() != 1 || xv.shape()[1] != bv.numel() {
            return Err(TensorError::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let c = bv.numel();
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        let out = self.value(x).map(|v| v + offset);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Logistic function. Outputs are kept strictly inside (0, 1) even where the
    /// exact value rounds to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let out = self.value(x).map(|v| sigmoid(v).max(lo).min(hi));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x), &[x])
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    // ---- linear algebra ---------------------------------------------------

    /// (m, k) · (k, n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank("matmul", av, 2)?;
        require_rank("matmul", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(TensorError::shape(
                "matmul",
                format!("inner extents {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k as isize, 1, bv.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` with `x` (N, in), `w` (out, in), `b` (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        require_rank("linear", xv, 2)?;
        require_rank("linear", wv, 2)?;
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        if wv.shape()[1] != fin {
            return Err(TensorError::shape(
                "linear",
                format!("input features {fin}, weight {:?}", wv.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, T::one(), xv.data(), fin as isize, 1, wv.data(), 1, fin as isize, T::zero(), &mut out, fout as isize, 1);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(TensorError::shape(
                    "linear",
                    format!("bias {:?} for {fout} outputs", bv.shape()),
                ));
            }
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        let out = Tensor::new(vec![n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    fn conv_operands(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        transpose: bool,
    ) -> Result<(usize, usize, usize, usize, usize), TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        require_rank(op, xv, 4)?;
        require_rank(op, wv, 4)?;
        let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (w_in, co) = if transpose {
            (wv.shape()[0], wv.shape()[1])
        } else {
            (wv.shape()[1], wv.shape()[0])
        };
        if w_in != ci || wv.shape()[2] != wv.shape()[3] {
            return Err(TensorError::shape(
                op,
                format!("input {:?} incompatible with weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(TensorError::shape(
                    op,
                    format!("bias {:?} for {co} output channels", self.value(b).shape()),
                ));
            }
        }
        Ok((n, ci, h, wd, co))
    }

    /// 2-d cross-correlation: `x` (N, Ci, H, W), `w` (Co, Ci, k, k).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (n, ci, h, wd, co) = self.conv_operands("conv2d", x, w, b, false)?;
        let k = self.value(w).shape()[2];
        let geom = ConvGeometry::new(k, stride, padding);
        let (out, oh, ow) = conv2d_forward(
            self.value(x).data(),
            n,
            ci,
            h,
            wd,
            self.value(w).data(),
            co,
            b.map(|b| self.value(b).data()),
            geom,
        )?;
        let out = Tensor::new(vec![n, co, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution: `x` (N, Ci, H, W), `w` (Ci, Co, k, k).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var, TensorError> {
        let (n, ci, h, wd, co) = self.conv_operands("conv_transpose2d", x, w, b, true)?;
        let k = self.value(w).shape()[2];
        let geom = ConvGeometry::new(k, stride, padding).with_output_padding(output_padding);
        let (out, oh, ow) = conv_transpose2d_forward(
            self.value(x).data(),
            n,
            ci,
            h,
            wd,
            self.value(w).data(),
            co,
            b.map(|b| self.value(b).data()),
            geom,
        )?;
        let out = Tensor::new(vec![n, co, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Batch normalisation over axis 1 of `x` (N, C) or (N, C, H, W).
    /// Training mode additionally returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(TensorError::shape("batch_norm", format!("input {:?}", xv.shape())));
        }
        let n = xv.shape()[0];
        let c = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(TensorError::shape(
                    "batch_norm",
                    format!("{what} {:?} for {c} channels", self.value(v).shape()),
                ));
            }
        }
        let count = n * inner;
        let data = xv.data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(TensorError::shape(
                        "batch_norm",
                        format!("training mode needs more than one value per channel, input {:?}", xv.shape()),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (i, chunk) in data.chunks(inner).enumerate() {
                    mean[i % c] += chunk.iter().copied().sum::<T>();
                }
                let cnt = T::of(count as f64);
                mean.iter_mut().for_each(|m| *m = *m / cnt);
                for (i, chunk) in data.chunks(inner).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                let unbiased: Vec<T> = var.iter().map(|&v| v / T::of((count - 1) as f64)).collect();
                var.iter_mut().for_each(|v| *v = *v / cnt);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape(
                        "batch_norm",
                        format!("running statistics of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for (i, (chunk, (xh, o))) in data
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, h), y) in chunk.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *y = g[ch] * *h + bt[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let train = stats.is_some();
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    // ---- reductions, losses ----------------------------------------------

    fn rows_cols(&self, op: &'static str, x: Var) -> Result<(usize, usize), TensorError> {
        let xv = self.value(x);
        require_rank(op, xv, 2)?;
        Ok((xv.shape()[0], xv.shape()[1]))
    }

    /// Softmax along the last axis of a (N, C) tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, c) = self.rows_cols("softmax", x)?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, c) = self.rows_cols("log_softmax", x)?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_row(row, o);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Mean categorical cross-entropy of (N, C) logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.rows_cols("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{n} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let xv = self.value(logits);
        let mut logp = vec![T::zero(); c];
        let mut probs = vec![T::zero(); xv.numel()];
        let mut total = T::zero();
        for ((row, p), &y) in xv.data().chunks(c).zip(probs.chunks_mut(c)).zip(labels) {
            log_softmax_row(row, &mut logp);
            total -= logp[y];
            p.iter_mut().zip(&logp).for_each(|(pp, &l)| *pp = l.exp());
        }
        let loss = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ BCE(sigmoid(logits), target)`, evaluated from the logits for stability.
    pub fn bce_with_logits_sum(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        same_shape("bce_with_logits_sum", self.value(logits), target)?;
        let mut total = T::zero();
        for (&z, &t) in self.value(logits).data().iter().zip(target.data()) {
            total += z.max(T::zero()) - t * z + (-z.abs()).exp().ln_1p();
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceLogitsSum {
                logits,
                target: target.data().to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    // ---- structural -------------------------------------------------------

    /// Flattens every input to (N, features) and concatenates along features.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let n = self.value(*first).batch();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).row_len()).collect();
        for p in parts {
            if self.value(*p).batch() != n || self.value(*p).ndim() < 2 {
                return Err(TensorError::shape(
                    "concat",
                    format!(
                        "batch extents differ: {:?} vs {:?}",
                        self.value(*first).shape(),
                        self.value(*p).shape()
                    ),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![n, total], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// (N, ...) -> (N, features)
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let shape = [v.batch(), v.row_len()];
        self.reshape(x, &shape)
    }

    /// Repeats every leading-axis row `times` times consecutively:
    /// row `b` becomes rows `b*times .. (b+1)*times`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.ndim() == 0 || times == 0 {
            return Err(TensorError::shape(
                "repeat_rows",
                format!("cannot repeat {:?} {times} times", v.shape()),
            ));
        }
        let len = v.row_len();
        let mut out = Vec::with_capacity(v.numel() * times);
        for row in v.data().chunks(len.max(1)) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] *= times;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::RepeatRows(x, times), &[x]))
    }

    /// Sums consecutive groups of `group` leading-axis rows:
    /// (B*group, ...) -> (B, ...).
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.ndim() == 0 || group == 0 || !v.batch().is_multiple_of(group) {
            return Err(TensorError::shape(
                "group_sum",
                format!("{:?} rows not divisible into groups of {group}", v.shape()),
            ));
        }
        let len = v.row_len();
        let b = v.batch() / group;
        let mut out = vec![T::zero(); b * len];
        for (i, row) in v.data().chunks(len).enumerate() {
            let dst = &mut out[(i / group) * len..(i / group + 1) * len];
            dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = b;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::GroupSum(x, group), &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        let seed = Tensor::ones(v.shape());
        self.backward_with_seed(loss, seed)
    }

    /// Reverse sweep seeded with an explicit output cotangent.
    pub fn backward_with_seed(&mut self, output: Var, seed: Tensor<T>) -> Result<(), TensorError> {
        if seed.shape() != self.value(output).shape() {
            return Err(TensorError::shape(
                "backward",
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, gy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, g: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(e, &v)| *e += v),
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape matches value"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, gy: Tensor<T>) -> Result<(), TensorError> {
        let gyd = gy.data();
        // Contributions are computed against immutable node data, then accumulated.
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gyd.to_vec()));
                out.push((*b, gyd.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gyd.to_vec()));
                out.push((*b, gyd.iter().map(|&g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, gyd.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, gyd.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::AddBias(x, b) => {
                out.push((*x, gyd.to_vec()));
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let inner: usize = self.value(*x).shape()[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    for (k, chunk) in gyd.chunks(inner).enumerate() {
                        gb[k % c] += chunk.iter().copied().sum::<T>();
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(x, f) => out.push((*x, gyd.iter().map(|&g| g * *f).collect())),
            Op::AddScalar(x) => out.push((*x, gyd.to_vec())),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gyd, n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, gyd, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, T::one(), gyd, fout as isize, 1, wv.data(), fin as isize, 1, T::zero(), &mut gx, fin as isize, 1);
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, T::one(), gyd, 1, fout as isize, xv.data(), fin as isize, 1, T::zero(), &mut gw, fin as isize, 1);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); fout];
                        for row in gyd.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(g, &r)| *g += r);
                        }
                        out.push((*b, gb));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } | Op::ConvTranspose2d { x, w, b, geom } => {
                let transpose = matches!(node.op, Op::ConvTranspose2d { .. });
                let (xv, wv) = (self.value(*x), self.value(*w));
                let s = xv.shape();
                let co = if transpose { wv.shape()[1] } else { wv.shape()[0] };
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let (gx, gw, gb) = if transpose {
                    conv_transpose2d_backward(xv.data(), s[0], s[1], s[2], s[3], wv.data(), co, *geom, gyd, want)?
                } else {
                    conv2d_backward(xv.data(), s[0], s[1], s[2], s[3], wv.data(), co, *geom, gyd, want)?
                };
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    out.push((*b, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                let count = T::of((xv.batch() * inner) as f64);
                let mut dbeta = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                for (k, (g, h)) in gyd.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    dbeta[k % c] += g.iter().copied().sum::<T>();
                    dgamma[k % c] += g.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>();
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![T::zero(); gyd.len()];
                    for (k, ((g, h), o)) in gyd
                        .chunks(inner)
                        .zip(xhat.chunks(inner))
                        .zip(gx.chunks_mut(inner))
                        .enumerate()
                    {
                        let ch = k % c;
                        let scale = gam[ch] * inv_std[ch];
                        if *train {
                            for ((&gv, &hv), ov) in g.iter().zip(h).zip(o.iter_mut()) {
                                *ov = scale / count * (count * gv - dbeta[ch] - hv * dgamma[ch]);
                            }
                        } else {
                            for (&gv, ov) in g.iter().zip(o.iter_mut()) {
                                *ov = scale * gv;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                out.push((
                    *x,
                    gyd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                        .collect(),
                ));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                out.push((
                    *x,
                    gyd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
                ));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                out.push((*x, gyd.iter().zip(y).map(|(&g, &e)| g * e).collect()));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                out.push((*x, gyd.iter().zip(xv).map(|(&g, &v)| g / v).collect()));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut gx = vec![T::zero(); gyd.len()];
                for ((g, s), o) in gyd.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = g.iter().zip(s).map(|(&a, &b)| a * b).sum();
                    for ((&gv, &sv), ov) in g.iter().zip(s).zip(o.iter_mut()) {
                        *ov = sv * (gv - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut gx = vec![T::zero(); gyd.len()];
                for ((g, l), o) in gyd.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: T = g.iter().copied().sum();
                    for ((&gv, &lv), ov) in g.iter().zip(l).zip(o.iter_mut()) {
                        *ov = gv - lv.exp() * total;
                    }
                }
                out.push((*x, gx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = gyd[0] / T::of(labels.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    gx[row * c + y] -= scale;
                }
                out.push((*logits, gx));
            }
            Op::BceLogitsSum { logits, target } => {
                let z = self.value(*logits).data();
                out.push((
                    *logits,
                    z.iter()
                        .zip(target)
                        .map(|(&zz, &t)| gyd[0] * (sigmoid(zz) - t))
                        .collect(),
                ));
            }
            Op::SumAll(x) => out.push((*x, vec![gyd[0]; self.value(*x).numel()])),
            Op::Concat(parts) => {
                let n = node.value.batch();
                let total = node.value.row_len();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).row_len();
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&gyd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((*p, gp));
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => out.push((*x, gyd.to_vec())),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                out.push((
                    *x,
                    gyd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::RepeatRows(x, times) => {
                let len = self.value(*x).row_len();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (r, row) in gyd.chunks(len.max(1)).enumerate() {
                    let dst = &mut gx[(r / times) * len..(r / times + 1) * len];
                    dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
                out.push((*x, gx));
            }
            Op::GroupSum(x, group) => {
                let len = node.value.row_len();
                let rows = self.value(*x).batch();
                let mut gx = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    gx.extend_from_slice(&gyd[(r / group) * len..(r / group + 1) * len]);
                }
                out.push((*x, gx));
            }
        }
        for (target, g) in out {
            self.accumulate(target, g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        assert_eq!(
            g.backward(x).unwrap_err(),
            TensorError::NonScalarLoss { shape: vec![3] }
        );
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let y = g.leaf(Tensor::ones(&[3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.grad_or_zeros(y).data(), &[0.0; 3]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[-1.0, 3.0]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[-0.2, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 5]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_output_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let w = g.constant(Tensor::zeros(&[6, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 6, 16, 16]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.mul(a, b).unwrap_err() {
            TensorError::Shape { op, detail } => {
                assert_eq!(op, "mul");
                assert!(detail.contains("[2, 3]") && detail.contains("[3, 2]"));
            }
            e => panic!("unexpected {e:?}"),
        }
        let w = g.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(g.linear(a, w, None), Err(TensorError::Shape { op: "linear", .. })));
    }

    #[test]
    fn eval_batch_norm_is_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| (i % 8) as f32 * 0.3));
        let gamma = g.constant(Tensor::from_f64(&[2], &[1.5, -0.5]).unwrap());
        let beta = g.constant(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
        let mode = BatchNormMode::Eval {
            mean: &[0.2, 0.4],
            var: &[1.0, 2.0],
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, mode, 1e-5).unwrap();
        assert!(stats.is_none());
        let v = g.value(y).data();
        // Both samples carry identical values, so both halves must be bitwise equal.
        assert_eq!(&v[..8], &v[8..]);
    }
}
