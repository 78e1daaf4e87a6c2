//! Differentiable primitives. Each op validates shapes, computes its forward
//! value, and records whatever its backward rule needs.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{accumulate, Graph, Node, Var};
use super::Tensor;

pub(crate) enum Op {
    Leaf,
    /// `b` either matches `a` or broadcasts over `a`'s leading axis.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu(Var, f64),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropyRows {
        logits: Var,
        target: Var,
        log_probs: Vec<f64>,
    },
    Mse(Var, Var),
    Mean(Var),
    Sum(Var),
    Maximum(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Mse(a, b) | Op::Maximum(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Transpose(a) | Op::Reshape(a) => vec![*a],
            Op::LeakyRelu(a, _) | Op::Dropout(a, _) | Op::Softmax(a) | Op::LogSoftmax(a) => {
                vec![*a]
            }
            Op::Mean(a) | Op::Sum(a) => vec![*a],
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropyRows { logits, target, .. } => vec![*logits, *target],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. } => vec![*x],
        }
    }
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the quantity folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (a.len() == b.len() + 1 && &a[1..] == b)
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

impl Graph {
    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .chunks(tb.len().max(1))
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `(m, k) × (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape("transpose", ta.shape(), &[]));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_data(ta.data(), r, c))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Stride-1 1-D convolution. `x: (B, Cin, L)`, `w: (Cout, Cin, K)`,
    /// optional `b: (Cout)`; output length `L + 2·padding − K + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        if len + 2 * padding < k {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        let lout = len + 2 * padding - k + 1;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv1d", tw.shape(), self.value(b).shape()));
            }
        }
        let dims = ConvDims {
            bsz,
            cin,
            cout,
            len,
            k,
            lout,
            padding,
        };
        let mut out = vec![0.0; bsz * cout * lout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, i) in out.chunks_mut(lout).zip(0..) {
                chunk.fill(bias[i % cout]);
            }
        }
        conv1d_kernel(tx.data(), tw.data(), &mut out, &dims);
        let out = Tensor::new(vec![bsz, cout, lout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b, padding }))
    }

    /// Stride-1 transposed 1-D convolution. `x: (B, Cin, L)`, `w: (Cin, Cout, K)`,
    /// optional `b: (Cout)`; output length `L + K − 1 − 2·padding`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tx.shape()[1] != tw.shape()[0] {
            return Err(Error::shape("conv_transpose1d", tx.shape(), tw.shape()));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[1], tw.shape()[2]);
        if len + k - 1 <= 2 * padding {
            return Err(Error::shape("conv_transpose1d", tx.shape(), tw.shape()));
        }
        let lout = len + k - 1 - 2 * padding;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv_transpose1d",
                    tw.shape(),
                    self.value(b).shape(),
                ));
            }
        }
        let dims = ConvDims {
            bsz,
            cin,
            cout,
            len,
            k,
            lout,
            padding,
        };
        let mut out = vec![0.0; bsz * cout * lout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, i) in out.chunks_mut(lout).zip(0..) {
                chunk.fill(bias[i % cout]);
            }
        }
        conv_transpose1d_kernel(tx.data(), tw.data(), &mut out, &dims);
        let out = Tensor::new(vec![bsz, cout, lout], out)?;
        Ok(self.push(out, Op::ConvTranspose1d { x, w, b, padding }))
    }

    /// Train-mode batch norm over `(B, C, L)`: normalizes each channel with the
    /// biased batch variance and returns the statistics for running-stat updates.
    pub fn batch_norm1d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (bsz, c, len) = self.bn_dims(x, gamma, beta)?;
        let tx = self.value(x).data();
        let n = (bsz * len) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let mut s = 0.0;
            for b in 0..bsz {
                s += tx[(b * c + ch) * len..(b * c + ch + 1) * len]
                    .iter()
                    .sum::<f64>();
            }
            *m = s / n;
            let mut ss = 0.0;
            for b in 0..bsz {
                ss += tx[(b * c + ch) * len..(b * c + ch + 1) * len]
                    .iter()
                    .map(|&x| (x - *m) * (x - *m))
                    .sum::<f64>();
            }
            *v = ss / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var_unbiased = var
            .iter()
            .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
            .collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true, (bsz, c, len))?;
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != dims.1 || running_var.len() != dims.1 {
            return Err(Error::shape(
                "batch_norm1d",
                &[dims.1],
                &[running_mean.len(), running_var.len()],
            ));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false, dims)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape("batch_norm1d", tx.shape(), &[]));
        }
        let c = tx.shape()[1];
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm1d",
                    tx.shape(),
                    self.value(p).shape(),
                ));
            }
        }
        Ok((tx.shape()[0], c, tx.shape()[2]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
        (bsz, c, len): (usize, usize, usize),
    ) -> Result<Var> {
        let tx = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * len;
                for l in off..off + len {
                    let h = (tx[l] - mean[ch]) * inv_std[ch];
                    xhat[l] = h;
                    out[l] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(vec![bsz, c, len], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Inverted dropout. In train mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1 − rate)`; in eval mode this is
    /// the identity and returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if !train {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = super::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let k = out.last_dim();
        for row in out.data_mut().chunks_mut(k) {
            log_softmax_in_place(row);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Per-row soft-target cross-entropy `−Σ_j target_j · log_softmax(logits)_j`,
    /// shape `(B)`.
    pub fn cross_entropy_rows(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(target));
        if tl.rank() != 2 || tl.shape() != tt.shape() {
            return Err(Error::shape("cross_entropy", tl.shape(), tt.shape()));
        }
        let k = tl.shape()[1];
        let mut log_probs = tl.data().to_vec();
        for row in log_probs.chunks_mut(k) {
            log_softmax_in_place(row);
        }
        let losses: Vec<f64> = log_probs
            .chunks(k)
            .zip(tt.rows())
            .map(|(lp, t)| -lp.iter().zip(t).map(|(l, t)| l * t).sum::<f64>())
            .collect();
        let out = Tensor::from_vec(losses);
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                target,
                log_probs,
            },
        ))
    }

    /// Soft-target cross-entropy averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, target)?;
        Ok(self.mean(rows))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let n = ta.len().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("maximum", self.shape(a), self.shape(b)));
        }
        let out = self.elementwise("maximum", a, b, f64::max)?;
        Ok(self.push(out, Op::Maximum(a, b)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let t = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&t[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }
}

pub(crate) struct ConvDims {
    pub bsz: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub k: usize,
    pub lout: usize,
    pub padding: usize,
}

impl ConvDims {
    /// Output positions `t` for which input index `t + j − padding` is in range.
    fn valid_range(&self, j: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(j);
        let hi = (self.len + self.padding).saturating_sub(j).min(self.lout);
        (lo, hi.max(lo))
    }
}

/// `out[b,o,t] += Σ_i Σ_j w[o,i,j] · x[b,i,t+j−p]`, summed in (i, j) order.
pub(crate) fn conv1d_kernel(x: &[f64], w: &[f64], out: &mut [f64], d: &ConvDims) {
    for b in 0..d.bsz {
        for o in 0..d.cout {
            let y = &mut out[(b * d.cout + o) * d.lout..(b * d.cout + o + 1) * d.lout];
            for i in 0..d.cin {
                let xr = &x[(b * d.cin + i) * d.len..(b * d.cin + i + 1) * d.len];
                for j in 0..d.k {
                    let wv = w[(o * d.cin + i) * d.k + j];
                    let (lo, hi) = d.valid_range(j);
                    let shift = lo + j - d.padding;
                    for (yt, xv) in y[lo..hi].iter_mut().zip(&xr[shift..]) {
                        *yt += wv * xv;
                    }
                }
            }
        }
    }
}

/// `out[b,o,s+j−p] += Σ_i x[b,i,s] · w[i,o,j]`.
fn conv_transpose1d_kernel(x: &[f64], w: &[f64], out: &mut [f64], d: &ConvDims) {
    // Scatter form of a transposed convolution; output t = s + j − p.
    for b in 0..d.bsz {
        for o in 0..d.cout {
            let y = &mut out[(b * d.cout + o) * d.lout..(b * d.cout + o + 1) * d.lout];
            for i in 0..d.cin {
                let xr = &x[(b * d.cin + i) * d.len..(b * d.cin + i + 1) * d.len];
                for j in 0..d.k {
                    let wv = w[(i * d.cout + o) * d.k + j];
                    // s ranges over inputs with 0 <= s + j − p < lout
                    let s_lo = d.padding.saturating_sub(j);
                    let s_hi = (d.lout + d.padding).saturating_sub(j).min(d.len);
                    if s_hi <= s_lo {
                        continue;
                    }
                    let t_lo = s_lo + j - d.padding;
                    for (yt, xv) in y[t_lo..].iter_mut().zip(&xr[s_lo..s_hi]) {
                        *yt += wv * xv;
                    }
                }
            }
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn add_reduced(buf: &mut [f64], g: &[f64], sign: f64) {
    for chunk in g.chunks(buf.len()) {
        for (o, gv) in buf.iter_mut().zip(chunk) {
            *o += sign * gv;
        }
    }
}

/// Dot product with four independent partial sums so several multiply-adds
/// can be in flight at once. The summation order is fixed.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

pub(crate) fn backward_node(graph: &Graph, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| graph.value(v);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(graph, grads, *a, |buf| add_reduced(buf, g, 1.0));
            accumulate(graph, grads, *b, |buf| add_reduced(buf, g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(graph, grads, *a, |buf| add_reduced(buf, g, 1.0));
            accumulate(graph, grads, *b, |buf| add_reduced(buf, g, -1.0));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            let nb = tb.len();
            accumulate(graph, grads, *a, |buf| {
                for (oc, gc) in buf.chunks_mut(nb).zip(g.chunks(nb)) {
                    for ((o, gv), bv) in oc.iter_mut().zip(gc).zip(tb) {
                        *o += gv * bv;
                    }
                }
            });
            accumulate(graph, grads, *b, |buf| {
                for (gc, ac) in g.chunks(nb).zip(ta.chunks(nb)) {
                    for ((o, gv), av) in buf.iter_mut().zip(gc).zip(ac) {
                        *o += gv * av;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(graph, grads, *a, |buf| {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += c * gv;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            // dA = dY · Bᵀ
            accumulate(graph, grads, *a, |buf| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let br = &tb.data()[p * n..(p + 1) * n];
                        buf[i * k + p] += dot(gr, br);
                    }
                }
            });
            // dB = Aᵀ · dY
            accumulate(graph, grads, *b, |buf| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, gv) in buf[p * n..(p + 1) * n].iter_mut().zip(gr) {
                            *o += av * gv;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let t = transpose_data(g, s[0], s[1]);
            accumulate(graph, grads, *a, |buf| {
                for (o, gv) in buf.iter_mut().zip(&t) {
                    *o += gv;
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(graph, grads, *a, |buf| {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                }
            });
        }
        Op::Conv1d { x, w, b, padding } => {
            let (tx, tw) = (val(*x), val(*w));
            let d = ConvDims {
                bsz: tx.shape()[0],
                cin: tx.shape()[1],
                len: tx.shape()[2],
                cout: tw.shape()[0],
                k: tw.shape()[2],
                lout: node.value.shape()[2],
                padding: *padding,
            };
            accumulate(graph, grads, *x, |buf| {
                for bb in 0..d.bsz {
                    for o in 0..d.cout {
                        let gy = &g[(bb * d.cout + o) * d.lout..(bb * d.cout + o + 1) * d.lout];
                        for i in 0..d.cin {
                            let dx =
                                &mut buf[(bb * d.cin + i) * d.len..(bb * d.cin + i + 1) * d.len];
                            for j in 0..d.k {
                                let wv = tw.data()[(o * d.cin + i) * d.k + j];
                                let (lo, hi) = d.valid_range(j);
                                let shift = lo + j - d.padding;
                                for (dxs, gv) in dx[shift..].iter_mut().zip(&gy[lo..hi]) {
                                    *dxs += wv * gv;
                                }
                            }
                        }
                    }
                }
            });
            accumulate(graph, grads, *w, |buf| {
                for bb in 0..d.bsz {
                    for o in 0..d.cout {
                        let gy = &g[(bb * d.cout + o) * d.lout..(bb * d.cout + o + 1) * d.lout];
                        for i in 0..d.cin {
                            let xr =
                                &tx.data()[(bb * d.cin + i) * d.len..(bb * d.cin + i + 1) * d.len];
                            for j in 0..d.k {
                                let (lo, hi) = d.valid_range(j);
                                let shift = lo + j - d.padding;
                                let s = dot(&gy[lo..hi], &xr[shift..]);
                                buf[(o * d.cin + i) * d.k + j] += s;
                            }
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(graph, grads, *b, |buf| {
                    for (chunk, idx) in g.chunks(d.lout).zip(0..) {
                        buf[idx % d.cout] += chunk.iter().sum::<f64>();
                    }
                });
            }
        }
        Op::ConvTranspose1d { x, w, b, padding } => {
            let (tx, tw) = (val(*x), val(*w));
            let d = ConvDims {
                bsz: tx.shape()[0],
                cin: tx.shape()[1],
                len: tx.shape()[2],
                cout: tw.shape()[1],
                k: tw.shape()[2],
                lout: node.value.shape()[2],
                padding: *padding,
            };
            let range = |j: usize| {
                let s_lo = d.padding.saturating_sub(j);
                let s_hi = (d.lout + d.padding).saturating_sub(j).min(d.len);
                (s_lo, s_hi.max(s_lo))
            };
            accumulate(graph, grads, *x, |buf| {
                for bb in 0..d.bsz {
                    for o in 0..d.cout {
                        let gy = &g[(bb * d.cout + o) * d.lout..(bb * d.cout + o + 1) * d.lout];
                        for i in 0..d.cin {
                            let dx =
                                &mut buf[(bb * d.cin + i) * d.len..(bb * d.cin + i + 1) * d.len];
                            for j in 0..d.k {
                                let wv = tw.data()[(i * d.cout + o) * d.k + j];
                                let (s_lo, s_hi) = range(j);
                                if s_hi == s_lo {
                                    continue;
                                }
                                let t_lo = s_lo + j - d.padding;
                                for (dxs, gv) in dx[s_lo..s_hi].iter_mut().zip(&gy[t_lo..]) {
                                    *dxs += wv * gv;
                                }
                            }
                        }
                    }
                }
            });
            accumulate(graph, grads, *w, |buf| {
                for bb in 0..d.bsz {
                    for o in 0..d.cout {
                        let gy = &g[(bb * d.cout + o) * d.lout..(bb * d.cout + o + 1) * d.lout];
                        for i in 0..d.cin {
                            let xr =
                                &tx.data()[(bb * d.cin + i) * d.len..(bb * d.cin + i + 1) * d.len];
                            for j in 0..d.k {
                                let (s_lo, s_hi) = range(j);
                                if s_hi == s_lo {
                                    continue;
                                }
                                let t_lo = s_lo + j - d.padding;
                                let s = dot(&xr[s_lo..s_hi], &gy[t_lo..]);
                                buf[(i * d.cout + o) * d.k + j] += s;
                            }
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(graph, grads, *b, |buf| {
                    for (chunk, idx) in g.chunks(d.lout).zip(0..) {
                        buf[idx % d.cout] += chunk.iter().sum::<f64>();
                    }
                });
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = node.value.shape();
            let (bsz, c, len) = (s[0], s[1], s[2]);
            let gm = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bb in 0..bsz {
                for ch in 0..c {
                    let off = (bb * c + ch) * len;
                    for l in off..off + len {
                        dgamma[ch] += g[l] * xhat[l];
                        dbeta[ch] += g[l];
                    }
                }
            }
            accumulate(graph, grads, *x, |buf| {
                let n = (bsz * len) as f64;
                for bb in 0..bsz {
                    for ch in 0..c {
                        let off = (bb * c + ch) * len;
                        let scale = gm[ch] * inv_std[ch];
                        for l in off..off + len {
                            buf[l] += if *batch_stats {
                                // dgamma/dbeta already hold Σ dy·x̂ and Σ dy for this channel
                                scale * (g[l] - dbeta[ch] / n - xhat[l] * dgamma[ch] / n)
                            } else {
                                scale * g[l]
                            };
                        }
                    }
                }
            });
            accumulate(graph, grads, *gamma, |buf| {
                for (o, d) in buf.iter_mut().zip(&dgamma) {
                    *o += d;
                }
            });
            accumulate(graph, grads, *beta, |buf| {
                for (o, d) in buf.iter_mut().zip(&dbeta) {
                    *o += d;
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let ta = val(*a).data();
            accumulate(graph, grads, *a, |buf| {
                for ((o, gv), x) in buf.iter_mut().zip(g).zip(ta) {
                    *o += if *x > 0.0 { *gv } else { slope * gv };
                }
            });
        }
        Op::Dropout(a, mask) => {
            accumulate(graph, grads, *a, |buf| {
                for ((o, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let k = node.value.last_dim();
            accumulate(graph, grads, *a, |buf| {
                for ((o, gr), yr) in buf.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((ov, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *ov += yv * (gv - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let k = node.value.last_dim();
            accumulate(graph, grads, *a, |buf| {
                for ((o, gr), yr) in buf.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let total: f64 = gr.iter().sum();
                    for ((ov, gv), lv) in o.iter_mut().zip(gr).zip(yr) {
                        *ov += gv - lv.exp() * total;
                    }
                }
            });
        }
        Op::CrossEntropyRows {
            logits,
            target,
            log_probs,
        } => {
            let tt = val(*target).data();
            let k = val(*logits).shape()[1];
            accumulate(graph, grads, *logits, |buf| {
                for (row, gv) in g.iter().enumerate() {
                    let t = &tt[row * k..(row + 1) * k];
                    let lp = &log_probs[row * k..(row + 1) * k];
                    let tsum: f64 = t.iter().sum();
                    for j in 0..k {
                        buf[row * k + j] += gv * (lp[j].exp() * tsum - t[j]);
                    }
                }
            });
            accumulate(graph, grads, *target, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o -= g[i / k] * log_probs[i];
                }
            });
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            let c = 2.0 * g[0] / ta.len().max(1) as f64;
            accumulate(graph, grads, *a, |buf| {
                for ((o, x), y) in buf.iter_mut().zip(ta).zip(tb) {
                    *o += c * (x - y);
                }
            });
            accumulate(graph, grads, *b, |buf| {
                for ((o, x), y) in buf.iter_mut().zip(ta).zip(tb) {
                    *o -= c * (x - y);
                }
            });
        }
        Op::Mean(a) => {
            let c = g[0] / val(*a).len().max(1) as f64;
            accumulate(graph, grads, *a, |buf| buf.iter_mut().for_each(|o| *o += c));
        }
        Op::Sum(a) => {
            accumulate(graph, grads, *a, |buf| {
                buf.iter_mut().for_each(|o| *o += g[0])
            });
        }
        Op::Maximum(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            accumulate(graph, grads, *a, |buf| {
                for i in 0..buf.len() {
                    if ta[i] >= tb[i] {
                        buf[i] += g[i];
                    }
                }
            });
            accumulate(graph, grads, *b, |buf| {
                for i in 0..buf.len() {
                    if ta[i] < tb[i] {
                        buf[i] += g[i];
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let n = val(v).shape()[*axis];
                accumulate(graph, grads, v, |buf| {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        for (d, s) in buf[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            let m = node.value.shape()[*axis];
            accumulate(graph, grads, *x, |buf| {
                for o in 0..outer {
                    let dst = &mut buf[(o * n + start) * inner..(o * n + start + m) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * m * inner..(o + 1) * m * inner]) {
                        *d += s;
                    }
                }
            });
        }
    }
}
