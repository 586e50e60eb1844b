//! Reverse-mode differentiation on a recorded operation tape.
//!
//! Every forward pass appends primitive operations to a [`Tape`]; the tape is
//! the computation record. `backward` replays the record in reverse and
//! accumulates adjoints into every leaf. `replay_value` re-executes the
//! recorded forward on substituted leaf values, which is what the finite
//! difference checker and the determinism tests rely on.
//!
//! The engine is deliberately minimal: dense f64 tensors, no broadcasting
//! beyond bias-add and scalar ops, sequential loops with a fixed reduction
//! order so identical inputs give bit-identical outputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Normalization source for the batch-norm primitive.
#[derive(Debug, Clone)]
pub enum BnNorm {
    /// Normalize by statistics of the current batch.
    Batch,
    /// Normalize by fixed running statistics (evaluation mode).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Primitive operations with a registered adjoint.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    /// `[R, D] + [D]`, bias broadcast over rows.
    BiasRows(usize, usize),
    /// `[B, C, H, W] + [C]`, bias broadcast over batch and space.
    BiasChannels(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    /// Row-wise softmax on `[R, C]`.
    Softmax(usize),
    Log(usize),
    ClampMin(usize, f64),
    /// `[R, C] -> [R]` sum over the last dimension.
    RowSum(usize),
    SumAll(usize),
    MeanAll(usize),
    /// `[R, C] -> [R]` Euclidean norm per row.
    NormRows(usize),
    GatherRows(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2(usize),
    GlobalAvgPool(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        norm: BnNorm,
    },
    /// Per-channel mean, `[B, C] -> [C]` or `[B, C, H, W] -> [C]`.
    ChannelMean(usize),
    /// Per-channel biased variance.
    ChannelVar(usize),
}

/// Recorded computation: parallel arrays of ops, values, and gradients.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    input_flags: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel layout of a tensor for per-channel ops: (channels, per-channel count).
fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [b, c] => Ok((*c, *b)),
        [b, c, h, w] => Ok((*c, b * h * w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected rank 2 [B, C] or rank 4 [B, C, H, W]".into(),
        }),
    }
}

/// Visits every element of channel `c` in a rank-2 or rank-4 tensor.
fn for_each_channel_index(shape: &[usize], c: usize, mut f: impl FnMut(usize)) {
    match shape {
        [b, ch] => {
            for i in 0..*b {
                f(i * ch + c);
            }
        }
        [b, ch, h, w] => {
            let hw = h * w;
            for i in 0..*b {
                let base = (i * ch + c) * hw;
                for s in 0..hw {
                    f(base + s);
                }
            }
        }
        _ => unreachable!("layout validated at record time"),
    }
}

fn channel_stats(x: &Tensor, c: usize) -> (f64, f64) {
    let (_, n) = channel_layout(x.shape(), "channel_stats").expect("validated");
    let mut sum = 0.0;
    for_each_channel_index(x.shape(), c, |i| sum += x.data()[i]);
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for_each_channel_index(x.shape(), c, |i| {
        let d = x.data()[i] - mean;
        ss += d * d;
    });
    (mean, ss / n as f64)
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Per-channel (mean, biased variance) of a rank-2 or rank-4 tensor,
/// computed outside any tape. Used for running-statistic updates.
pub fn batch_channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ch, _) = channel_layout(x.shape(), "batch_channel_stats")?;
    let mut means = Vec::with_capacity(ch);
    let mut vars = Vec::with_capacity(ch);
    for c in 0..ch {
        let (m, v) = channel_stats(x, c);
        means.push(m);
        vars.push(v);
    }
    Ok((means, vars))
}

/// Executes one primitive given the values of its parents.
fn compute(op: &Op, values: &[Tensor]) -> Tensor {
    match op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::Add(a, b) => {
            let (x, y) = (&values[*a], &values[*b]);
            let data = x.data().iter().zip(y.data()).map(|(u, v)| u + v).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::Sub(a, b) => {
            let (x, y) = (&values[*a], &values[*b]);
            let data = x.data().iter().zip(y.data()).map(|(u, v)| u - v).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::Mul(a, b) => {
            let (x, y) = (&values[*a], &values[*b]);
            let data = x.data().iter().zip(y.data()).map(|(u, v)| u * v).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::AddScalar(a, c) => {
            let x = &values[*a];
            let data = x.data().iter().map(|u| u + c).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::MulScalar(a, c) => {
            let x = &values[*a];
            let data = x.data().iter().map(|u| u * c).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::BiasRows(a, b) => {
            let (x, bias) = (&values[*a], &values[*b]);
            let cols = x.shape()[1];
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, u)| u + bias.data()[i % cols])
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::BiasChannels(a, b) => {
            let (x, bias) = (&values[*a], &values[*b]);
            let (ch, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, u)| u + bias.data()[(i / hw) % ch])
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::MatMul(a, b) => {
            let (x, y) = (&values[*a], &values[*b]);
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = y.shape()[1];
            let mut out = vec![0.0; m * n];
            let (xd, yd) = (x.data(), y.data());
            for i in 0..m {
                for p in 0..k {
                    let xv = xd[i * k + p];
                    let yrow = &yd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += xv * yrow[j];
                    }
                }
            }
            Tensor::new(vec![m, n], out).expect("validated")
        }
        Op::Relu(a) => {
            let x = &values[*a];
            let data = x.data().iter().map(|u| u.max(0.0)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::LeakyRelu(a, slope) => {
            let x = &values[*a];
            let data = x
                .data()
                .iter()
                .map(|u| if *u > 0.0 { *u } else { slope * u })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::Sigmoid(a) => {
            let x = &values[*a];
            let data = x.data().iter().map(|u| 1.0 / (1.0 + (-u).exp())).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::Softmax(a) => {
            let x = &values[*a];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = x.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    out[i * c + j] /= sum;
                }
            }
            Tensor::new(vec![r, c], out).expect("validated")
        }
        Op::Log(a) => {
            let x = &values[*a];
            let data = x.data().iter().map(|u| u.ln()).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::ClampMin(a, c) => {
            let x = &values[*a];
            let data = x.data().iter().map(|u| u.max(*c)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::RowSum(a) => {
            let x = &values[*a];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = x.data()[i * c..(i + 1) * c].iter().sum();
            }
            Tensor::new(vec![r], out).expect("validated")
        }
        Op::SumAll(a) => Tensor::scalar(values[*a].data().iter().sum()),
        Op::MeanAll(a) => {
            let x = &values[*a];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::NormRows(a) => {
            let x = &values[*a];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = x.data()[i * c..(i + 1) * c]
                    .iter()
                    .map(|u| u * u)
                    .sum::<f64>()
                    .sqrt();
            }
            Tensor::new(vec![r], out).expect("validated")
        }
        Op::GatherRows(a, ids) => {
            let x = &values[*a];
            let c = x.shape()[1];
            let mut out = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                out.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![ids.len(), c], out).expect("validated")
        }
        Op::Reshape(a, shape) => {
            Tensor::new(shape.clone(), values[*a].data().to_vec()).expect("validated")
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (&values[*x], &values[*w]);
            let (b, ci, h, wd) = (
                xv.shape()[0],
                xv.shape()[1],
                xv.shape()[2],
                xv.shape()[3],
            );
            let (co, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
            let ho = conv_out_extent(h, kh, *stride, *pad).expect("validated");
            let wo = conv_out_extent(wd, kw, *stride, *pad).expect("validated");
            let mut out = vec![0.0; b * co * ho * wo];
            let (xd, wdt) = (xv.data(), wv.data());
            for bi in 0..b {
                for oc in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for ic in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((bi * ci + ic) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                        acc += xd[xi] * wdt[wi];
                                    }
                                }
                            }
                            out[((bi * co + oc) * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
            }
            Tensor::new(vec![b, co, ho, wo], out).expect("validated")
        }
        Op::UpsampleNearest2(a) => {
            let x = &values[*a];
            let (b, c, h, w) = (
                x.shape()[0],
                x.shape()[1],
                x.shape()[2],
                x.shape()[3],
            );
            let (ho, wo) = (2 * h, 2 * w);
            let mut out = vec![0.0; b * c * ho * wo];
            let xd = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            out[((bi * c + ci) * ho + y) * wo + xx] =
                                xd[((bi * c + ci) * h + y / 2) * w + xx / 2];
                        }
                    }
                }
            }
            Tensor::new(vec![b, c, ho, wo], out).expect("validated")
        }
        Op::GlobalAvgPool(a) => {
            let x = &values[*a];
            let (b, c, h, w) = (
                x.shape()[0],
                x.shape()[1],
                x.shape()[2],
                x.shape()[3],
            );
            let hw = (h * w) as f64;
            let mut out = vec![0.0; b * c];
            let xd = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    out[bi * c + ci] = xd[base..base + h * w].iter().sum::<f64>() / hw;
                }
            }
            Tensor::new(vec![b, c], out).expect("validated")
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            norm,
        } => {
            let xv = &values[*x];
            let (ch, _) = channel_layout(xv.shape(), "batch_norm").expect("validated");
            let (g, b) = (values[*gamma].data(), values[*beta].data());
            let mut out = xv.data().to_vec();
            for c in 0..ch {
                let (mean, var) = match norm {
                    BnNorm::Batch => channel_stats(xv, c),
                    BnNorm::Running { mean, var } => (mean[c], var[c]),
                };
                let inv = 1.0 / (var + eps).sqrt();
                for_each_channel_index(xv.shape(), c, |i| {
                    out[i] = g[c] * (out[i] - mean) * inv + b[c];
                });
            }
            Tensor::new(xv.shape().to_vec(), out).expect("validated")
        }
        Op::ChannelMean(a) => {
            let x = &values[*a];
            let (ch, n) = channel_layout(x.shape(), "channel_mean").expect("validated");
            let mut out = vec![0.0; ch];
            for (c, slot) in out.iter_mut().enumerate() {
                let mut sum = 0.0;
                for_each_channel_index(x.shape(), c, |i| sum += x.data()[i]);
                *slot = sum / n as f64;
            }
            Tensor::new(vec![ch], out).expect("validated")
        }
        Op::ChannelVar(a) => {
            let x = &values[*a];
            let (ch, _) = channel_layout(x.shape(), "channel_var").expect("validated");
            let mut out = vec![0.0; ch];
            for (c, slot) in out.iter_mut().enumerate() {
                *slot = channel_stats(x, c).1;
            }
            Tensor::new(vec![ch], out).expect("validated")
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            input_flags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, input: bool) -> VarId {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        self.input_flags.push(input);
        VarId(self.ops.len() - 1)
    }

    fn record(&mut self, op: Op) -> VarId {
        let value = compute(&op, &self.values);
        self.push(op, value, false)
    }

    /// Differentiable leaf; targeted by gradient checks and leaf overrides.
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf (still receives a gradient slot, but is not
    /// treated as an input by `replay_value` and the checker).
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn is_input(&self, v: VarId) -> bool {
        self.input_flags[v.0]
    }

    /// All leaves created via [`Tape::input`], in record order.
    pub fn inputs(&self) -> Vec<VarId> {
        (0..self.ops.len())
            .filter(|&i| self.input_flags[i])
            .map(VarId)
            .collect()
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: VarId, b: VarId) -> Result<()> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if !x.same_shape(y) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b)?;
        Ok(self.record(Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b)?;
        Ok(self.record(Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("mul", a, b)?;
        Ok(self.record(Op::Mul(a.0, b.0)))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        self.record(Op::AddScalar(a.0, c))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> VarId {
        self.record(Op::MulScalar(a.0, c))
    }

    pub fn bias_rows(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (x, b) = (&self.values[a.0], &self.values[bias.0]);
        if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_rows",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(self.record(Op::BiasRows(a.0, bias.0)))
    }

    pub fn bias_channels(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (x, b) = (&self.values[a.0], &self.values[bias.0]);
        if x.rank() != 4 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_channels",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(self.record(Op::BiasChannels(a.0, bias.0)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(self.record(Op::MatMul(a.0, b.0)))
    }

    /// Elementwise max with zero.
    pub fn relu(&mut self, a: VarId) -> VarId {
        self.record(Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        self.record(Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.record(Op::Sigmoid(a.0))
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        if self.values[a.0].rank() != 2 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: self.values[a.0].shape().to_vec(),
                reason: "expected rank 2 [rows, classes]".into(),
            });
        }
        Ok(self.record(Op::Softmax(a.0)))
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        self.record(Op::Log(a.0))
    }

    pub fn clamp_min(&mut self, a: VarId, c: f64) -> VarId {
        self.record(Op::ClampMin(a.0, c))
    }

    pub fn row_sum(&mut self, a: VarId) -> Result<VarId> {
        if self.values[a.0].rank() != 2 {
            return Err(Error::InvalidShape {
                op: "row_sum",
                shape: self.values[a.0].shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        Ok(self.record(Op::RowSum(a.0)))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        self.record(Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        self.record(Op::MeanAll(a.0))
    }

    pub fn norm_rows(&mut self, a: VarId) -> Result<VarId> {
        if self.values[a.0].rank() != 2 {
            return Err(Error::InvalidShape {
                op: "norm_rows",
                shape: self.values[a.0].shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        Ok(self.record(Op::NormRows(a.0)))
    }

    pub fn gather_rows(&mut self, a: VarId, ids: &[usize]) -> Result<VarId> {
        let x = &self.values[a.0];
        if x.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: x.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= x.shape()[0]) {
            return Err(Error::invalid_arg(
                "gather_rows",
                format!("row index {bad} out of range for {} rows", x.shape()[0]),
            ));
        }
        Ok(self.record(Op::GatherRows(a.0, ids.to_vec())))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let x = &self.values[a.0];
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(self.record(Op::Reshape(a.0, shape)))
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (xv, wv) = (&self.values[x.0], &self.values[w.0]);
        let ok = xv.rank() == 4
            && wv.rank() == 4
            && xv.shape()[1] == wv.shape()[1]
            && stride >= 1
            && conv_out_extent(xv.shape()[2], wv.shape()[2], stride, pad).is_some()
            && conv_out_extent(xv.shape()[3], wv.shape()[3], stride, pad).is_some();
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        Ok(self.record(Op::Conv2d {
            x: x.0,
            w: w.0,
            stride,
            pad,
        }))
    }

    pub fn upsample_nearest_2(&mut self, a: VarId) -> Result<VarId> {
        if self.values[a.0].rank() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample_nearest_2",
                shape: self.values[a.0].shape().to_vec(),
                reason: "expected rank 4".into(),
            });
        }
        Ok(self.record(Op::UpsampleNearest2(a.0)))
    }

    pub fn global_avg_pool(&mut self, a: VarId) -> Result<VarId> {
        if self.values[a.0].rank() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: self.values[a.0].shape().to_vec(),
                reason: "expected rank 4".into(),
            });
        }
        Ok(self.record(Op::GlobalAvgPool(a.0)))
    }

    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        norm: BnNorm,
    ) -> Result<VarId> {
        let xv = &self.values[x.0];
        let (ch, _) = channel_layout(xv.shape(), "batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = &self.values[v.0];
            if t.rank() != 1 || t.shape()[0] != ch {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    lhs: xv.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if let BnNorm::Running { mean, var } = &norm {
            if mean.len() != ch || var.len() != ch {
                return Err(Error::invalid_arg(
                    "batch_norm",
                    format!(
                        "running stats have {} / {} channels, input has {ch}",
                        mean.len(),
                        var.len()
                    ),
                ));
            }
        }
        Ok(self.record(Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            eps,
            norm,
        }))
    }

    pub fn channel_mean(&mut self, a: VarId) -> Result<VarId> {
        channel_layout(self.values[a.0].shape(), "channel_mean")?;
        Ok(self.record(Op::ChannelMean(a.0)))
    }

    pub fn channel_var(&mut self, a: VarId) -> Result<VarId> {
        channel_layout(self.values[a.0].shape(), "channel_var")?;
        Ok(self.record(Op::ChannelVar(a.0)))
    }

    /// Smallest distance of any kink-prone intermediate from its kink
    /// (relu/leaky-relu/clamp thresholds, row norms, log arguments).
    /// Gradient checks reject samples where this margin is too small.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for op in &self.ops {
            match op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    for v in self.values[*a].data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::ClampMin(a, c) => {
                    for v in self.values[*a].data() {
                        margin = margin.min((v - c).abs());
                    }
                }
                Op::NormRows(a) => {
                    let x = &self.values[*a];
                    for i in 0..x.shape()[0] {
                        let n = x.row(i).iter().map(|u| u * u).sum::<f64>().sqrt();
                        margin = margin.min(n);
                    }
                }
                Op::Log(a) => {
                    for v in self.values[*a].data() {
                        margin = margin.min(*v);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn accumulate(&mut self, id: usize, delta: &[f64]) {
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (gi, d) in g.data_mut().iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => {
                let shape = self.values[id].shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("grad shape"));
            }
        }
    }

    /// Populates gradient slots of every node reachable from `out`.
    ///
    /// `out` must hold a scalar (`[1]`-shaped) value. Gradients from a
    /// previous backward pass are cleared first.
    pub fn backward(&mut self, out: VarId) -> Result<()> {
        if out.0 >= self.ops.len() {
            return Err(Error::invalid_arg("backward", "variable not on this tape"));
        }
        if self.values[out.0].shape() != [1] {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.values[out.0].shape().to_vec(),
                reason: "output must be a scalar of shape [1]".into(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[out.0] = Some(Tensor::scalar(1.0));

        for id in (0..=out.0).rev() {
            let Some(g) = self.grads[id].clone() else {
                continue;
            };
            let g = g.data().to_vec();
            match self.ops[id].clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[b].data())
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.values[a].data())
                        .map(|(gi, av)| gi * av)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddScalar(a, _) => self.accumulate(a, &g),
                Op::MulScalar(a, c) => {
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.accumulate(a, &da);
                }
                Op::BiasRows(a, b) => {
                    self.accumulate(a, &g);
                    let cols = self.values[a].shape()[1];
                    let mut db = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                    self.accumulate(b, &db);
                }
                Op::BiasChannels(a, b) => {
                    self.accumulate(a, &g);
                    let shape = self.values[a].shape();
                    let (ch, hw) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; ch];
                    for (i, gi) in g.iter().enumerate() {
                        db[(i / hw) % ch] += gi;
                    }
                    self.accumulate(b, &db);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.values[a].shape()[0], self.values[a].shape()[1]);
                    let n = self.values[b].shape()[1];
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    let (av, bv) = (self.values[a].data(), self.values[b].data());
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    for p in 0..k {
                        for i in 0..m {
                            let av_ip = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av_ip * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[a].data())
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::LeakyRelu(a, slope) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[a].data())
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { gi * slope })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[id].data())
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax(a) => {
                    let s = self.values[id].clone();
                    let (r, c) = (s.shape()[0], s.shape()[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let srow = s.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[a].data())
                        .map(|(gi, x)| gi / x)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::ClampMin(a, c) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[a].data())
                        .map(|(gi, x)| if *x > c { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::RowSum(a) => {
                    let (r, c) = (self.values[a].shape()[0], self.values[a].shape()[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[i];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.values[a].len()];
                    self.accumulate(a, &da);
                }
                Op::MeanAll(a) => {
                    let n = self.values[a].len() as f64;
                    let da = vec![g[0] / n; self.values[a].len()];
                    self.accumulate(a, &da);
                }
                Op::NormRows(a) => {
                    let x = self.values[a].clone();
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    let norms = self.values[id].data().to_vec();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            da[i * c + j] = g[i] * x.data()[i * c + j] / norms[i];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::GatherRows(a, ids) => {
                    let c = self.values[a].shape()[1];
                    let mut da = vec![0.0; self.values[a].len()];
                    for (t, &src) in ids.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g[t * c + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Reshape(a, _) => self.accumulate(a, &g),
                Op::Conv2d { x, w, stride, pad } => {
                    let xv = self.values[x].clone();
                    let wv = self.values[w].clone();
                    let (b, ci, h, wd) =
                        (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let (co, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                    let ho = conv_out_extent(h, kh, stride, pad).expect("validated");
                    let wo = conv_out_extent(wd, kw, stride, pad).expect("validated");
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    for bi in 0..b {
                        for oc in 0..co {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g[((bi * co + oc) * ho + oy) * wo + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..ci {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= wd as isize {
                                                    continue;
                                                }
                                                let xi = ((bi * ci + ic) * h + iy as usize) * wd
                                                    + ix as usize;
                                                let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                                dx[xi] += gv * wv.data()[wi];
                                                dw[wi] += gv * xv.data()[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                }
                Op::UpsampleNearest2(a) => {
                    let shape = self.values[a].shape().to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut da = vec![0.0; b * c * h * w];
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..ho {
                                for x in 0..wo {
                                    da[((bi * c + ci) * h + y / 2) * w + x / 2] +=
                                        g[((bi * c + ci) * ho + y) * wo + x];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::GlobalAvgPool(a) => {
                    let shape = self.values[a].shape().to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = (h * w) as f64;
                    let mut da = vec![0.0; b * c * h * w];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[bi * c + ci] / hw;
                            let base = (bi * c + ci) * h * w;
                            for s in 0..h * w {
                                da[base + s] = gv;
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                    norm,
                } => {
                    let xv = self.values[x].clone();
                    let (ch, n) = channel_layout(xv.shape(), "batch_norm").expect("validated");
                    let gam = self.values[gamma].data().to_vec();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgamma = vec![0.0; ch];
                    let mut dbeta = vec![0.0; ch];
                    for c in 0..ch {
                        let (mean, var, batch_stats) = match &norm {
                            BnNorm::Batch => {
                                let (m, v) = channel_stats(&xv, c);
                                (m, v, true)
                            }
                            BnNorm::Running { mean, var } => (mean[c], var[c], false),
                        };
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for_each_channel_index(xv.shape(), c, |i| {
                            let xhat = (xv.data()[i] - mean) * inv;
                            sum_g += g[i];
                            sum_gx += g[i] * xhat;
                        });
                        dbeta[c] = sum_g;
                        dgamma[c] = sum_gx;
                        let nf = n as f64;
                        for_each_channel_index(xv.shape(), c, |i| {
                            let xhat = (xv.data()[i] - mean) * inv;
                            dx[i] = if batch_stats {
                                gam[c] * inv * (g[i] - sum_g / nf - xhat * sum_gx / nf)
                            } else {
                                gam[c] * inv * g[i]
                            };
                        });
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::ChannelMean(a) => {
                    let shape = self.values[a].shape().to_vec();
                    let (_, n) = channel_layout(&shape, "channel_mean").expect("validated");
                    let mut da = vec![0.0; self.values[a].len()];
                    for (c, gc) in g.iter().enumerate() {
                        let gv = gc / n as f64;
                        for_each_channel_index(&shape, c, |i| da[i] += gv);
                    }
                    self.accumulate(a, &da);
                }
                Op::ChannelVar(a) => {
                    let xv = self.values[a].clone();
                    let (_, n) = channel_layout(xv.shape(), "channel_var").expect("validated");
                    let mut da = vec![0.0; xv.len()];
                    for (c, gc) in g.iter().enumerate() {
                        let (mean, _) = channel_stats(&xv, c);
                        let scale = 2.0 * gc / n as f64;
                        for_each_channel_index(xv.shape(), c, |i| {
                            da[i] += scale * (xv.data()[i] - mean);
                        });
                    }
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }

    /// Re-executes the recorded forward pass with some leaf values replaced,
    /// returning the scalar value at `out`. Replaying with the original leaf
    /// values reproduces the recorded value bit-for-bit.
    pub fn replay_value(&self, out: VarId, overrides: &[(VarId, Tensor)]) -> Result<f64> {
        if out.0 >= self.ops.len() {
            return Err(Error::invalid_arg(
                "replay_value",
                "variable not on this tape",
            ));
        }
        for (v, t) in overrides {
            if !matches!(self.ops[v.0], Op::Leaf) {
                return Err(Error::invalid_arg(
                    "replay_value",
                    "only leaf values can be overridden",
                ));
            }
            if !t.same_shape(&self.values[v.0]) {
                return Err(Error::ShapeMismatch {
                    op: "replay_value",
                    lhs: self.values[v.0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut vals: Vec<Tensor> = Vec::with_capacity(out.0 + 1);
        for id in 0..=out.0 {
            let t = match &self.ops[id] {
                Op::Leaf => overrides
                    .iter()
                    .find(|(v, _)| v.0 == id)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| self.values[id].clone()),
                op => compute(op, &vals),
            };
            vals.push(t);
        }
        vals[out.0].item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = tape.softmax(x).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_identity_kernel_preserves_ones() {
        // 3x3 kernel with a single 1 in the center taps each pixel onto itself.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.input(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        for v in tape.value(y).data() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn replay_reproduces_recorded_value_bitwise() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[0.3, -1.7, 2.9]));
        let sq = tape.mul(x, x).unwrap();
        let r = tape.relu(sq);
        let lg = tape.clamp_min(r, 1e-12);
        let l = tape.log(lg);
        let out = tape.mean_all(l);
        let recorded = tape.value(out).item().unwrap();
        let replayed = tape.replay_value(out, &[]).unwrap();
        assert_eq!(recorded.to_bits(), replayed.to_bits());

        let shifted = tape
            .replay_value(out, &[(x, t1(&[0.4, -1.7, 2.9]))])
            .unwrap();
        assert_ne!(recorded.to_bits(), shifted.to_bits());
    }

    #[test]
    fn backward_is_linear_over_outputs() {
        // grad(f + g) == grad(f) + grad(g) for f = sum(x*x), g = sum(3x).
        let xv = t1(&[0.5, -1.25, 2.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.input(xv.clone());
        let f = {
            let sq = tape.mul(x, x).unwrap();
            tape.sum_all(sq)
        };
        let g = {
            let tr = tape.mul_scalar(x, 3.0);
            tape.sum_all(tr)
        };
        let both = tape.add(f, g).unwrap();
        tape.backward(both).unwrap();
        let combined = tape.grad(x).unwrap().data().to_vec();

        let mut tf = Tape::new();
        let x1 = tf.input(xv.clone());
        let sq = tf.mul(x1, x1).unwrap();
        let f1 = tf.sum_all(sq);
        tf.backward(f1).unwrap();
        let gf = tf.grad(x1).unwrap().data().to_vec();

        let mut tg = Tape::new();
        let x2 = tg.input(xv);
        let tr = tg.mul_scalar(x2, 3.0);
        let g1 = tg.sum_all(tr);
        tg.backward(g1).unwrap();
        let gg = tg.grad(x2).unwrap().data().to_vec();

        for i in 0..combined.len() {
            assert!((combined[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let g = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = tape.sum_all(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn batch_norm_batch_mode_normalizes_channels() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 30.0]]).unwrap());
        let gamma = tape.input(t1(&[1.0, 1.0]));
        let beta = tape.input(t1(&[0.0, 0.0]));
        let y = tape.batch_norm(x, gamma, beta, 1e-5, BnNorm::Batch).unwrap();
        let v = tape.value(y);
        // Each channel is centered, so columns sum to ~0.
        assert!((v.data()[0] + v.data()[2]).abs() < 1e-12);
        assert!((v.data()[1] + v.data()[3]).abs() < 1e-12);
        // Unit variance up to eps.
        assert!((v.data()[2] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn upsample_then_pool_preserves_mean() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = tape.upsample_nearest_2(x).unwrap();
        let pooled = tape.global_avg_pool(up).unwrap();
        assert!((tape.value(pooled).data()[0] - 2.5).abs() < 1e-15);
    }
}
