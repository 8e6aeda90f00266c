//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward operation appends a node holding its output value and a
//! record of its inputs. Nodes are therefore already in topological order,
//! and [`Tape::backward`] walks them once in reverse, pushing adjoints from
//! each node into its inputs. Calling `backward` repeatedly without
//! [`Tape::zero_grads`] accumulates gradients.
//!
//! The operation set is exactly what the model needs; there is no general
//! broadcasting.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Elementwise functions available through [`Tape::pointwise`] and friends.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PwFn {
    Relu,
    Sigmoid,
    Abs,
    Sqrt,
    Softplus,
    Neg,
}

/// Batch normalization mode.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    /// y = a[m,k] . b[k,n]
    Matmul(TensorId, TensorId),
    /// y = a[m,k] . b[n,k]^T
    MatmulTransB(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    /// y[i,j] = x[i,j] + v[j]
    AddRowVec(TensorId, TensorId),
    Pointwise(TensorId, PwFn),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    SoftmaxLastDim(TensorId),
    Conv1dSame {
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    BatchNorm1d {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// y[i] = sum_j x[i,j]
    RowSum(TensorId),
    /// y[i,j] = a[i] * b[j]
    Outer(TensorId, TensorId),
    /// y[i,j] = x[i,j] * s[i]
    ScaleRows {
        x: TensorId,
        scales: TensorId,
    },
    SumAll(TensorId),
    /// Mean of the masked rows of a vector (or [t,1] column).
    MaskedMeanRows {
        x: TensorId,
        mask: Vec<bool>,
        count: usize,
    },
    /// Concatenate rank-3 tensors along axis 1.
    ConcatChannels(Vec<TensorId>),
    /// Concatenate rank-2 tensors along axis 1.
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    /// [n,c,t] -> [n,c] at a fixed frame.
    FrameSlice {
        x: TensorId,
        frame: usize,
    },
    /// [n,c,t] -> [c,t] at a fixed person.
    PersonSlice {
        x: TensorId,
        person: usize,
    },
    /// T tensors of [n,c] -> [n,c,T].
    StackFrames(Vec<TensorId>),
    /// N tensors of [t,d] -> [N,d,t].
    StackRowsT(Vec<TensorId>),
    Transpose2d(TensorId),
    Reshape(TensorId),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A linear record of forward operations with reverse-mode backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` tensor, if backward has
    /// reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul expects [m,k] x [k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::Matmul(a, b),
            req,
        ))
    }

    /// `a [m,k] . b[n,k]^T -> [m,n]`.
    pub fn matmul_transb(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!(
                "matmul_transb expects [m,k] x [n,k], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = mm_tb(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatmulTransB(a, b),
            req,
        ))
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{} expects equal shapes, got {:?} and {:?}",
                name,
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(&[a, b]);
        Ok(self.push(Tensor::new(shape, data).unwrap(), op, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_row_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(Error::shape(format!(
                "add_row_vec expects [m,n] + [n], got {:?} + {:?}",
                sx, sv
            )));
        }
        let n = sx[1];
        let vdata = self.value(v).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| val + vdata[i % n])
            .collect();
        let shape = sx.to_vec();
        let req = self.requires(&[x, v]);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::AddRowVec(x, v), req))
    }

    /// `x [m,din] . w [din,dout] + b [dout]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_row_vec(y, b)
    }

    pub fn pointwise(&mut self, x: TensorId, f: PwFn) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| pw_eval(f, v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Pointwise(x, f), req)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, PwFn::Relu)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, PwFn::Sigmoid)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(x, c), req)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::new(shape, data).unwrap(), Op::AddScalar(x), req)
    }

    /// Row-stable softmax over the last dimension of a tensor of any rank.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax_lastdim on rank-0 tensor".to_string()))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::SoftmaxLastDim(x),
            req,
        ))
    }

    /// Zero-padded kernel-3 convolution over the last axis, preserving T.
    pub fn conv1d_same(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 3 || sk.len() != 3 || sb.len() != 1 {
            return Err(Error::shape(format!(
                "conv1d_same expects x[n,ci,t], k[co,ci,3], b[co]; got {:?}, {:?}, {:?}",
                sx, sk, sb
            )));
        }
        if sk[2] != 3 {
            return Err(Error::shape(format!(
                "conv1d_same kernel size must be 3, got {}",
                sk[2]
            )));
        }
        if sx[1] != sk[1] || sk[0] != sb[0] {
            return Err(Error::shape(format!(
                "conv1d_same channel mismatch: x{:?} vs k{:?} vs b{:?}",
                sx, sk, sb
            )));
        }
        let (nb, ci, t) = (sx[0], sx[1], sx[2]);
        let co = sk[0];
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; nb * co * t];
        for n in 0..nb {
            for o in 0..co {
                let orow = &mut out[(n * co + o) * t..(n * co + o + 1) * t];
                orow.fill(bd[o]);
                for c in 0..ci {
                    let xrow = &xd[(n * ci + c) * t..(n * ci + c + 1) * t];
                    let k0 = kd[(o * ci + c) * 3];
                    let k1 = kd[(o * ci + c) * 3 + 1];
                    let k2 = kd[(o * ci + c) * 3 + 2];
                    for s in 0..t {
                        let mut acc = xrow[s] * k1;
                        if s > 0 {
                            acc += xrow[s - 1] * k0;
                        }
                        if s + 1 < t {
                            acc += xrow[s + 1] * k2;
                        }
                        orow[s] += acc;
                    }
                }
            }
        }
        let req = self.requires(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::new(vec![nb, co, t], out).unwrap(),
            Op::Conv1dSame { x, kernel, bias },
            req,
        ))
    }

    /// Per-channel batch normalization over the (batch, time) axes of
    /// `[n,c,t]`. In train mode the batch statistics are used and a blended
    /// running-statistics update is returned for the caller to apply; in
    /// eval mode `running` must be provided.
    pub fn batchnorm1d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
        momentum: f64,
    ) -> Result<(TensorId, Option<(Vec<f64>, Vec<f64>)>)> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 3 || sg.len() != 1 || sb.len() != 1 || sg[0] != sx[1] || sb[0] != sx[1] {
            return Err(Error::shape(format!(
                "batchnorm1d expects x[n,c,t], gamma[c], beta[c]; got {:?}, {:?}, {:?}",
                sx, sg, sb
            )));
        }
        let (nb, c, t) = (sx[0], sx[1], sx[2]);
        let m = nb * t;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();

        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut update = None;

        match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::invalid(format!(
                        "batchnorm1d train mode needs at least 2 samples per channel, got {}",
                        m
                    )));
                }
                let mut new_mean = vec![0.0; c];
                let mut new_var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for n in 0..nb {
                        let row = &xd[(n * c + ch) * t..(n * c + ch + 1) * t];
                        sum += row.iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut var = 0.0;
                    for n in 0..nb {
                        let row = &xd[(n * c + ch) * t..(n * c + ch + 1) * t];
                        var += row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    var /= m as f64;
                    let inv = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[ch] = inv;
                    for n in 0..nb {
                        let base = (n * c + ch) * t;
                        for s in 0..t {
                            xhat[base + s] = (xd[base + s] - mean) * inv;
                        }
                    }
                    let (rm, rv) = match running {
                        Some((rm, rv)) => (rm[ch], rv[ch]),
                        None => (0.0, 1.0),
                    };
                    new_mean[ch] = (1.0 - momentum) * rm + momentum * mean;
                    let unbiased = var * m as f64 / (m as f64 - 1.0);
                    new_var[ch] = (1.0 - momentum) * rv + momentum * unbiased;
                }
                update = Some((new_mean, new_var));
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or(Error::UninitializedBatchNorm)?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(format!(
                        "batchnorm1d running stats length {} does not match {} channels",
                        rm.len(),
                        c
                    )));
                }
                for ch in 0..c {
                    let inv = 1.0 / (rv[ch] + BN_EPS).sqrt();
                    inv_std[ch] = inv;
                    for n in 0..nb {
                        let base = (n * c + ch) * t;
                        for s in 0..t {
                            xhat[base + s] = (xd[base + s] - rm[ch]) * inv;
                        }
                    }
                }
            }
        }

        let mut out = vec![0.0; xd.len()];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * t;
                for s in 0..t {
                    out[base + s] = gd[ch] * xhat[base + s] + bd[ch];
                }
            }
        }
        let req = self.requires(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(vec![nb, c, t], out).unwrap(),
            Op::BatchNorm1d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            req,
        );
        Ok((id, update))
    }

    /// Layer normalization over the last axis of a `[n,d]` matrix.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 2 || sg.len() != 1 || sb.len() != 1 || sg[0] != sx[1] || sb[0] != sx[1] {
            return Err(Error::shape(format!(
                "layer_norm_rows expects x[n,d], gamma[d], beta[d]; got {:?}, {:?}, {:?}",
                sx, sg, sb
            )));
        }
        let (n, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = gd[j] * h + bd[j];
            }
        }
        let req = self.requires(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, d], out).unwrap(),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            req,
        ))
    }

    pub fn row_sum(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape(format!("row_sum expects [m,n], got {:?}", sx)));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let data: Vec<f64> = (0..m).map(|i| xd[i * n..(i + 1) * n].iter().sum()).collect();
        let req = self.requires(&[x]);
        Ok(self.push(Tensor::vector(data), Op::RowSum(x), req))
    }

    pub fn outer(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape(format!(
                "outer expects vectors, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, n) = (sa[0], sb[0]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = ad[i] * bd[j];
            }
        }
        let req = self.requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], data).unwrap(),
            Op::Outer(a, b),
            req,
        ))
    }

    pub fn scale_rows(&mut self, x: TensorId, scales: TensorId) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x), self.shape(scales));
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape(format!(
                "scale_rows expects x[m,n], s[m]; got {:?}, {:?}",
                sx, ss
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let sd = self.value(scales).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = xd[i * n + j] * sd[i];
            }
        }
        let req = self.requires(&[x, scales]);
        Ok(self.push(
            Tensor::new(vec![m, n], data).unwrap(),
            Op::ScaleRows { x, scales },
            req,
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), req)
    }

    /// Mean of the entries of a `[t]` vector or `[t,1]` column over the
    /// rows where `mask` is true.
    pub fn masked_mean_rows(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let sx = self.shape(x);
        let t = sx[0];
        let ok = (sx.len() == 1 || (sx.len() == 2 && sx[1] == 1)) && mask.len() == t;
        if !ok {
            return Err(Error::shape(format!(
                "masked_mean_rows expects [t] or [t,1] with mask of length t; got {:?} and {}",
                sx,
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::invalid(
                "masked_mean_rows over an empty mask".to_string(),
            ));
        }
        let xd = self.value(x).data();
        let sum: f64 = xd
            .iter()
            .zip(mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .sum();
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::scalar(sum / count as f64),
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            req,
        ))
    }

    /// Concatenate `[n,c_i,t]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels of nothing".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        if first.len() != 3 {
            return Err(Error::shape(format!(
                "concat_channels expects rank-3 tensors, got {:?}",
                first
            )));
        }
        let (n, t) = (first[0], first[2]);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 3 || s[0] != n || s[2] != t {
                return Err(Error::shape(format!(
                    "concat_channels mismatch: {:?} vs first {:?}",
                    s, first
                )));
            }
            c_total += s[1];
        }
        let mut data = vec![0.0; n * c_total * t];
        for i in 0..n {
            let mut c_off = 0;
            for &x in xs {
                let cx = self.shape(x)[1];
                let src = &self.value(x).data()[i * cx * t..(i + 1) * cx * t];
                let dst = &mut data[(i * c_total + c_off) * t..(i * c_total + c_off + cx) * t];
                dst.copy_from_slice(src);
                c_off += cx;
            }
        }
        let req = self.requires(xs);
        Ok(self.push(
            Tensor::new(vec![n, c_total, t], data).unwrap(),
            Op::ConcatChannels(xs.to_vec()),
            req,
        ))
    }

    /// Concatenate `[m,n_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_cols of nothing".to_string()));
        }
        let m = self.shape(xs[0])[0];
        let mut n_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != m {
                return Err(Error::shape(format!(
                    "concat_cols expects [m,n_i] with equal m, got {:?}",
                    s
                )));
            }
            n_total += s[1];
        }
        let mut data = vec![0.0; m * n_total];
        for i in 0..m {
            let mut off = 0;
            for &x in xs {
                let nx = self.shape(x)[1];
                let src = &self.value(x).data()[i * nx..(i + 1) * nx];
                data[i * n_total + off..i * n_total + off + nx].copy_from_slice(src);
                off += nx;
            }
        }
        let req = self.requires(xs);
        Ok(self.push(
            Tensor::new(vec![m, n_total], data).unwrap(),
            Op::ConcatCols(xs.to_vec()),
            req,
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::shape(format!(
                "slice_cols [{}, {}) out of {:?}",
                start,
                start + len,
                sx
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, len], data).unwrap(),
            Op::SliceCols { x, start, len },
            req,
        ))
    }

    pub fn frame_slice(&mut self, x: TensorId, frame: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 3 || frame >= sx[2] {
            return Err(Error::shape(format!(
                "frame_slice frame {} out of {:?}",
                frame, sx
            )));
        }
        let (n, c, t) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                data[i * c + ch] = xd[(i * c + ch) * t + frame];
            }
        }
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c], data).unwrap(),
            Op::FrameSlice { x, frame },
            req,
        ))
    }

    pub fn person_slice(&mut self, x: TensorId, person: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 3 || person >= sx[0] {
            return Err(Error::shape(format!(
                "person_slice index {} out of {:?}",
                person, sx
            )));
        }
        let (c, t) = (sx[1], sx[2]);
        let xd = self.value(x).data();
        let data = xd[person * c * t..(person + 1) * c * t].to_vec();
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, t], data).unwrap(),
            Op::PersonSlice { x, person },
            req,
        ))
    }

    /// Stack T matrices of `[n,c]` into `[n,c,T]`.
    pub fn stack_frames(&mut self, frames: &[TensorId]) -> Result<TensorId> {
        if frames.is_empty() {
            return Err(Error::invalid("stack_frames of nothing".to_string()));
        }
        let s0 = self.shape(frames[0]).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape(format!(
                "stack_frames expects [n,c] inputs, got {:?}",
                s0
            )));
        }
        for &f in frames {
            if self.shape(f) != s0.as_slice() {
                return Err(Error::shape(format!(
                    "stack_frames mismatch: {:?} vs {:?}",
                    self.shape(f),
                    s0
                )));
            }
        }
        let (n, c, t) = (s0[0], s0[1], frames.len());
        let mut data = vec![0.0; n * c * t];
        for (s, &f) in frames.iter().enumerate() {
            let fd = self.value(f).data();
            for i in 0..n {
                for ch in 0..c {
                    data[(i * c + ch) * t + s] = fd[i * c + ch];
                }
            }
        }
        let req = self.requires(frames);
        Ok(self.push(
            Tensor::new(vec![n, c, t], data).unwrap(),
            Op::StackFrames(frames.to_vec()),
            req,
        ))
    }

    /// Stack N matrices of `[t,d]` into `[N,d,t]` (transposing each).
    pub fn stack_rows_t(&mut self, persons: &[TensorId]) -> Result<TensorId> {
        if persons.is_empty() {
            return Err(Error::invalid("stack_rows_t of nothing".to_string()));
        }
        let s0 = self.shape(persons[0]).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape(format!(
                "stack_rows_t expects [t,d] inputs, got {:?}",
                s0
            )));
        }
        for &p in persons {
            if self.shape(p) != s0.as_slice() {
                return Err(Error::shape(format!(
                    "stack_rows_t mismatch: {:?} vs {:?}",
                    self.shape(p),
                    s0
                )));
            }
        }
        let (t, d, n) = (s0[0], s0[1], persons.len());
        let mut data = vec![0.0; n * d * t];
        for (i, &p) in persons.iter().enumerate() {
            let pd = self.value(p).data();
            for s in 0..t {
                for j in 0..d {
                    data[(i * d + j) * t + s] = pd[s * d + j];
                }
            }
        }
        let req = self.requires(persons);
        Ok(self.push(
            Tensor::new(vec![n, d, t], data).unwrap(),
            Op::StackRowsT(persons.to_vec()),
            req,
        ))
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape(format!(
                "transpose2d expects [m,n], got {:?}",
                sx
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, m], data).unwrap(),
            Op::Transpose2d(x),
            req,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: impl Into<Vec<usize>>) -> Result<TensorId> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.value(x).data().to_vec();
        let req = self.requires(&[x]);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Reshape(x), req))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every `requires_grad`
    /// node reachable from the loss are accumulated into their `grad`
    /// buffers; repeated calls keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            {
                let node = &mut self.nodes[i];
                let grad = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.len()]);
                for (g, &d) in grad.iter_mut().zip(&gy) {
                    *g += d;
                }
            }
            propagate(&self.nodes, &mut adj, i, &gy);
        }
        Ok(())
    }
}

fn pw_eval(f: PwFn, v: f64) -> f64 {
    match f {
        PwFn::Relu => v.max(0.0),
        PwFn::Sigmoid => sigmoid_scalar(v),
        PwFn::Abs => v.abs(),
        PwFn::Sqrt => v.sqrt(),
        PwFn::Softplus => softplus_scalar(v),
        PwFn::Neg => -v,
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^v)`.
pub fn softplus_scalar(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn accum(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId, contrib: &[f64]) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut adj[id.0] {
        Some(buf) => {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

fn propagate(nodes: &[Node], adj: &mut [Option<Vec<f64>>], i: usize, gy: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[a.0].requires_grad {
                let da = mm_tb(gy, nodes[b.0].value.data(), m, n, k);
                accum(adj, nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let db = mm_ta(nodes[a.0].value.data(), gy, m, k, n);
                accum(adj, nodes, *b, &db);
            }
        }
        Op::MatmulTransB(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            if nodes[a.0].requires_grad {
                // da = gy [m,n] . b [n,k]
                let da = mm(gy, nodes[b.0].value.data(), m, n, k);
                accum(adj, nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                // db = gy^T [n,m] . a [m,k]
                let db = mm_ta(gy, nodes[a.0].value.data(), m, n, k);
                accum(adj, nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            accum(adj, nodes, *a, gy);
            accum(adj, nodes, *b, gy);
        }
        Op::Sub(a, b) => {
            accum(adj, nodes, *a, gy);
            if nodes[b.0].requires_grad {
                let neg: Vec<f64> = gy.iter().map(|&g| -g).collect();
                accum(adj, nodes, *b, &neg);
            }
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let da: Vec<f64> = gy
                    .iter()
                    .zip(nodes[b.0].value.data())
                    .map(|(&g, &bv)| g * bv)
                    .collect();
                accum(adj, nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let db: Vec<f64> = gy
                    .iter()
                    .zip(nodes[a.0].value.data())
                    .map(|(&g, &av)| g * av)
                    .collect();
                accum(adj, nodes, *b, &db);
            }
        }
        Op::Div(a, b) => {
            let bd = nodes[b.0].value.data();
            if nodes[a.0].requires_grad {
                let da: Vec<f64> = gy.iter().zip(bd).map(|(&g, &bv)| g / bv).collect();
                accum(adj, nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let yd = node.value.data();
                let db: Vec<f64> = gy
                    .iter()
                    .zip(yd)
                    .zip(bd)
                    .map(|((&g, &y), &bv)| -g * y / bv)
                    .collect();
                accum(adj, nodes, *b, &db);
            }
        }
        Op::AddRowVec(x, v) => {
            accum(adj, nodes, *x, gy);
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.len();
                let mut dv = vec![0.0; n];
                for (i, &g) in gy.iter().enumerate() {
                    dv[i % n] += g;
                }
                accum(adj, nodes, *v, &dv);
            }
        }
        Op::Pointwise(x, f) => {
            if nodes[x.0].requires_grad {
                let xd = nodes[x.0].value.data();
                let yd = node.value.data();
                let dx: Vec<f64> = gy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        g * match f {
                            PwFn::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            PwFn::Sigmoid => yd[i] * (1.0 - yd[i]),
                            PwFn::Abs => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else if xd[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            PwFn::Sqrt => {
                                if yd[i] > 0.0 {
                                    0.5 / yd[i]
                                } else {
                                    0.0
                                }
                            }
                            PwFn::Softplus => sigmoid_scalar(xd[i]),
                            PwFn::Neg => -1.0,
                        }
                    })
                    .collect();
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::Scale(x, c) => {
            if nodes[x.0].requires_grad {
                let dx: Vec<f64> = gy.iter().map(|&g| g * c).collect();
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::AddScalar(x) => {
            accum(adj, nodes, *x, gy);
        }
        Op::SoftmaxLastDim(x) => {
            if nodes[x.0].requires_grad {
                let d = *node.value.shape().last().unwrap();
                let yd = node.value.data();
                let mut dx = vec![0.0; yd.len()];
                for r in 0..yd.len() / d {
                    let y = &yd[r * d..(r + 1) * d];
                    let g = &gy[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = y[j] * (g[j] - dot);
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::Conv1dSame { x, kernel, bias } => {
            let sx = nodes[x.0].value.shape();
            let sk = nodes[kernel.0].value.shape();
            let (nb, ci, t) = (sx[0], sx[1], sx[2]);
            let co = sk[0];
            let xd = nodes[x.0].value.data();
            let kd = nodes[kernel.0].value.data();
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; xd.len()];
                for n in 0..nb {
                    for o in 0..co {
                        let grow = &gy[(n * co + o) * t..(n * co + o + 1) * t];
                        for c in 0..ci {
                            let k0 = kd[(o * ci + c) * 3];
                            let k1 = kd[(o * ci + c) * 3 + 1];
                            let k2 = kd[(o * ci + c) * 3 + 2];
                            let drow = &mut dx[(n * ci + c) * t..(n * ci + c + 1) * t];
                            for s in 0..t {
                                let mut acc = grow[s] * k1;
                                if s + 1 < t {
                                    acc += grow[s + 1] * k0;
                                }
                                if s > 0 {
                                    acc += grow[s - 1] * k2;
                                }
                                drow[s] += acc;
                            }
                        }
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
            if nodes[kernel.0].requires_grad {
                let mut dk = vec![0.0; kd.len()];
                for n in 0..nb {
                    for o in 0..co {
                        let grow = &gy[(n * co + o) * t..(n * co + o + 1) * t];
                        for c in 0..ci {
                            let xrow = &xd[(n * ci + c) * t..(n * ci + c + 1) * t];
                            let mut d0 = 0.0;
                            let mut d1 = 0.0;
                            let mut d2 = 0.0;
                            for s in 0..t {
                                let g = grow[s];
                                if s > 0 {
                                    d0 += g * xrow[s - 1];
                                }
                                d1 += g * xrow[s];
                                if s + 1 < t {
                                    d2 += g * xrow[s + 1];
                                }
                            }
                            dk[(o * ci + c) * 3] += d0;
                            dk[(o * ci + c) * 3 + 1] += d1;
                            dk[(o * ci + c) * 3 + 2] += d2;
                        }
                    }
                }
                accum(adj, nodes, *kernel, &dk);
            }
            if nodes[bias.0].requires_grad {
                let mut db = vec![0.0; co];
                for n in 0..nb {
                    for o in 0..co {
                        db[o] += gy[(n * co + o) * t..(n * co + o + 1) * t]
                            .iter()
                            .sum::<f64>();
                    }
                }
                accum(adj, nodes, *bias, &db);
            }
        }
        Op::BatchNorm1d {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let sx = nodes[x.0].value.shape();
            let (nb, c, t) = (sx[0], sx[1], sx[2]);
            let m = (nb * t) as f64;
            let gd = nodes[gamma.0].value.data();
            // Per-channel sums of gy and gy*xhat, shared by all three grads.
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * t;
                    for s in 0..t {
                        sum_dy[ch] += gy[base + s];
                        sum_dy_xhat[ch] += gy[base + s] * xhat[base + s];
                    }
                }
            }
            if nodes[gamma.0].requires_grad {
                accum(adj, nodes, *gamma, &sum_dy_xhat);
            }
            if nodes[beta.0].requires_grad {
                accum(adj, nodes, *beta, &sum_dy);
            }
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; xhat.len()];
                for n in 0..nb {
                    for ch in 0..c {
                        let base = (n * c + ch) * t;
                        let g = gd[ch];
                        let inv = inv_std[ch];
                        for s in 0..t {
                            dx[base + s] = if *train {
                                g * inv / m
                                    * (m * gy[base + s]
                                        - sum_dy[ch]
                                        - xhat[base + s] * sum_dy_xhat[ch])
                            } else {
                                g * inv * gy[base + s]
                            };
                        }
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::LayerNormRows {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let sx = nodes[x.0].value.shape();
            let (n, d) = (sx[0], sx[1]);
            let gd = nodes[gamma.0].value.data();
            if nodes[gamma.0].requires_grad {
                let mut dg = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += gy[i * d + j] * xhat[i * d + j];
                    }
                }
                accum(adj, nodes, *gamma, &dg);
            }
            if nodes[beta.0].requires_grad {
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += gy[i * d + j];
                    }
                }
                accum(adj, nodes, *beta, &db);
            }
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; n * d];
                let df = d as f64;
                for i in 0..n {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xhat = 0.0;
                    for j in 0..d {
                        let dh = gy[i * d + j] * gd[j];
                        sum_dh += dh;
                        sum_dh_xhat += dh * xhat[i * d + j];
                    }
                    for j in 0..d {
                        let dh = gy[i * d + j] * gd[j];
                        dx[i * d + j] = inv_std[i] / df
                            * (df * dh - sum_dh - xhat[i * d + j] * sum_dh_xhat);
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::RowSum(x) => {
            if nodes[x.0].requires_grad {
                let sx = nodes[x.0].value.shape();
                let (m, n) = (sx[0], sx[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gy[i];
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::Outer(a, b) => {
            let ad = nodes[a.0].value.data();
            let bd = nodes[b.0].value.data();
            let (m, n) = (ad.len(), bd.len());
            if nodes[a.0].requires_grad {
                let mut da = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i] += gy[i * n + j] * bd[j];
                    }
                }
                accum(adj, nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += gy[i * n + j] * ad[i];
                    }
                }
                accum(adj, nodes, *b, &db);
            }
        }
        Op::ScaleRows { x, scales } => {
            let sx = nodes[x.0].value.shape();
            let (m, n) = (sx[0], sx[1]);
            let sd = nodes[scales.0].value.data();
            let xd = nodes[x.0].value.data();
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gy[i * n + j] * sd[i];
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
            if nodes[scales.0].requires_grad {
                let mut ds = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        ds[i] += gy[i * n + j] * xd[i * n + j];
                    }
                }
                accum(adj, nodes, *scales, &ds);
            }
        }
        Op::SumAll(x) => {
            if nodes[x.0].requires_grad {
                let dx = vec![gy[0]; nodes[x.0].value.len()];
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::MaskedMeanRows { x, mask, count } => {
            if nodes[x.0].requires_grad {
                let scale = gy[0] / *count as f64;
                let dx: Vec<f64> = mask
                    .iter()
                    .map(|&m| if m { scale } else { 0.0 })
                    .collect();
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::ConcatChannels(xs) => {
            let sy = node.value.shape();
            let (n, c_total, t) = (sy[0], sy[1], sy[2]);
            let mut c_off = 0;
            for &xid in xs {
                let cx = nodes[xid.0].value.shape()[1];
                if nodes[xid.0].requires_grad {
                    let mut dx = vec![0.0; n * cx * t];
                    for i in 0..n {
                        let src = &gy[(i * c_total + c_off) * t..(i * c_total + c_off + cx) * t];
                        dx[i * cx * t..(i + 1) * cx * t].copy_from_slice(src);
                    }
                    accum(adj, nodes, xid, &dx);
                }
                c_off += cx;
            }
        }
        Op::ConcatCols(xs) => {
            let sy = node.value.shape();
            let (m, n_total) = (sy[0], sy[1]);
            let mut off = 0;
            for &xid in xs {
                let nx = nodes[xid.0].value.shape()[1];
                if nodes[xid.0].requires_grad {
                    let mut dx = vec![0.0; m * nx];
                    for i in 0..m {
                        dx[i * nx..(i + 1) * nx]
                            .copy_from_slice(&gy[i * n_total + off..i * n_total + off + nx]);
                    }
                    accum(adj, nodes, xid, &dx);
                }
                off += nx;
            }
        }
        Op::SliceCols { x, start, len } => {
            if nodes[x.0].requires_grad {
                let sx = nodes[x.0].value.shape();
                let (m, n) = (sx[0], sx[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::FrameSlice { x, frame } => {
            if nodes[x.0].requires_grad {
                let sx = nodes[x.0].value.shape();
                let (n, c, t) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0; n * c * t];
                for i in 0..n {
                    for ch in 0..c {
                        dx[(i * c + ch) * t + frame] = gy[i * c + ch];
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::PersonSlice { x, person } => {
            if nodes[x.0].requires_grad {
                let sx = nodes[x.0].value.shape();
                let (c, t) = (sx[1], sx[2]);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                dx[person * c * t..(person + 1) * c * t].copy_from_slice(gy);
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::StackFrames(frames) => {
            let sy = node.value.shape();
            let (n, c, t) = (sy[0], sy[1], sy[2]);
            for (s, &f) in frames.iter().enumerate() {
                if nodes[f.0].requires_grad {
                    let mut df = vec![0.0; n * c];
                    for i in 0..n {
                        for ch in 0..c {
                            df[i * c + ch] = gy[(i * c + ch) * t + s];
                        }
                    }
                    accum(adj, nodes, f, &df);
                }
            }
        }
        Op::StackRowsT(persons) => {
            let sy = node.value.shape();
            let (d, t) = (sy[1], sy[2]);
            for (i, &p) in persons.iter().enumerate() {
                if nodes[p.0].requires_grad {
                    let mut dp = vec![0.0; t * d];
                    for s in 0..t {
                        for j in 0..d {
                            dp[s * d + j] = gy[(i * d + j) * t + s];
                        }
                    }
                    accum(adj, nodes, p, &dp);
                }
            }
        }
        Op::Transpose2d(x) => {
            if nodes[x.0].requires_grad {
                let sx = nodes[x.0].value.shape();
                let (m, n) = (sx[0], sx[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gy[j * m + i];
                    }
                }
                accum(adj, nodes, *x, &dx);
            }
        }
        Op::Reshape(x) => {
            accum(adj, nodes, *x, gy);
        }
    }
}

// ── Matrix kernels ──────────────────────────────────────────────────────
//
// Row-partitioned, so parallel execution is bitwise identical to serial.

const PAR_FLOP_THRESHOLD: usize = 1 << 17;

fn mm_row(arow: &[f64], b: &[f64], n: usize, orow: &mut [f64]) {
    for (kk, &av) in arow.iter().enumerate() {
        let brow = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in orow.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// `a [m,k] . b [k,n] -> [m,n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| mm_row(&a[i * k..(i + 1) * k], b, n, orow));
    } else {
        for i in 0..m {
            mm_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

fn mm_tb_row(arow: &[f64], b: &[f64], k: usize, orow: &mut [f64]) {
    for (j, o) in orow.iter_mut().enumerate() {
        let brow = &b[j * k..(j + 1) * k];
        *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
    }
}

/// `a [m,k] . b [n,k]^T -> [m,n]`.
pub(crate) fn mm_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| mm_tb_row(&a[i * k..(i + 1) * k], b, k, orow));
    } else {
        for i in 0..m {
            mm_tb_row(&a[i * k..(i + 1) * k], b, k, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

/// `a [m,k]^T . b [m,n] -> [k,n]`.
pub(crate) fn mm_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let run = |kk: usize, orow: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av != 0.0 {
                let brow = &b[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, orow)| run(kk, orow));
    } else {
        for kk in 0..k {
            run(kk, &mut out[kk * n..(kk + 1) * n]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(r, c, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 2, &[1.0, 2.0]));
        let w = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_weight_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 2, &[1.0, 2.0]));
        let w = tape.constant(t2(2, 2, &[0.0; 4]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 3, &[0.0; 3]));
        let w = tape.constant(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(x, w).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).scalar_value(), 0.5);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let sa = tape.softmax_lastdim(a).unwrap();
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);
        let b = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let sb = tape.softmax_lastdim(b).unwrap();
        let d = tape.value(sb).data();
        assert!(d[0] > 0.999_999 && d[1] < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(3, 4, &[1.0, -2.0, 0.5, 7.0, 3.0, 3.0, 3.0, 3.0, -50.0, 2.0, 0.1, 9.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![5.0, -3.0, 2.0]));
        let l = tape.sum_all(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 1.0]));
        let l = tape.sum_all(x);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn conv_shapes_match_config() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 5, 16]));
        let k = tape.constant(Tensor::zeros(vec![64, 5, 3]));
        let b = tape.constant(Tensor::zeros(vec![64]));
        let y = tape.conv1d_same(x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 64, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4, 8]));
        let k = tape.constant(Tensor::zeros(vec![2, 5, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.conv1d_same(x, k, b).is_err());
    }

    #[test]
    fn batchnorm_constant_input_returns_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 3, 4], 7.0));
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let (y, update) = tape
            .batchnorm1d(x, g, b, BnMode::Train, None, 0.1)
            .unwrap();
        assert!(update.is_some());
        let yv = tape.value(y);
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..4 {
                    let expect = [0.5, -1.0, 2.0][c];
                    assert!((yv.at3(n, c, t) - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_mean_and_var() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 2 * 4).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let x = tape.constant(Tensor::new(vec![2, 2, 4], data).unwrap());
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let (y, _) = tape
            .batchnorm1d(x, g, b, BnMode::Train, None, 0.1)
            .unwrap();
        let yv = tape.value(y);
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..2 {
                for t in 0..4 {
                    vals.push(yv.at3(n, c, t));
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_without_stats_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3]));
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let err = tape.batchnorm1d(x, g, b, BnMode::Eval, None, 0.1);
        assert!(matches!(err, Err(Error::UninitializedBatchNorm)));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(t2(3, 3, &[0.3, -1.2, 0.7, 2.2, 0.1, -0.5, 1.1, 0.9, -2.0]));
            let w = tape.constant(t2(3, 3, &[0.11, 0.5, -0.3, 0.2, -0.7, 0.9, 0.4, 0.6, -0.1]));
            let b = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
            let h = tape.linear(x, w, b).unwrap();
            let r = tape.relu(h);
            let s = tape.softmax_lastdim(r).unwrap();
            tape.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn transpose_and_reshape_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = tape.transpose2d(x).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.value(xt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.reshape(xt, vec![6]).unwrap();
        assert_eq!(tape.shape(back), &[6]);
    }

    #[test]
    fn concat_and_slice_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1, 2], vec![5.0, 6.0]).unwrap());
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn stack_rows_t_transposes() {
        let mut tape = Tape::new();
        // persons of [t=2, d=3]
        let p0 = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p1 = tape.constant(t2(2, 3, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let y = tape.stack_rows_t(&[p0, p1]).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2]);
        let yv = tape.value(y);
        assert_eq!(yv.at3(0, 0, 0), 1.0);
        assert_eq!(yv.at3(0, 0, 1), 4.0);
        assert_eq!(yv.at3(0, 2, 1), 6.0);
        assert_eq!(yv.at3(1, 1, 0), 8.0);
    }

    #[test]
    fn matmul_kernels_agree() {
        // Cross-check mm_tb and mm_ta against mm with explicit transposes.
        let m = 4;
        let k = 5;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 4.0).collect();
        let y = mm(&a, &b, m, k, n);
        // b' = transpose of b as [n,k]
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        assert_eq!(mm_tb(&a, &bt, m, k, n), y);
        // a' = transpose of a as [k,m]; mm_ta(a', y... ) checks [m,k]^T . [m,n]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let y2 = mm(&at, &b, k, m, n);
        let mut a2 = vec![0.0; m * k];
        for i in 0..k {
            for j in 0..m {
                a2[j * k + i] = at[i * m + j];
            }
        }
        assert_eq!(mm_ta(&a2, &b, m, k, n), y2);
    }
}
