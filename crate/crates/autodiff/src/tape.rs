//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, the ids of its
//! inputs and whatever intermediates its backward rule needs. Nodes are only
//! ever appended, so the node order is a topological order and `backward`
//! simply walks it in reverse, visiting each node once.

use rand::Rng;

use crate::error::TensorError;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::{lit, Real};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    RowNorm(Var, Norm),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        k: usize,
        cols: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
        spatial: bool,
    },
    MaskedScores {
        q: Var,
        k: Var,
        mask: Vec<bool>,
        scale: T,
    },
    LocalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        weights: Vec<T>,
    },
    GaussianNll {
        x: Var,
        mean: Var,
        logstd: Var,
        floor: T,
    },
    BceLogits {
        logits: Var,
        labels: Var,
    },
    ExpMapToMat3(Var),
    Mat3Mul(Var, Var),
    Mat3Vec(Var, Var),
}

struct Node<T: Real> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    leaves: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or parameter node; `None` if it did not influence
    /// the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

type Res = Result<Var, TensorError>;

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            ..Self::new()
        }
    }

    /// Disable gradient bookkeeping: every node is recorded as constant.
    pub fn without_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => {
                &self
                    .params
                    .expect("param node without store")
                    .get(*id)
                    .value
            }
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Res {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input value that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter from the attached store; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Res {
        let store = self.params.ok_or(TensorError::NoParameters)?;
        if let Some(Some(v)) = self.param_nodes.get(id.0) {
            return Ok(*v);
        }
        let requires_grad = self.grad_enabled && store.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        if id.0 >= self.param_nodes.len() {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(v);
        Ok(v)
    }

    // ---------------------------------------------------------------- binary

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            Ok(Bcast::Row)
        } else {
            Err(TensorError::shape(op, ta.shape(), tb.shape()))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast), TensorError> {
        let mode = self.bcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[mode.index(i, cols)]))
            .collect();
        Ok((Tensor::from_vec(ta.shape().to_vec(), data)?, mode))
    }

    /// Elementwise sum; `b` may also be a 1×C row or a single scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        let (t, m) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b, m), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        let (t, m) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b, m), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        let (t, m) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b, m), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Res {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let t = self.value(a).matmul(self.value(b))?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` with `x`: T×I, `w`: I×O, `b`: 1×O.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Res {
        let mut t = self.value(x).matmul(self.value(w))?;
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != t.cols() {
                return Err(TensorError::shape("linear bias", t.shape(), tb.shape()));
            }
            let cols = t.cols();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += tb.data()[i % cols];
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Linear { x, w, b }, &inputs)
    }

    // ------------------------------------------------------------- structure

    /// Concatenate along `axis` (0 = rows, 1 = columns) of matrix views.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Res {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        }
        let first = self.value(inputs[0]);
        let (rows, cols) = (first.rows(), first.cols());
        let t = match axis {
            0 => {
                let mut data = Vec::new();
                let mut total = 0;
                for &v in inputs {
                    let tv = self.value(v);
                    if tv.cols() != cols {
                        return Err(TensorError::shape("concat", first.shape(), tv.shape()));
                    }
                    total += tv.rows();
                    data.extend_from_slice(tv.data());
                }
                Tensor::from_vec(vec![total, cols], data)?
            }
            1 => {
                let mut widths = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let tv = self.value(v);
                    if tv.rows() != rows {
                        return Err(TensorError::shape("concat", first.shape(), tv.shape()));
                    }
                    widths.push(tv.cols());
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row_slice(r));
                    }
                }
                Tensor::from_vec(vec![rows, total], data)?
            }
            _ => return Err(TensorError::InvalidArgument(format!("concat axis {axis}"))),
        };
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Rows (`axis` 0) or columns (`axis` 1) in `start..start + len`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Res {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let t = match axis {
            0 if start + len <= rows => Tensor::from_vec(
                vec![len, cols],
                tx.data()[start * cols..(start + len) * cols].to_vec(),
            )?,
            1 if start + len <= cols => {
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&tx.row_slice(r)[start..start + len]);
                }
                Tensor::from_vec(vec![rows, len], data)?
            }
            _ => {
                return Err(TensorError::InvalidArgument(format!(
                    "slice {start}..{} on axis {axis} of {:?}",
                    start + len,
                    tx.shape()
                )))
            }
        };
        self.push(t, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Res {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Res {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x])
    }

    // ------------------------------------------------------------ pointwise

    pub fn relu(&mut self, x: Var) -> Res {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Res {
        let t = self.value(x).map(T::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Res {
        let t = self.value(x).map(T::ln);
        self.push(t, Op::Log(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Res {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Res {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Res {
        let tx = self.value(x);
        let n = T::from_usize(tx.numel().max(1)).unwrap();
        let s: T = tx.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Per-row norm, T×C → T×1.
    pub fn row_norm(&mut self, x: Var, norm: Norm) -> Res {
        let tx = self.value(x);
        let data = (0..tx.rows())
            .map(|r| {
                let row = tx.row_slice(r);
                match norm {
                    Norm::L1 => row.iter().map(|v| v.abs()).sum(),
                    Norm::L2 => row.iter().map(|&v| v * v).sum::<T>().sqrt(),
                }
            })
            .collect();
        let t = Tensor::from_vec(vec![tx.rows(), 1], data)?;
        self.push(t, Op::RowNorm(x, norm), &[x])
    }

    /// Softmax along `axis` (1 normalizes each row, 0 each column).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Res {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        let (lanes, len, lane_stride, step) = match axis {
            1 => (rows, cols, cols, 1),
            0 => (cols, rows, 1, cols),
            _ => return Err(TensorError::InvalidArgument(format!("softmax axis {axis}"))),
        };
        for lane in 0..lanes {
            let base = lane * lane_stride;
            let mut max = T::neg_infinity();
            for i in 0..len {
                max = max.max(out[base + i * step]);
            }
            let mut sum = T::zero();
            for i in 0..len {
                let e = (out[base + i * step] - max).exp();
                out[base + i * step] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * step] /= sum;
            }
        }
        let t = Tensor::from_vec(tx.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis }, &[x])
    }

    /// Per-row normalization with learned gain and bias (both 1×C).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Res {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(TensorError::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let n = T::from_usize(cols).unwrap();
        let mut out = vec![T::zero(); rows * cols];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * tg.data()[c] + tb.data()[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::from_vec(vec![rows, cols], out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        )
    }

    // ------------------------------------------------------- sequence layers

    /// Causal 1-D convolution over time (rows) with dilation 1.
    ///
    /// `x`: T×Cin, `kernel`: (k·Cin)×Cout where block `j` multiplies the input
    /// at `t - (k-1) + j`; times before 0 are zero-padded.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, k: usize) -> Res {
        if k < 1 {
            return Err(TensorError::InvalidKernel(k));
        }
        let tx = self.value(x);
        let (steps, cin) = (tx.rows(), tx.cols());
        let tk = self.value(kernel);
        if tk.rows() != k * cin {
            return Err(TensorError::shape("causal_conv1d", tx.shape(), tk.shape()));
        }
        let cout = tk.cols();
        let width = k * cin;
        let mut cols = vec![T::zero(); steps * width];
        for t in 0..steps {
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src >= 0 {
                    cols[t * width + j * cin..t * width + (j + 1) * cin]
                        .copy_from_slice(tx.row_slice(src as usize));
                }
            }
        }
        let mut out = vec![T::zero(); steps * cout];
        gemm(
            MatRef::new(&cols, steps, width, false),
            MatRef::new(tk.data(), width, cout, false),
            &mut out,
            T::zero(),
        );
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.numel() != cout {
                return Err(TensorError::shape(
                    "causal_conv1d bias",
                    &[steps, cout],
                    tb.shape(),
                ));
            }
            for (i, v) in out.iter_mut().enumerate() {
                *v += tb.data()[i % cout];
            }
        }
        let t = Tensor::from_vec(vec![steps, cout], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            t,
            Op::CausalConv {
                x,
                kernel,
                bias,
                k,
                cols,
            },
            &inputs,
        )
    }

    /// Inverted dropout on every element. Identity when `training` is false
    /// or `p` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Res {
        check_probability(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = lit::<T>(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), data)?;
        self.push(
            t,
            Op::Dropout {
                x,
                mask,
                spatial: false,
            },
            &[x],
        )
    }

    /// Dropout of whole channels (columns) across every time step.
    pub fn spatial_dropout1d<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Res {
        check_probability(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = lit::<T>(1.0 / (1.0 - p));
        let tx = self.value(x);
        let cols = tx.cols();
        let mask: Vec<T> = (0..cols)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[i % cols])
            .collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), data)?;
        self.push(
            t,
            Op::Dropout {
                x,
                mask,
                spatial: true,
            },
            &[x],
        )
    }

    /// Scaled dot-product scores `scale · q kᵀ` with disallowed positions
    /// set to −∞. `mask` is row-major T×S, `true` = may attend.
    pub fn masked_attention_scores(&mut self, q: Var, k: Var, mask: &[bool], scale: T) -> Res {
        let (tq, tk) = (self.value(q), self.value(k));
        if tq.cols() != tk.cols() || mask.len() != tq.rows() * tk.rows() {
            return Err(TensorError::shape(
                "masked_attention_scores",
                tq.shape(),
                tk.shape(),
            ));
        }
        let (steps, keys) = (tq.rows(), tk.rows());
        let mut s = vec![T::zero(); steps * keys];
        gemm(
            MatRef::new(tq.data(), steps, tq.cols(), false),
            MatRef::new(tk.data(), keys, tk.cols(), true),
            &mut s,
            T::zero(),
        );
        for (v, &allowed) in s.iter_mut().zip(mask) {
            *v = if allowed {
                *v * scale
            } else {
                T::neg_infinity()
            };
        }
        let t = Tensor::from_vec(vec![steps, keys], s)?;
        self.push(
            t,
            Op::MaskedScores {
                q,
                k,
                mask: mask.to_vec(),
                scale,
            },
            &[q, k],
        )
    }

    /// Multi-head attention where position `t` attends to
    /// `max(0, t - window + 1) ..= t` only. `q`, `k`, `v` are T×d with
    /// `d` divisible by `heads`; scores are scaled by `1/sqrt(d/heads)`.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Res {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(TensorError::shape(
                "local_attention",
                tq.shape(),
                tk.shape(),
            ));
        }
        let (steps, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 || window == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "local_attention: width {d}, heads {heads}, window {window}"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut weights = vec![T::zero(); heads * steps * window];
        let mut out = vec![T::zero(); steps * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for t in 0..steps {
                let w = &mut weights[(h * steps + t) * window..(h * steps + t + 1) * window];
                let first = (t + 1).saturating_sub(window);
                let qrow = &qd[t * d + off..t * d + off + dh];
                let mut max = T::neg_infinity();
                for s in first..=t {
                    let krow = &kd[s * d + off..s * d + off + dh];
                    let score = dot(qrow, krow) * scale;
                    w[s + window - 1 - t] = score;
                    max = max.max(score);
                }
                let mut sum = T::zero();
                for s in first..=t {
                    let j = s + window - 1 - t;
                    w[j] = (w[j] - max).exp();
                    sum += w[j];
                }
                let orow = &mut out[t * d + off..t * d + off + dh];
                for s in first..=t {
                    let j = s + window - 1 - t;
                    w[j] /= sum;
                    let a = w[j];
                    let vrow = &vd[s * d + off..s * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += a * vv;
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![steps, d], out)?;
        self.push(
            t,
            Op::LocalAttention {
                q,
                k,
                v,
                heads,
                window,
                weights,
            },
            &[q, k, v],
        )
    }

    // ---------------------------------------------------------------- losses

    /// Mean over rows of the negative log-density of a diagonal Gaussian:
    /// `Σ_d ½ln2π + ln σ̂ + (x − μ)² / 2σ̂²` with `σ̂ = max(exp(logstd), floor)`.
    pub fn gaussian_nll(&mut self, x: Var, mean: Var, logstd: Var, floor: T) -> Res {
        if floor.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::InvalidArgument(format!(
                "std floor must be positive, got {floor}"
            )));
        }
        let (tx, tm, ts) = (self.value(x), self.value(mean), self.value(logstd));
        if tx.shape() != tm.shape() || tx.shape() != ts.shape() {
            return Err(TensorError::shape("gaussian_nll", tx.shape(), tm.shape()));
        }
        let half_ln_2pi = lit::<T>(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = lit::<T>(0.5);
        let mut total = T::zero();
        for i in 0..tx.numel() {
            let sigma = ts.data()[i].exp().max(floor);
            let z = (tx.data()[i] - tm.data()[i]) / sigma;
            total += half_ln_2pi + sigma.ln() + half * z * z;
        }
        let rows = T::from_usize(tx.rows().max(1)).unwrap();
        self.push(
            Tensor::scalar(total / rows),
            Op::GaussianNll {
                x,
                mean,
                logstd,
                floor,
            },
            &[x, mean, logstd],
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Res {
        let (tz, ty) = (self.value(logits), self.value(labels));
        if tz.shape() != ty.shape() {
            return Err(TensorError::shape(
                "bce_with_logits",
                tz.shape(),
                ty.shape(),
            ));
        }
        let mut total = T::zero();
        for (&z, &y) in tz.data().iter().zip(ty.data()) {
            total += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let n = T::from_usize(tz.numel().max(1)).unwrap();
        self.push(
            Tensor::scalar(total / n),
            Op::BceLogits { logits, labels },
            &[logits, labels],
        )
    }

    // ------------------------------------------------------ rigid transforms

    /// Rodrigues map from per-row axis-angle vectors (T×3) to row-major 3×3
    /// rotation matrices (T×9).
    pub fn expmap_to_mat3(&mut self, r: Var) -> Res {
        let tr = self.value(r);
        if tr.cols() != 3 {
            return Err(TensorError::shape("expmap_to_mat3", tr.shape(), &[0, 3]));
        }
        let mut data = Vec::with_capacity(tr.rows() * 9);
        for row in 0..tr.rows() {
            let v = tr.row_slice(row);
            data.extend_from_slice(&rodrigues([v[0], v[1], v[2]]));
        }
        let t = Tensor::from_vec(vec![tr.rows(), 9], data)?;
        self.push(t, Op::ExpMapToMat3(r), &[r])
    }

    /// Row-wise 3×3 matrix products (T×9 · T×9).
    pub fn mat3_mul(&mut self, a: Var, b: Var) -> Res {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != 9 || ta.shape() != tb.shape() {
            return Err(TensorError::shape("mat3_mul", ta.shape(), tb.shape()));
        }
        let mut data = vec![T::zero(); ta.numel()];
        for row in 0..ta.rows() {
            m3mul(
                ta.row_slice(row),
                tb.row_slice(row),
                &mut data[row * 9..row * 9 + 9],
            );
        }
        let t = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(t, Op::Mat3Mul(a, b), &[a, b])
    }

    /// Row-wise matrix-vector products (T×9 · T×3 → T×3).
    pub fn mat3_vec(&mut self, m: Var, v: Var) -> Res {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.cols() != 9 || tv.cols() != 3 || tm.rows() != tv.rows() {
            return Err(TensorError::shape("mat3_vec", tm.shape(), tv.shape()));
        }
        let mut data = vec![T::zero(); tv.numel()];
        for row in 0..tm.rows() {
            let (mm, vv) = (tm.row_slice(row), tv.row_slice(row));
            for i in 0..3 {
                data[row * 3 + i] =
                    mm[i * 3] * vv[0] + mm[i * 3 + 1] * vv[1] + mm[i * 3 + 2] * vv[2];
            }
        }
        let t = Tensor::from_vec(tv.shape().to_vec(), data)?;
        self.push(t, Op::Mat3Vec(m, v), &[m, v])
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. The tape cannot be differentiated
    /// twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut params = ParamGrads::empty(self.params.map_or(0, ParamStore::len));
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::from_vec(self.value(Var(i)).shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    let t = Tensor::from_vec(self.value(Var(i)).shape().to_vec(), g)?;
                    params.set(*id, t.clone());
                    leaves[i] = Some(t);
                }
                _ => self.backward_node(i, &g, &mut grads),
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.as_ref().expect("op node value");
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Add(a, b, m) | &Op::Sub(a, b, m) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let cols = out.cols();
                    for (j, &gv) in g.iter().enumerate() {
                        gb[m.index(j, cols)] += sign * gv;
                    }
                }
            }
            &Op::Mul(a, b, m) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let cols = out.cols();
                if let Some(ga) = self.slot(grads, a) {
                    for (j, &gv) in g.iter().enumerate() {
                        ga[j] += gv * tb.data()[m.index(j, cols)];
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[m.index(j, cols)] += gv * ta.data()[j];
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                }
            }
            &Op::MatMul(a, b) => self.matmul_backward(a, b, None, g, grads),
            &Op::Linear { x, w, b } => self.matmul_backward(x, w, b, g, grads),
            Op::Concat { inputs, axis } => {
                let cols = out.cols();
                let mut offset = 0;
                for &v in inputs {
                    let tv = self.value(v);
                    let (vr, vc) = (tv.rows(), tv.cols());
                    if let Some(gv) = self.slot(grads, v) {
                        if *axis == 0 {
                            add_into(gv, &g[offset * cols..(offset + vr) * cols]);
                        } else {
                            for r in 0..vr {
                                add_into(
                                    &mut gv[r * vc..(r + 1) * vc],
                                    &g[r * cols + offset..r * cols + offset + vc],
                                );
                            }
                        }
                    }
                    offset += if *axis == 0 { vr } else { vc };
                }
            }
            &Op::Slice { x, axis, start } => {
                let xc = self.value(x).cols();
                let (or, oc) = (out.rows(), out.cols());
                if let Some(gx) = self.slot(grads, x) {
                    if axis == 0 {
                        add_into(&mut gx[start * xc..(start + or) * xc], g);
                    } else {
                        for r in 0..or {
                            add_into(
                                &mut gx[r * xc + start..r * xc + start + oc],
                                &g[r * oc..(r + 1) * oc],
                            );
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    add_into(gx, g);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(gx) = self.slot(grads, x) {
                    // out is r×c, x is c×r
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let (rows, cols) = (out.rows(), out.cols());
                let y = out.data();
                let (lanes, len, lane_stride, step) = if axis == 1 {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                if let Some(gx) = self.slot(grads, x) {
                    for lane in 0..lanes {
                        let base = lane * lane_stride;
                        let mut dotp = T::zero();
                        for k in 0..len {
                            let idx = base + k * step;
                            if y[idx] != T::zero() {
                                dotp += g[idx] * y[idx];
                            }
                        }
                        for k in 0..len {
                            let idx = base + k * step;
                            if y[idx] != T::zero() {
                                gx[idx] += y[idx] * (g[idx] - dotp);
                            }
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                let tx = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * yv;
                    }
                }
            }
            &Op::Log(x) => {
                let tx = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *d += gv / xv;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                let n = T::from_usize(self.value(x).numel().max(1)).unwrap();
                if let Some(gx) = self.slot(grads, x) {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            &Op::RowNorm(x, norm) => {
                let tx = self.value(x);
                let cols = tx.cols();
                if let Some(gx) = self.slot(grads, x) {
                    for r in 0..tx.rows() {
                        let nv = out.data()[r];
                        for c in 0..cols {
                            let xv = tx.data()[r * cols + c];
                            let d = match norm {
                                Norm::L1 => {
                                    if xv > T::zero() {
                                        T::one()
                                    } else if xv < T::zero() {
                                        -T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Norm::L2 => {
                                    if nv > T::zero() {
                                        xv / nv
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                            gx[r * cols + c] += g[r] * d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let (rows, cols) = (tx.rows(), tx.cols());
                let n = T::from_usize(cols).unwrap();
                let xhat = |r: usize, c: usize| (tx.data()[r * cols + c] - mean[r]) * rstd[r];
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        add_into(gb, &g[r * cols..(r + 1) * cols]);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * tg.data()[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * tg.data()[c];
                            gx[r * cols + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                }
            }
            Op::CausalConv {
                x,
                kernel,
                bias,
                k,
                cols,
            } => {
                let tx = self.value(*x);
                let tk = self.value(*kernel);
                let (steps, cin) = (tx.rows(), tx.cols());
                let width = k * cin;
                let cout = tk.cols();
                if let Some(gk) = self.slot(grads, *kernel) {
                    gemm(
                        MatRef::new(cols, steps, width, true),
                        MatRef::new(g, steps, cout, false),
                        gk,
                        T::one(),
                    );
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..steps {
                            add_into(gb, &g[r * cout..(r + 1) * cout]);
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); steps * width];
                    gemm(
                        MatRef::new(g, steps, cout, false),
                        MatRef::new(tk.data(), width, cout, true),
                        &mut dcols,
                        T::zero(),
                    );
                    let gx = self.slot(grads, *x).expect("requires grad");
                    for t in 0..steps {
                        for j in 0..*k {
                            let src = t as isize - (*k as isize - 1) + j as isize;
                            if src >= 0 {
                                let s = src as usize;
                                add_into(
                                    &mut gx[s * cin..(s + 1) * cin],
                                    &dcols[t * width + j * cin..t * width + (j + 1) * cin],
                                );
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask, spatial } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, (d, &gv)) in gx.iter_mut().zip(g).enumerate() {
                        let m = if *spatial { mask[j % cols] } else { mask[j] };
                        *d += gv * m;
                    }
                }
            }
            Op::MaskedScores { q, k, mask, scale } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (steps, keys, d) = (tq.rows(), tk.rows(), tq.cols());
                let ds: Vec<T> = g
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &allowed)| if allowed { gv * *scale } else { T::zero() })
                    .collect();
                if let Some(gq) = self.slot(grads, *q) {
                    gemm(
                        MatRef::new(&ds, steps, keys, false),
                        MatRef::new(tk.data(), keys, d, false),
                        gq,
                        T::one(),
                    );
                }
                if let Some(gk) = self.slot(grads, *k) {
                    gemm(
                        MatRef::new(&ds, steps, keys, true),
                        MatRef::new(tq.data(), steps, d, false),
                        gk,
                        T::one(),
                    );
                }
            }
            Op::LocalAttention {
                q,
                k,
                v,
                heads,
                window,
                weights,
            } => self.attention_backward(*q, *k, *v, *heads, *window, weights, g, grads),
            &Op::GaussianNll {
                x,
                mean,
                logstd,
                floor,
            } => {
                let (tx, tm, ts) = (self.value(x), self.value(mean), self.value(logstd));
                let rows = T::from_usize(tx.rows().max(1)).unwrap();
                let up = g[0] / rows;
                let n = tx.numel();
                let mut dmu = vec![T::zero(); n];
                let mut dls = vec![T::zero(); n];
                for j in 0..n {
                    let e = ts.data()[j].exp();
                    let sigma = e.max(floor);
                    let diff = tx.data()[j] - tm.data()[j];
                    let inv_var = T::one() / (sigma * sigma);
                    dmu[j] = -diff * inv_var * up;
                    if e > floor {
                        dls[j] = (T::one() - diff * diff * inv_var) * up;
                    }
                }
                if let Some(gx) = self.slot(grads, x) {
                    for (d, &m) in gx.iter_mut().zip(&dmu) {
                        *d -= m;
                    }
                }
                if let Some(gm) = self.slot(grads, mean) {
                    add_into(gm, &dmu);
                }
                if let Some(gs) = self.slot(grads, logstd) {
                    add_into(gs, &dls);
                }
            }
            &Op::BceLogits { logits, labels } => {
                let (tz, ty) = (self.value(logits), self.value(labels));
                let n = T::from_usize(tz.numel().max(1)).unwrap();
                let up = g[0] / n;
                if let Some(gz) = self.slot(grads, logits) {
                    for ((d, &z), &y) in gz.iter_mut().zip(tz.data()).zip(ty.data()) {
                        *d += (sigmoid(z) - y) * up;
                    }
                }
                if let Some(gy) = self.slot(grads, labels) {
                    for (d, &z) in gy.iter_mut().zip(tz.data()) {
                        *d -= z * up;
                    }
                }
            }
            &Op::ExpMapToMat3(r) => {
                let tr = self.value(r);
                if let Some(gr) = self.slot(grads, r) {
                    for row in 0..tr.rows() {
                        let v = tr.row_slice(row);
                        let jac = rodrigues_jacobian([v[0], v[1], v[2]]);
                        let gm = &g[row * 9..row * 9 + 9];
                        for (axis, dm) in jac.iter().enumerate() {
                            gr[row * 3 + axis] += dot(gm, dm);
                        }
                    }
                }
            }
            &Op::Mat3Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let rows = ta.rows();
                if let Some(ga) = self.slot(grads, a) {
                    for row in 0..rows {
                        // dA = dC · Bᵀ
                        let (gc, bm) = (&g[row * 9..row * 9 + 9], tb.row_slice(row));
                        for i in 0..3 {
                            for j in 0..3 {
                                ga[row * 9 + i * 3 + j] +=
                                    (0..3).map(|k| gc[i * 3 + k] * bm[j * 3 + k]).sum::<T>();
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for row in 0..rows {
                        // dB = Aᵀ · dC
                        let (gc, am) = (&g[row * 9..row * 9 + 9], ta.row_slice(row));
                        for i in 0..3 {
                            for j in 0..3 {
                                gb[row * 9 + i * 3 + j] +=
                                    (0..3).map(|k| am[k * 3 + i] * gc[k * 3 + j]).sum::<T>();
                            }
                        }
                    }
                }
            }
            &Op::Mat3Vec(m, v) => {
                let (tm, tv) = (self.value(m), self.value(v));
                let rows = tm.rows();
                if let Some(gm) = self.slot(grads, m) {
                    for row in 0..rows {
                        let vv = tv.row_slice(row);
                        for i in 0..3 {
                            for j in 0..3 {
                                gm[row * 9 + i * 3 + j] += g[row * 3 + i] * vv[j];
                            }
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, v) {
                    for row in 0..rows {
                        let mm = tm.row_slice(row);
                        for j in 0..3 {
                            gv[row * 3 + j] +=
                                (0..3).map(|i| mm[i * 3 + j] * g[row * 3 + i]).sum::<T>();
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use; `None` for constants.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        bias: Option<Var>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if let Some(ga) = self.slot(grads, a) {
            gemm(
                MatRef::new(g, m, n, false),
                MatRef::new(tb.data(), k, n, true),
                ga,
                T::one(),
            );
        }
        if let Some(gb) = self.slot(grads, b) {
            gemm(
                MatRef::new(ta.data(), m, k, true),
                MatRef::new(g, m, n, false),
                gb,
                T::one(),
            );
        }
        if let Some(bias) = bias {
            if let Some(gbias) = self.slot(grads, bias) {
                for r in 0..m {
                    add_into(gbias, &g[r * n..(r + 1) * n]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        weights: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (steps, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut dq = vec![T::zero(); steps * d];
        let mut dk = vec![T::zero(); steps * d];
        let mut dv = vec![T::zero(); steps * d];
        let mut da = vec![T::zero(); window];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for t in 0..steps {
                let w = &weights[(h * steps + t) * window..(h * steps + t + 1) * window];
                let first = (t + 1).saturating_sub(window);
                let grow = &g[t * d + off..t * d + off + dh];
                let mut weighted = T::zero();
                for s in first..=t {
                    let j = s + window - 1 - t;
                    let vrow = &vd[s * d + off..s * d + off + dh];
                    da[j] = dot(grow, vrow);
                    weighted += w[j] * da[j];
                    for (dvv, &gv) in dv[s * d + off..s * d + off + dh].iter_mut().zip(grow) {
                        *dvv += w[j] * gv;
                    }
                }
                for s in first..=t {
                    let j = s + window - 1 - t;
                    let ds = w[j] * (da[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[t * d + off + c] += ds * kd[s * d + off + c];
                        dk[s * d + off + c] += ds * qd[t * d + off + c];
                    }
                }
            }
        }
        if let Some(gq) = self.slot(grads, q) {
            add_into(gq, &dq);
        }
        if let Some(gk) = self.slot(grads, k) {
            add_into(gk, &dk);
        }
        if let Some(gv) = self.slot(grads, v) {
            add_into(gv, &dv);
        }
    }
}

fn check_probability(p: f64) -> Result<(), TensorError> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(TensorError::InvalidProbability(p))
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn m3mul<T: Real>(a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
}

/// Coefficients of `R = I + a K + b K²` and their derivatives divided by θ.
fn rodrigues_coeffs<T: Real>(theta2: T) -> (T, T, T, T) {
    let t2 = theta2;
    if t2 < lit(1e-2) {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let a = T::one() - t2 / lit(6.0) + t4 / lit(120.0) - t6 / lit(5040.0);
        let b = lit::<T>(0.5) - t2 / lit(24.0) + t4 / lit(720.0) - t6 / lit(40320.0);
        let ca = lit::<T>(-1.0 / 3.0) + t2 / lit(30.0) - t4 / lit(840.0) + t6 / lit(45360.0);
        let cb = lit::<T>(-1.0 / 12.0) + t2 / lit(180.0) - t4 / lit(6720.0) + t6 / lit(453600.0);
        (a, b, ca, cb)
    } else {
        let theta = t2.sqrt();
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (T::one() - c) / t2;
        let ca = (theta * c - s) / (t2 * theta);
        let cb = (theta * s - lit::<T>(2.0) * (T::one() - c)) / (t2 * t2);
        (a, b, ca, cb)
    }
}

fn skew<T: Real>(r: [T; 3]) -> [T; 9] {
    let z = T::zero();
    [z, -r[2], r[1], r[2], z, -r[0], -r[1], r[0], z]
}

fn rodrigues<T: Real>(r: [T; 3]) -> [T; 9] {
    let t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, _, _) = rodrigues_coeffs(t2);
    let k = skew(r);
    let mut k2 = [T::zero(); 9];
    m3mul(&k, &k, &mut k2);
    let mut out = [T::zero(); 9];
    for i in 0..9 {
        let id = if i % 4 == 0 { T::one() } else { T::zero() };
        out[i] = id + a * k[i] + b * k2[i];
    }
    out
}

/// `∂R/∂r_i` for each axis `i`, each a row-major 3×3 block.
fn rodrigues_jacobian<T: Real>(r: [T; 3]) -> [[T; 9]; 3] {
    let t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, ca, cb) = rodrigues_coeffs(t2);
    let k = skew(r);
    let mut k2 = [T::zero(); 9];
    m3mul(&k, &k, &mut k2);
    let mut out = [[T::zero(); 9]; 3];
    for (i, dst) in out.iter_mut().enumerate() {
        let mut e = [T::zero(); 3];
        e[i] = T::one();
        let ei = skew(e);
        let mut eik = [T::zero(); 9];
        let mut kei = [T::zero(); 9];
        m3mul(&ei, &k, &mut eik);
        m3mul(&k, &ei, &mut kei);
        for j in 0..9 {
            dst[j] = ca * r[i] * k[j] + a * ei[j] + cb * r[i] * k2[j] + b * (eik[j] + kei[j]);
        }
    }
    out
}
