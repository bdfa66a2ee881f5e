//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the handles
//! of its inputs. Node indices are assigned in creation order and a node can
//! only reference earlier nodes, so the tape is a topological order by
//! construction and `backward` simply walks it from the end.
//!
//! Broadcasting is suffix-only: in `add`, `sub` and `mul` the right operand's
//! shape must equal a trailing part of the left operand's shape and is
//! repeated over the leading axes.

use crate::error::NumError;
use crate::kernels::gemm;
use crate::tensor::{numel, Tensor, MAX_RANK};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul {
        a: Var,
        b: Var,
        bias: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softplus {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
        scale: f64,
    },
    ConcatLast {
        parts: Vec<Var>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    Narrow0 {
        a: Var,
        start: usize,
    },
    Concat0 {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; build one per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materialises zeros of `shape` for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Product of all axes but the last, and the last extent.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        None => (1, 1),
        Some(&c) => (numel(&shape[..shape.len() - 1]), c),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = tanh_abs(inner);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

/// `tanh` from one `exp`; absolute error near machine epsilon, which is all
/// the GELU terms `1 + t` and `1 − t²` need.
fn tanh_abs(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Grad-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.push(value, Op::Const, false, "constant")
    }

    /// `a [.., k] · b [k, n] -> [.., n]`, the leading axes of `a` flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.product(a, b, None)
    }

    /// `a · b + bias` with `bias [n]` added to every row, as one node.
    pub fn affine(&mut self, a: Var, b: Var, bias: Var) -> Result<Var, NumError> {
        self.product(a, b, Some(bias))
    }

    fn product(&mut self, a: Var, b: Var, bias: Option<Var>) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = rows_cols(&sa);
        let n = sb[1];
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        if let Some(c) = bias {
            let sc = self.shape(c);
            if sc != [n] {
                return Err(NumError::ShapeMismatch {
                    op: "affine",
                    lhs: out_shape,
                    rhs: sc.to_vec(),
                });
            }
            let cv = self.value(c).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(cv);
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            bias.is_some(),
        );
        let ng = self.ng(a) || self.ng(b) || bias.is_some_and(|c| self.ng(c));
        self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, bias },
            ng,
            "matmul",
        )
    }

    /// Batched product `a [B, m, k] · b [B, k, n]`, or `a · bᵀ` with `b [B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || NumError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(err());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(err());
            }
            sb[2]
        };
        let mut out = vec![0.0; bsz * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new([bsz, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            ng,
            "bmm",
        )
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(numel(sb))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let inner = self.check_suffix(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let mut data = Vec::with_capacity(va.len());
        for chunk in va.data().chunks(inner.max(1)) {
            data.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng, name)
    }

    /// `a + b`, `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product, `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Additive bias from an untracked tensor, e.g. a causal mask.
    pub fn masked_bias(&mut self, a: Var, mask: &Tensor) -> Result<Var, NumError> {
        let m = self.constant(mask.clone())?;
        self.add(a, m)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(t, Op::Scale { a, c }, ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar { a }, ng, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu { a }, ng, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh { a }, ng, "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(|x| gelu_parts(x).0);
        let ng = self.ng(a);
        self.push(t, Op::Gelu { a }, ng, "gelu")
    }

    /// `ln(1 + e^x)` without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus { a }, ng, "softplus")
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let va = self.value(a);
        if va.rank() == 0 {
            return Err(NumError::InvalidAxis {
                op: "softmax",
                axis: 0,
                rank: 0,
            });
        }
        let (rows, n) = rows_cols(va.shape());
        let mut out = va.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let ng = self.ng(a);
        self.push(t, Op::Softmax { a }, ng, "softmax")
    }

    /// Layer normalisation over the last axis (biased variance) followed by `gain`, `bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let sx = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&sx);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(NumError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if sx.is_empty() || d < 2 {
            return Err(NumError::Invalid(format!(
                "layer_norm needs last extent >= 2, got {sx:?}"
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, NumError> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(NumError::InvalidAxis {
                op: "reduce_axis",
                axis,
                rank: sa.len(),
            });
        }
        let outer = numel(&sa[..axis]);
        let n = sa[axis];
        let inner = numel(&sa[axis + 1..]);
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let av = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &av[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = sa;
        shape.remove(axis);
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, out)?,
            Op::SumAxis { a, axis, scale },
            ng,
            "reduce_axis",
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        self.reduce_axis(a, axis, true)
    }

    /// Concatenate along the last (feature) axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| NumError::Invalid("concat of nothing".into()))?,
            )
            .to_vec();
        if first.is_empty() {
            return Err(NumError::InvalidAxis {
                op: "concat_last",
                axis: 0,
                rank: 0,
            });
        }
        let lead = &first[..first.len() - 1];
        let rows = numel(lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(NumError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(shape, out)?,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            ng,
            "concat_last",
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let (rows, w) = rows_cols(&sa);
        if sa.is_empty() || start + len > w {
            return Err(NumError::InvalidRange {
                op: "slice_last",
                start,
                end: start + len,
                extent: w,
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * w + start..r * w + start + len]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, out)?,
            Op::SliceLast { a, start },
            ng,
            "slice_last",
        )
    }

    /// Entries `start..start + len` along axis 0.
    pub fn narrow0(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || start + len > sa[0] {
            return Err(NumError::InvalidRange {
                op: "narrow0",
                start,
                end: start + len,
                extent: sa.first().copied().unwrap_or(0),
            });
        }
        let inner = numel(&sa[1..]);
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = sa;
        shape[0] = len;
        let ng = self.ng(a);
        self.push(
            Tensor::new(shape, data)?,
            Op::Narrow0 { a, start },
            ng,
            "narrow0",
        )
    }

    /// Concatenate along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| NumError::Invalid("concat of nothing".into()))?,
            )
            .to_vec();
        if first.is_empty() {
            return Err(NumError::InvalidAxis {
                op: "concat0",
                axis: 0,
                rank: 0,
            });
        }
        let mut n0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(NumError::ShapeMismatch {
                    op: "concat0",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            n0 += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = n0;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat0 {
                parts: parts.to_vec(),
            },
            ng,
            "concat0",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        if shape.len() > MAX_RANK {
            return Err(NumError::RankTooHigh(shape.to_vec()));
        }
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape { a }, ng, "reshape")
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumError> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(NumError::NotScalar(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_val.shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        debug_assert!(v.0 < grads.len());
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec())))
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul { a, b, bias } => {
                let (a, b) = (*a, *b);
                if let Some(dc) = bias.and_then(|c| self.slot(grads, c)) {
                    let n = dc.len();
                    let dd = dc.data_mut();
                    for row in gd.chunks(n) {
                        for (d, &v) in dd.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                let sa = self.shape(a);
                let (m, k) = rows_cols(sa);
                let n = self.shape(b)[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    gemm(m, n, k, gd, false, bv, true, da.data_mut(), true);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm(k, m, n, av, true, gd, false, db.data_mut(), true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (a, b, tb) = (*a, *b, *trans_b);
                let sa = self.shape(a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    let dd = da.data_mut();
                    for i in 0..bsz {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // a·b: da = g·bᵀ; a·bᵀ: da = g·b
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            !tb,
                            &mut dd[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let dd = db.data_mut();
                    for i in 0..bsz {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut dd[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gi, true, ai, false, di, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, di, true);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                let (a, b) = (*a, *b);
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.slot(grads, b) {
                    let inner = db.len();
                    let dd = db.data_mut();
                    for chunk in gd.chunks(inner) {
                        for (d, &v) in dd.iter_mut().zip(chunk) {
                            *d += sign * v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let inner = bv.len();
                if let Some(da) = self.slot(grads, a) {
                    for (dc, gc) in da.data_mut().chunks_mut(inner).zip(gd.chunks(inner)) {
                        for ((d, &g), &y) in dc.iter_mut().zip(gc).zip(bv) {
                            *d += g * y;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let dd = db.data_mut();
                    for (gc, ac) in gd.chunks(inner).zip(av.chunks(inner)) {
                        for ((d, &g), &x) in dd.iter_mut().zip(gc).zip(ac) {
                            *d += g * x;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &v) in da.data_mut().iter_mut().zip(gd) {
                        *d += c * v;
                    }
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, gd);
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        if av[i] > 0.0 {
                            *d += gd[i];
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        *d += gd[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        *d += gd[i] * gelu_parts(av[i]).1;
                    }
                }
            }
            Op::Softplus { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        *d += gd[i] * sigmoid(av[i]);
                    }
                }
            }
            Op::Softmax { a } => {
                let (rows, n) = rows_cols(node.value.shape());
                if let Some(da) = self.slot(grads, *a) {
                    let dd = da.data_mut();
                    for r in 0..rows {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &gd[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dd[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = rows_cols(node.value.shape());
                let gv = self.value(*gain).data();
                if let Some(dg) = self.slot(grads, *gain) {
                    let dd = dg.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            dd[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let dd = db.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            dd[j] += gd[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let dd = dx.data_mut();
                    let df = d as f64;
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            dd[r * d + j] += inv / df * (df * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let gv = gd[0];
                if let Some(da) = self.slot(grads, *a) {
                    da.data_mut().iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::SumAxis { a, axis, scale } => {
                let sa = self.shape(*a);
                let outer = numel(&sa[..*axis]);
                let n = sa[*axis];
                let inner = numel(&sa[*axis + 1..]);
                if let Some(da) = self.slot(grads, *a) {
                    let dd = da.data_mut();
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                dd[(o * n + i) * inner + j] += scale * gd[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let (rows, total) = rows_cols(node.value.shape());
                let mut off = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if let Some(dp) = self.slot(grads, p) {
                        let dd = dp.data_mut();
                        for r in 0..rows {
                            for j in 0..w {
                                dd[r * w + j] += gd[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast { a, start } => {
                let (rows, w) = rows_cols(self.shape(*a));
                let len = *node.value.shape().last().unwrap();
                if let Some(da) = self.slot(grads, *a) {
                    let dd = da.data_mut();
                    for r in 0..rows {
                        for j in 0..len {
                            dd[r * w + start + j] += gd[r * len + j];
                        }
                    }
                }
            }
            Op::Narrow0 { a, start } => {
                let inner = numel(&self.shape(*a)[1..]);
                if let Some(da) = self.slot(grads, *a) {
                    let off = start * inner;
                    for (d, &v) in da.data_mut()[off..off + gd.len()].iter_mut().zip(gd) {
                        *d += v;
                    }
                }
            }
            Op::Concat0 { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        add_into(dp, &gd[off..off + n]);
                    }
                    off += n;
                }
            }
        }
    }
}

/// Stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Stable `ln(1 + e^x)`.
pub fn softplus_f64(x: f64) -> f64 {
    softplus(x)
}
