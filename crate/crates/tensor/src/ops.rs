//! Primitive set: forward definitions and their vector-Jacobian products.

use std::str::FromStr;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{gemm, log_sum_exp, matmul, sigmoid, ConvGeom};
use crate::tensor::{numel, split_axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dAttrs {
    pub stride: usize,
    /// Zero padding applied to both ends of the time axis.
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Every operation the graph can record. Attributes travel inside the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    /// inputs: x [C_in, T], weight [C_out, C_in/groups, K], optional bias [C_out]
    Conv1d(Conv1dAttrs),
    /// inputs: x [C_in, T], weight [C_in, C_out, K]
    ConvTranspose1d {
        stride: usize,
    },
    /// inputs: x [.., D], scale [D], shift [D]; normalizes over the last axis
    LayerNorm {
        eps: f64,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    Sigmoid,
    Relu,
    /// inputs: x [.., D], slope [1] or [D]
    Prelu,
    Log,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Vec<usize>),
    Transpose,
    Sum,
    Mean,
    /// Repeats every row of axis 0 `factor` times.
    UpsampleRepeat {
        factor: usize,
    },
    /// Selects rows of axis 0 by index (rows may repeat).
    GatherRows(Vec<usize>),
    /// Looks up rows of an embedding table [V, D].
    Embedding(Vec<usize>),
    /// inputs: query [Tq, d], key [Tk, d], value [Tk, dv]
    Attention {
        causal: bool,
    },
    /// inputs: logits, targets (same shape; targets receive no gradient)
    BceWithLogits,
    /// input: log-probabilities [T, V]; output: negative log-likelihood
    Ctc {
        target: Vec<usize>,
        blank: usize,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Conv1d(_) => "conv1d",
            Primitive::ConvTranspose1d { .. } => "conv_transpose1d",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax { .. } => "log_softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Prelu => "prelu",
            Primitive::Log => "log",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::UpsampleRepeat { .. } => "upsample_repeat",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Embedding(_) => "embedding",
            Primitive::Attention { .. } => "attention",
            Primitive::BceWithLogits => "bce_with_logits",
            Primitive::Ctc { .. } => "ctc",
        }
    }
}

/// Parses the attribute-free kinds by name; kinds with attributes must be
/// constructed directly.
impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "matmul" => Primitive::MatMul,
            "sigmoid" => Primitive::Sigmoid,
            "relu" => Primitive::Relu,
            "prelu" => Primitive::Prelu,
            "log" => Primitive::Log,
            "transpose" => Primitive::Transpose,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "bce_with_logits" => Primitive::BceWithLogits,
            "softmax" => Primitive::Softmax { axis: 0 },
            "log_softmax" => Primitive::LogSoftmax { axis: 0 },
            "layer_norm" => Primitive::LayerNorm { eps: 1e-5 },
            "conv1d" => Primitive::Conv1d(Conv1dAttrs::default()),
            "attention" => Primitive::Attention { causal: false },
            other => return Err(TensorError::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Intermediate state kept from forward for the backward rule.
#[derive(Debug, Clone, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    Geom(ConvGeom),
    /// (normalized input, reciprocal std per row)
    Norm(Vec<f64>, Vec<f64>),
    /// attention probabilities [Tq, Tk]
    Probs(Vec<f64>),
    /// d(loss)/d(input), computed alongside the forward value
    Grad(Vec<f64>),
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs is repeated over the leading dims of lhs
    Rhs,
    Lhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        Ok((Broadcast::Same, a.to_vec()))
    } else if is_suffix(b, a) {
        Ok((Broadcast::Rhs, a.to_vec()))
    } else if is_suffix(a, b) {
        Ok((Broadcast::Lhs, b.to_vec()))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Rhs => {
            let n = b.len();
            a.iter().enumerate().map(|(i, &x)| f(x, b[i % n])).collect()
        }
        Broadcast::Lhs => {
            let n = a.len();
            b.iter().enumerate().map(|(i, &y)| f(a[i % n], y)).collect()
        }
    }
}

/// Folds a full-size gradient down to an operand that was broadcast.
fn reduce_to(g: Vec<f64>, len: usize) -> Vec<f64> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.into_iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn expect_arity(op: &Primitive, inputs: &[&Tensor], range: std::ops::RangeInclusive<usize>) -> Result<()> {
    if range.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(TensorError::Arity {
            op: op.name(),
            expected: *range.start(),
            got: inputs.len(),
        })
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn conv_geom(attrs: &Conv1dAttrs, x: &Tensor, w: &Tensor) -> Result<ConvGeom> {
    const OP: &str = "conv1d";
    if x.ndim() != 2 || w.ndim() != 3 {
        return Err(mismatch(OP, x.shape(), w.shape()));
    }
    let (in_ch, len) = (x.shape()[0], x.shape()[1]);
    let (out_ch, cig, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let g = attrs.groups;
    if g == 0 || attrs.stride == 0 || attrs.dilation == 0 {
        return Err(invalid(OP, "stride, dilation and groups must be positive"));
    }
    if in_ch % g != 0 || out_ch % g != 0 || cig * g != in_ch {
        return Err(mismatch(OP, x.shape(), w.shape()));
    }
    let span = attrs.dilation * (kernel - 1) + 1;
    let padded = len + 2 * attrs.padding;
    if kernel == 0 || padded < span {
        return Err(invalid(
            OP,
            format!(
                "input length {len} (padding {}) shorter than receptive span {span}",
                attrs.padding
            ),
        ));
    }
    Ok(ConvGeom {
        in_ch,
        out_ch,
        len,
        kernel,
        stride: attrs.stride,
        padding: attrs.padding,
        dilation: attrs.dilation,
        groups: g,
        out_len: (padded - span) / attrs.stride + 1,
    })
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let op = prim.name();
    let t = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data);
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            expect_arity(prim, inputs, 2..=2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (mode, shape) = broadcast(op, a.shape(), b.shape())?;
            let data = match prim {
                Primitive::Add => zip_broadcast(a.data(), b.data(), mode, |x, y| x + y),
                Primitive::Sub => zip_broadcast(a.data(), b.data(), mode, |x, y| x - y),
                Primitive::Mul => zip_broadcast(a.data(), b.data(), mode, |x, y| x * y),
                _ => zip_broadcast(a.data(), b.data(), mode, |x, y| x / y),
            };
            Ok((t(shape, data)?, Saved::None))
        }
        Primitive::Scale(c) => {
            expect_arity(prim, inputs, 1..=1)?;
            Ok((inputs[0].map(|v| v * c), Saved::None))
        }
        Primitive::MatMul => {
            expect_arity(prim, inputs, 2..=2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Ok((t(vec![m, n], matmul(m, k, n, a.data(), b.data()))?, Saved::None))
        }
        Primitive::Conv1d(attrs) => {
            expect_arity(prim, inputs, 2..=3)?;
            let (x, w) = (inputs[0], inputs[1]);
            let geo = conv_geom(attrs, x, w)?;
            if let Some(b) = inputs.get(2) {
                if b.shape() != [geo.out_ch] {
                    return Err(mismatch(op, w.shape(), b.shape()));
                }
            }
            let mut out = vec![0.0; geo.out_ch * geo.out_len];
            let (cig, cog, k) = (geo.in_per_group(), geo.out_per_group(), geo.kernel);
            if cig == 1 && cog == 1 {
                // depthwise
                for c in 0..geo.out_ch {
                    let xrow = &x.data()[c * geo.len..(c + 1) * geo.len];
                    let wrow = &w.data()[c * k..(c + 1) * k];
                    let orow = &mut out[c * geo.out_len..(c + 1) * geo.out_len];
                    for (tt, o) in orow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (kk, wv) in wrow.iter().enumerate() {
                            if let Some(s) = geo.src(tt, kk) {
                                acc += wv * xrow[s];
                            }
                        }
                        *o = acc;
                    }
                }
            } else {
                for g in 0..geo.groups {
                    let col = geo.im2col(x.data(), g);
                    let wg = &w.data()[g * cog * cig * k..(g + 1) * cog * cig * k];
                    let og = &mut out[g * cog * geo.out_len..(g + 1) * cog * geo.out_len];
                    gemm(
                        cog,
                        cig * k,
                        geo.out_len,
                        wg,
                        (cig * k, 1),
                        &col,
                        (geo.out_len, 1),
                        0.0,
                        og,
                        geo.out_len,
                    );
                }
            }
            if let Some(b) = inputs.get(2) {
                for (c, bias) in b.data().iter().enumerate() {
                    out[c * geo.out_len..(c + 1) * geo.out_len]
                        .iter_mut()
                        .for_each(|v| *v += bias);
                }
            }
            Ok((t(vec![geo.out_ch, geo.out_len], out)?, Saved::Geom(geo)))
        }
        Primitive::ConvTranspose1d { stride } => {
            expect_arity(prim, inputs, 2..=2)?;
            let (x, w) = (inputs[0], inputs[1]);
            if x.ndim() != 2 || w.ndim() != 3 || x.shape()[0] != w.shape()[0] {
                return Err(mismatch(op, x.shape(), w.shape()));
            }
            if *stride == 0 {
                return Err(invalid(op, "stride must be positive"));
            }
            let (cin, len) = (x.shape()[0], x.shape()[1]);
            let (cout, k) = (w.shape()[1], w.shape()[2]);
            if len == 0 {
                return Err(invalid(op, "empty input"));
            }
            let out_len = (len - 1) * stride + k;
            // cols[(co,kk), t] = sum_ci w[ci, co, kk] * x[ci, t]
            let mut cols = vec![0.0; cout * k * len];
            gemm(
                cout * k,
                cin,
                len,
                w.data(),
                (1, cout * k),
                x.data(),
                (len, 1),
                0.0,
                &mut cols,
                len,
            );
            let mut out = vec![0.0; cout * out_len];
            for co in 0..cout {
                for kk in 0..k {
                    let row = &cols[(co * k + kk) * len..][..len];
                    for (tt, v) in row.iter().enumerate() {
                        out[co * out_len + tt * stride + kk] += v;
                    }
                }
            }
            Ok((t(vec![cout, out_len], out)?, Saved::None))
        }
        Primitive::LayerNorm { eps } => {
            expect_arity(prim, inputs, 3..=3)?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = *x.shape().last().ok_or_else(|| invalid(op, "scalar input"))?;
            if gamma.shape() != [d] || beta.shape() != [d] {
                return Err(mismatch(op, x.shape(), gamma.shape()));
            }
            let rows = x.len() / d.max(1);
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let xs = &x.data()[r * d..(r + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xs[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
                }
            }
            Ok((t(x.shape().to_vec(), out)?, Saved::Norm(xhat, rstd)))
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            expect_arity(prim, inputs, 1..=1)?;
            let x = inputs[0];
            let (outer, n, inner) = split_axis(op, x.shape(), *axis)?;
            let log = matches!(prim, Primitive::LogSoftmax { .. });
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let m = (0..n).map(|j| x.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..n).map(|j| (x.data()[idx(j)] - m).exp()).sum();
                    for j in 0..n {
                        let v = x.data()[idx(j)] - m;
                        out[idx(j)] = if log { v - z.ln() } else { v.exp() / z };
                    }
                }
            }
            Ok((t(x.shape().to_vec(), out)?, Saved::None))
        }
        Primitive::Sigmoid | Primitive::Relu | Primitive::Log => {
            expect_arity(prim, inputs, 1..=1)?;
            let f: fn(f64) -> f64 = match prim {
                Primitive::Sigmoid => sigmoid,
                Primitive::Relu => |v| v.max(0.0),
                _ => f64::ln,
            };
            Ok((inputs[0].map(f), Saved::None))
        }
        Primitive::Prelu => {
            expect_arity(prim, inputs, 2..=2)?;
            let (x, a) = (inputs[0], inputs[1]);
            let d = *x.shape().last().unwrap_or(&1);
            if !(a.shape() == [1] || a.shape() == [d]) {
                return Err(mismatch(op, x.shape(), a.shape()));
            }
            let n = a.len();
            let out = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if v > 0.0 { v } else { a.data()[i % n] * v })
                .collect();
            Ok((t(x.shape().to_vec(), out)?, Saved::None))
        }
        Primitive::Concat { axis } => {
            if inputs.is_empty() {
                return Err(TensorError::Arity {
                    op,
                    expected: 1,
                    got: 0,
                });
            }
            let first = inputs[0].shape();
            let mut shape = first.to_vec();
            split_axis(op, first, *axis)?;
            shape[*axis] = 0;
            for x in inputs {
                let s = x.shape();
                if s.len() != first.len() || s[..*axis] != first[..*axis] || s[*axis + 1..] != first[*axis + 1..] {
                    return Err(mismatch(op, first, s));
                }
                shape[*axis] += s[*axis];
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for x in inputs {
                    let chunk = x.shape()[*axis] * inner;
                    out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((t(shape, out)?, Saved::None))
        }
        Primitive::Slice { axis, start, end } => {
            expect_arity(prim, inputs, 1..=1)?;
            let x = inputs[0];
            let (outer, n, inner) = split_axis(op, x.shape(), *axis)?;
            if start > end || *end > n {
                return Err(invalid(
                    op,
                    format!("range {start}..{end} out of bounds for axis size {n}"),
                ));
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            Ok((t(shape, out)?, Saved::None))
        }
        Primitive::Reshape(shape) => {
            expect_arity(prim, inputs, 1..=1)?;
            Ok((inputs[0].clone().reshape(shape.clone())?, Saved::None))
        }
        Primitive::Transpose => {
            expect_arity(prim, inputs, 1..=1)?;
            Ok((inputs[0].transpose2()?, Saved::None))
        }
        Primitive::Sum | Primitive::Mean => {
            expect_arity(prim, inputs, 1..=1)?;
            let x = inputs[0];
            let s: f64 = x.data().iter().sum();
            let v = if matches!(prim, Primitive::Mean) {
                if x.is_empty() {
                    return Err(invalid(op, "mean of empty tensor"));
                }
                s / x.len() as f64
            } else {
                s
            };
            Ok((Tensor::scalar(v), Saved::None))
        }
        Primitive::UpsampleRepeat { factor } => {
            expect_arity(prim, inputs, 1..=1)?;
            let x = inputs[0];
            if *factor == 0 || x.ndim() == 0 {
                return Err(invalid(op, "factor must be positive and input at least 1-D"));
            }
            let rows = x.shape()[0];
            let inner = x.len() / rows.max(1);
            let mut out = Vec::with_capacity(x.len() * factor);
            for r in 0..rows {
                for _ in 0..*factor {
                    out.extend_from_slice(&x.data()[r * inner..(r + 1) * inner]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[0] *= factor;
            Ok((t(shape, out)?, Saved::None))
        }
        Primitive::GatherRows(idx) | Primitive::Embedding(idx) => {
            expect_arity(prim, inputs, 1..=1)?;
            let x = inputs[0];
            if x.ndim() == 0 {
                return Err(invalid(op, "input must be at least 1-D"));
            }
            let rows = x.shape()[0];
            let inner = x.len() / rows.max(1);
            let mut out = Vec::with_capacity(idx.len() * inner);
            for &r in idx {
                if r >= rows {
                    return Err(invalid(op, format!("index {r} out of range for {rows} rows")));
                }
                out.extend_from_slice(&x.data()[r * inner..(r + 1) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Ok((t(shape, out)?, Saved::None))
        }
        Primitive::Attention { causal } => {
            expect_arity(prim, inputs, 3..=3)?;
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
                return Err(mismatch(op, q.shape(), k.shape()));
            }
            let (tq, d) = (q.shape()[0], q.shape()[1]);
            let (tk, dv) = (k.shape()[0], v.shape()[1]);
            if k.shape()[1] != d {
                return Err(mismatch(op, q.shape(), k.shape()));
            }
            if v.shape()[0] != tk {
                return Err(mismatch(op, k.shape(), v.shape()));
            }
            if tk == 0 {
                return Err(invalid(op, "empty key sequence"));
            }
            let scale = 1.0 / (d as f64).sqrt();
            let mut p = vec![0.0; tq * tk];
            gemm(tq, d, tk, q.data(), (d, 1), k.data(), (1, d), 0.0, &mut p, tk);
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let limit = if *causal { (i + 1).min(tk) } else { tk };
                let m = row[..limit].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut z = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j < limit { (*s * scale - m).exp() } else { 0.0 };
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            let out = matmul(tq, tk, dv, &p, v.data());
            Ok((t(vec![tq, dv], out)?, Saved::Probs(p)))
        }
        Primitive::BceWithLogits => {
            expect_arity(prim, inputs, 2..=2)?;
            let (z, y) = (inputs[0], inputs[1]);
            if z.shape() != y.shape() {
                return Err(mismatch(op, z.shape(), y.shape()));
            }
            let out = z
                .data()
                .iter()
                .zip(y.data())
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .collect();
            Ok((t(z.shape().to_vec(), out)?, Saved::None))
        }
        Primitive::Ctc { target, blank } => {
            expect_arity(prim, inputs, 1..=1)?;
            let lp = inputs[0];
            if lp.ndim() != 2 || lp.shape()[0] == 0 {
                return Err(invalid(
                    op,
                    format!("log-probabilities must be non-empty [T, V], got {:?}", lp.shape()),
                ));
            }
            let (nll, grad) = ctc_forward_backward(lp.data(), lp.shape()[0], lp.shape()[1], target, *blank)?;
            Ok((Tensor::scalar(nll), Saved::Grad(grad)))
        }
    }
}

/// Minimum frames a CTC alignment of `target` needs: one per label plus one
/// blank between each adjacent repeated pair.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space CTC forward-backward. Returns the negative log-likelihood and its
/// gradient with respect to the log-probabilities.
pub(crate) fn ctc_forward_backward(
    lp: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    const OP: &str = "ctc";
    if blank >= vocab {
        return Err(invalid(OP, format!("blank {blank} outside vocabulary of {vocab}")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= vocab || l == blank) {
        return Err(invalid(
            OP,
            format!("target label {bad} invalid (blank {blank}, vocabulary {vocab})"),
        ));
    }
    let need = ctc_min_frames(target);
    if frames < need {
        return Err(invalid(
            OP,
            format!(
                "infeasible target: {} labels need {need} frames, have {frames}",
                target.len()
            ),
        ));
    }
    let ninf = f64::NEG_INFINITY;
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1];
    let at = |t: usize, k: usize| lp[t * vocab + k];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = at(0, blank);
    if s_len > 1 {
        alpha[1] = at(0, label(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + at(t, label(s)) };
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_lik = alpha[last + s_len - 1];
    if s_len > 1 {
        log_lik = log_sum_exp(log_lik, alpha[last + s_len - 2]);
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = at(frames - 1, label(s_len - 1));
    if s_len > 1 {
        beta[last + s_len - 2] = at(frames - 1, label(s_len - 2));
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_sum_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_sum_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + at(t, label(s)) };
        }
    }

    // alpha and beta both include the emission at t, so the occupancy of
    // (t, k) divides it out once.
    let mut grad = vec![0.0; frames * vocab];
    if log_lik.is_finite() {
        for t in 0..frames {
            let mut occ = vec![ninf; vocab];
            for s in 0..s_len {
                let k = label(s);
                occ[k] = log_sum_exp(occ[k], alpha[t * s_len + s] + beta[t * s_len + s]);
            }
            for k in 0..vocab {
                if occ[k] > ninf {
                    grad[t * vocab + k] = -(occ[k] - at(t, k) - log_lik).exp();
                }
            }
        }
    }
    Ok((-log_lik, grad))
}

/// Context handed to a backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub out: &'a Tensor,
    pub saved: &'a Saved,
    pub gout: &'a [f64],
    pub need: &'a [bool],
    pub corrupt_conv_weight: bool,
}

pub(crate) fn backward(prim: &Primitive, cx: BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
    let BackwardCtx {
        inputs,
        out,
        saved,
        gout,
        need,
        corrupt_conv_weight,
    } = cx;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = gout.len();
            let ai = |i: usize| a.data()[i % a.len()];
            let bi = |i: usize| b.data()[i % b.len()];
            if want(0) {
                let g: Vec<f64> = match prim {
                    Primitive::Add | Primitive::Sub => gout.to_vec(),
                    Primitive::Mul => (0..n).map(|i| gout[i] * bi(i)).collect(),
                    _ => (0..n).map(|i| gout[i] / bi(i)).collect(),
                };
                grads[0] = Some(reduce_to(g, a.len()));
            }
            if want(1) {
                let g: Vec<f64> = match prim {
                    Primitive::Add => gout.to_vec(),
                    Primitive::Sub => gout.iter().map(|v| -v).collect(),
                    Primitive::Mul => (0..n).map(|i| gout[i] * ai(i)).collect(),
                    _ => (0..n).map(|i| -gout[i] * ai(i) / (bi(i) * bi(i))).collect(),
                };
                grads[1] = Some(reduce_to(g, b.len()));
            }
        }
        Primitive::Scale(c) => grads[0] = Some(gout.iter().map(|g| g * c).collect()),
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if want(0) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gout, (n, 1), b.data(), (1, n), 0.0, &mut da, k);
                grads[0] = Some(da);
            }
            if want(1) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), gout, (n, 1), 0.0, &mut db, n);
                grads[1] = Some(db);
            }
        }
        Primitive::Conv1d(_) => {
            let Saved::Geom(geo) = saved else {
                unreachable!("conv1d saves its geometry")
            };
            let (x, w) = (inputs[0], inputs[1]);
            let (cig, cog, k, ol) = (geo.in_per_group(), geo.out_per_group(), geo.kernel, geo.out_len);
            let mut dx = want(0).then(|| vec![0.0; x.len()]);
            let mut dw = want(1).then(|| vec![0.0; w.len()]);
            if cig == 1 && cog == 1 {
                for c in 0..geo.out_ch {
                    let xrow = &x.data()[c * geo.len..(c + 1) * geo.len];
                    let grow = &gout[c * ol..(c + 1) * ol];
                    for kk in 0..k {
                        let wv = w.data()[c * k + kk];
                        let mut acc = 0.0;
                        for (tt, g) in grow.iter().enumerate() {
                            if let Some(s) = geo.src(tt, kk) {
                                acc += g * xrow[s];
                                if let Some(dx) = dx.as_mut() {
                                    dx[c * geo.len + s] += g * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[c * k + kk] = acc;
                        }
                    }
                }
            } else {
                for g in 0..geo.groups {
                    let gg = &gout[g * cog * ol..(g + 1) * cog * ol];
                    let wg = &w.data()[g * cog * cig * k..(g + 1) * cog * cig * k];
                    if let Some(dw) = dw.as_mut() {
                        let col = geo.im2col(x.data(), g);
                        let dwg = &mut dw[g * cog * cig * k..(g + 1) * cog * cig * k];
                        gemm(cog, ol, cig * k, gg, (ol, 1), &col, (1, ol), 0.0, dwg, cig * k);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcol = vec![0.0; cig * k * ol];
                        gemm(cig * k, cog, ol, wg, (1, cig * k), gg, (ol, 1), 0.0, &mut dcol, ol);
                        geo.col2im_add(&dcol, g, dx);
                    }
                }
            }
            if corrupt_conv_weight {
                if let Some(dw) = dw.as_mut() {
                    dw.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            grads[0] = dx;
            grads[1] = dw;
            if inputs.len() == 3 && want(2) {
                grads[2] = Some(
                    (0..geo.out_ch)
                        .map(|c| gout[c * ol..(c + 1) * ol].iter().sum())
                        .collect(),
                );
            }
        }
        Primitive::ConvTranspose1d { stride } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (cin, len) = (x.shape()[0], x.shape()[1]);
            let (cout, k) = (w.shape()[1], w.shape()[2]);
            let out_len = out.shape()[1];
            let mut dcols = vec![0.0; cout * k * len];
            for co in 0..cout {
                for kk in 0..k {
                    let row = &mut dcols[(co * k + kk) * len..][..len];
                    for (tt, slot) in row.iter_mut().enumerate() {
                        *slot = gout[co * out_len + tt * stride + kk];
                    }
                }
            }
            if want(0) {
                let mut dx = vec![0.0; cin * len];
                gemm(
                    cin,
                    cout * k,
                    len,
                    w.data(),
                    (cout * k, 1),
                    &dcols,
                    (len, 1),
                    0.0,
                    &mut dx,
                    len,
                );
                grads[0] = Some(dx);
            }
            if want(1) {
                let mut dw = vec![0.0; cin * cout * k];
                gemm(
                    cin,
                    len,
                    cout * k,
                    x.data(),
                    (len, 1),
                    &dcols,
                    (1, len),
                    0.0,
                    &mut dw,
                    cout * k,
                );
                grads[1] = Some(dw);
            }
        }
        Primitive::LayerNorm { .. } => {
            let Saved::Norm(xhat, rstd) = saved else {
                unreachable!("layer_norm saves statistics")
            };
            let gamma = inputs[1];
            let d = gamma.len();
            let rows = rstd.len();
            if want(0) {
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gy = &gout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxh: Vec<f64> = gy.iter().zip(gamma.data()).map(|(g, w)| g * w).collect();
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
                grads[0] = Some(dx);
            }
            if want(1) {
                let mut dg = vec![0.0; d];
                for (i, g) in gout.iter().enumerate() {
                    dg[i % d] += g * xhat[i];
                }
                grads[1] = Some(dg);
            }
            if want(2) {
                grads[2] = Some(reduce_to(gout.to_vec(), d));
            }
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            let shape = out.shape();
            let (outer, n, inner) = split_axis("softmax", shape, *axis).expect("validated in forward");
            let y = out.data();
            let log = matches!(prim, Primitive::LogSoftmax { .. });
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    if log {
                        let s: f64 = (0..n).map(|j| gout[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = gout[idx(j)] - y[idx(j)].exp() * s;
                        }
                    } else {
                        let s: f64 = (0..n).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (gout[idx(j)] - s);
                        }
                    }
                }
            }
            grads[0] = Some(dx);
        }
        Primitive::Sigmoid => {
            grads[0] = Some(out.data().iter().zip(gout).map(|(y, g)| g * y * (1.0 - y)).collect());
        }
        Primitive::Relu => {
            grads[0] = Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, g)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Primitive::Log => {
            grads[0] = Some(inputs[0].data().iter().zip(gout).map(|(x, g)| g / x).collect());
        }
        Primitive::Prelu => {
            let (x, a) = (inputs[0], inputs[1]);
            let n = a.len();
            if want(0) {
                grads[0] = Some(
                    x.data()
                        .iter()
                        .zip(gout)
                        .enumerate()
                        .map(|(i, (&v, g))| if v > 0.0 { *g } else { a.data()[i % n] * g })
                        .collect(),
                );
            }
            if want(1) {
                let mut da = vec![0.0; n];
                for (i, (&v, g)) in x.data().iter().zip(gout).enumerate() {
                    if v <= 0.0 {
                        da[i % n] += g * v;
                    }
                }
                grads[1] = Some(da);
            }
        }
        Primitive::Concat { axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for (i, x) in inputs.iter().enumerate() {
                let chunk = x.shape()[*axis] * inner;
                if want(i) {
                    let mut g = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        g.extend_from_slice(&gout[o * total + offset..o * total + offset + chunk]);
                    }
                    grads[i] = Some(g);
                }
                offset += chunk;
            }
        }
        Primitive::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis("slice", x.shape(), *axis).expect("validated in forward");
            let width = (end - start) * inner;
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                dx[(o * n + start) * inner..(o * n + end) * inner].copy_from_slice(&gout[o * width..(o + 1) * width]);
            }
            grads[0] = Some(dx);
        }
        Primitive::Reshape(_) => grads[0] = Some(gout.to_vec()),
        Primitive::Transpose => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[j * r + i] = gout[i * c + j];
                }
            }
            grads[0] = Some(dx);
        }
        Primitive::Sum => grads[0] = Some(vec![gout[0]; inputs[0].len()]),
        Primitive::Mean => {
            let n = inputs[0].len();
            grads[0] = Some(vec![gout[0] / n as f64; n]);
        }
        Primitive::UpsampleRepeat { factor } => {
            let x = inputs[0];
            let rows = x.shape()[0];
            let inner = x.len() / rows.max(1);
            let mut dx = vec![0.0; x.len()];
            for r in 0..rows {
                for rep in 0..*factor {
                    let src = &gout[(r * factor + rep) * inner..][..inner];
                    dx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            grads[0] = Some(dx);
        }
        Primitive::GatherRows(idx) | Primitive::Embedding(idx) => {
            let x = inputs[0];
            let inner = x.len() / x.shape()[0].max(1);
            let mut dx = vec![0.0; x.len()];
            for (o, &r) in idx.iter().enumerate() {
                let src = &gout[o * inner..(o + 1) * inner];
                dx[r * inner..(r + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
            grads[0] = Some(dx);
        }
        Primitive::Attention { .. } => {
            let Saved::Probs(p) = saved else {
                unreachable!("attention saves probabilities")
            };
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            let (tq, d) = (q.shape()[0], q.shape()[1]);
            let (tk, dv) = (k.shape()[0], v.shape()[1]);
            let scale = 1.0 / (d as f64).sqrt();
            if want(2) {
                let mut dvv = vec![0.0; tk * dv];
                gemm(tk, tq, dv, p, (1, tk), gout, (dv, 1), 0.0, &mut dvv, dv);
                grads[2] = Some(dvv);
            }
            if want(0) || want(1) {
                let mut dp = vec![0.0; tq * tk];
                gemm(tq, dv, tk, gout, (dv, 1), v.data(), (1, dv), 0.0, &mut dp, tk);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/sqrt(d) scale
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut dp[i * tk..(i + 1) * tk];
                    let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dd, pp) in dr.iter_mut().zip(pr) {
                        *dd = pp * (*dd - s) * scale;
                    }
                }
                if want(0) {
                    let mut dq = vec![0.0; tq * d];
                    gemm(tq, tk, d, &dp, (tk, 1), k.data(), (d, 1), 0.0, &mut dq, d);
                    grads[0] = Some(dq);
                }
                if want(1) {
                    let mut dk = vec![0.0; tk * d];
                    gemm(tk, tq, d, &dp, (1, tk), q.data(), (d, 1), 0.0, &mut dk, d);
                    grads[1] = Some(dk);
                }
            }
        }
        Primitive::BceWithLogits => {
            let (z, y) = (inputs[0], inputs[1]);
            grads[0] = Some(
                z.data()
                    .iter()
                    .zip(y.data())
                    .zip(gout)
                    .map(|((&z, &y), g)| g * (sigmoid(z) - y))
                    .collect(),
            );
        }
        Primitive::Ctc { .. } => {
            let Saved::Grad(g) = saved else {
                unreachable!("ctc saves its gradient")
            };
            grads[0] = Some(g.iter().map(|v| v * gout[0]).collect());
        }
    }
    grads
}
