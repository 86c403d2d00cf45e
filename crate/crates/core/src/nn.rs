//! Small layer library over the tensor graph. Sequences are time-major
//! `[T, D]`; convolutions transpose to channel-major `[D, T]` internally.

use ume_tensor::rng::UmeRng;
use ume_tensor::{Conv1dAttrs, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

/// A forward pass in progress: the graph being recorded and the parameters
/// it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub s: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, s: &'a ParamStore) -> Self {
        Self { g, s }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.s, id)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut UmeRng,
}

impl Builder<'_> {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        Ok(self.store.add(name, shape, init, self.rng)?)
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.add(name, shape, Init::Xavier { fan_in, fan_out })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Builder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = init.xavier(&format!("{name}.weight"), &[d_in, d_out], d_in, d_out)?;
        let bias = if bias {
            Some(init.add(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// `x [T, d_in] → [T, d_out]`.
    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let y = cx.g.matmul(x, cx.p(self.weight))?;
        match self.bias {
            Some(b) => Ok(cx.g.add(y, cx.p(b))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Builder, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            scale: init.add(&format!("{name}.scale"), &[d], Init::Ones)?,
            shift: init.add(&format!("{name}.shift"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        Ok(cx.g.layer_norm(x, cx.p(self.scale), cx.p(self.shift))?)
    }
}

/// 1-D convolution over channel-major input `[C_in, T]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub attrs: Conv1dAttrs,
}

impl Conv1d {
    pub fn new(
        init: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        attrs: Conv1dAttrs,
        bias: bool,
    ) -> Result<Self> {
        let per_group = c_in / attrs.groups;
        let weight = init.xavier(
            &format!("{name}.weight"),
            &[c_out, per_group, kernel],
            per_group * kernel,
            c_out / attrs.groups * kernel,
        )?;
        let bias = if bias {
            Some(init.add(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, attrs })
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        Ok(cx
            .g
            .conv1d(x, cx.p(self.weight), self.bias.map(|b| cx.p(b)), self.attrs)?)
    }

    /// Applies the convolution to time-major `[T, C_in]`, returning `[T', C_out]`.
    pub fn forward_time_major(&self, cx: Ctx, x: Var) -> Result<Var> {
        let y = self.forward(cx, cx.g.transpose(x)?)?;
        Ok(cx.g.transpose(y)?)
    }
}

/// Multi-head scaled dot-product attention with separate projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Builder, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d_model, d_model, true)?,
            // a key bias shifts every score of a query equally, which the
            // softmax cancels; it would only carry a zero gradient
            k: Linear::new(init, &format!("{name}.k"), d_model, d_model, false)?,
            v: Linear::new(init, &format!("{name}.v"), d_model, d_model, true)?,
            out: Linear::new(init, &format!("{name}.out"), d_model, d_model, true)?,
            heads,
            d_model,
        })
    }

    /// Queries from `x [Tq, D]`, keys/values from `memory [Tk, D]`.
    pub fn forward(&self, cx: Ctx, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, memory)?;
        let v = self.v.forward(cx, memory)?;
        let dh = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = cx.g.slice(q, 1, lo, hi)?;
            let kh = cx.g.slice(k, 1, lo, hi)?;
            let vh = cx.g.slice(v, 1, lo, hi)?;
            outs.push(cx.g.attention(qh, kh, vh, causal)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            cx.g.concat(&outs, 1)?
        };
        self.out.forward(cx, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Builder, name: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(init, &format!("{name}.l1"), d_model, d_ff, true)?,
            l2: Linear::new(init, &format!("{name}.l2"), d_ff, d_model, true)?,
        })
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let h = cx.g.relu(self.l1.forward(cx, x)?)?;
        self.l2.forward(cx, h)
    }
}

/// Pre-norm transformer block: self-attention then feed-forward, each residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(init: &mut Builder, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d_model)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d_model, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d_model)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d_model, d_ff)?,
        })
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let n = self.ln1.forward(cx, x)?;
        let x = cx.g.add(x, self.attn.forward(cx, n, n, false)?)?;
        let n = self.ln2.forward(cx, x)?;
        Ok(cx.g.add(x, self.ff.forward(cx, n)?)?)
    }
}

/// Sinusoidal position table `[t, d]`: even columns sin, odd columns cos.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape matches data")
}

/// Length after a convolution with the given geometry.
pub fn conv_out_len(t: usize, kernel: usize, attrs: Conv1dAttrs) -> usize {
    let span = attrs.dilation * (kernel - 1) + 1;
    let padded = t + 2 * attrs.padding;
    if padded < span {
        0
    } else {
        (padded - span) / attrs.stride + 1
    }
}

pub fn conv_attrs(stride: usize, padding: usize, dilation: usize, groups: usize) -> Conv1dAttrs {
    Conv1dAttrs {
        stride,
        padding,
        dilation,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ume_tensor::rng::seeded;
    use ume_tensor::Precision;

    #[test]
    fn positional_table_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.row(2)[2] - (2.0f64 / 100.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn conv_length_arithmetic() {
        assert_eq!(conv_out_len(16, 16, conv_attrs(2, 7, 1, 1)), 8);
        assert_eq!(conv_out_len(8, 4, conv_attrs(2, 1, 1, 1)), 4);
        assert_eq!(conv_out_len(17, 4, conv_attrs(4, 0, 1, 1)), 4);
        assert_eq!(conv_out_len(3, 4, conv_attrs(4, 0, 1, 1)), 0);
    }

    #[test]
    fn attention_heads_match_manual_projection() {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = seeded(1, 0);
        let mha = MultiHeadAttention::new(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            "a",
            4,
            1,
        )
        .unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.0, 0.5, 1.0]]).unwrap());
        let y = mha.forward(cx, x, x, false).unwrap();
        assert_eq!(g.shape(y), vec![2, 4]);
        // one key/value row with causal masking → output is the projected value of row 0
        let y0 = mha.forward(cx, x, x, true).unwrap();
        let v = mha.v.forward(cx, x).unwrap();
        let proj = mha.out.forward(cx, v).unwrap();
        let a = g.value(y0).row(0).to_vec();
        let b = g.value(proj).row(0).to_vec();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
