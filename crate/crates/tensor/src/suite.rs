//! Randomized finite-difference cases, one generator per primitive kind.

use rand::Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::ops::Conv1dAttrs;
use crate::param::{Init, ParamId, ParamStore, Precision};
use crate::rng::{seeded, UmeRng};
use crate::tensor::{numel, Tensor};

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "conv1d",
    "conv_transpose1d",
    "layer_norm",
    "softmax",
    "log_softmax",
    "sigmoid",
    "relu",
    "prelu",
    "log",
    "concat",
    "slice",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "upsample_repeat",
    "gather_rows",
    "embedding",
    "attention",
    "bce_with_logits",
    "ctc",
];

struct Case {
    store: ParamStore,
    rng: UmeRng,
}

impl Case {
    fn param(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let id = self
            .store
            .add(name, shape, Init::Zeros, &mut self.rng)
            .expect("unique names");
        let data: Vec<f64> = (0..numel(shape)).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.store.get_mut(id).value = Tensor::new(shape.to_vec(), data).expect("sized");
        id
    }

    /// Values bounded away from zero with random sign.
    fn nonzero(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let id = self.param(name, shape, 0.5, 2.0);
        let signs: Vec<bool> = (0..numel(shape)).map(|_| self.rng.gen_bool(0.5)).collect();
        for (v, s) in self.store.get_mut(id).value.data_mut().iter_mut().zip(signs) {
            if s {
                *v = -*v;
            }
        }
        id
    }

    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn weights(&mut self, shape: &[usize]) -> Tensor {
        let data = (0..numel(shape)).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("sized")
    }
}

type Builder = Box<dyn Fn(&Graph, &ParamStore) -> Result<Var>>;

/// Contracts the primitive's output with a fixed random tensor so every
/// output element carries a distinct upstream gradient.
fn contract(g: &Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    g.dot(out, wv)
}

fn build_case(kind: &str, seed: u64) -> (ParamStore, Builder) {
    let mut c = Case {
        store: ParamStore::new(Precision::F64),
        rng: seeded(seed, 0x6772_6164),
    };
    let builder: Box<dyn Fn(&Graph, &ParamStore, &Tensor) -> Result<Var>>;
    let out_shape: Vec<usize>;
    match kind {
        "add" | "sub" | "mul" | "div" => {
            let (r, d) = (c.dim(1, 4), c.dim(1, 5));
            let a = c.param("a", &[r, d], -2.0, 2.0);
            let rhs_shape = match c.dim(0, 2) {
                0 => vec![r, d],
                1 => vec![d],
                _ => vec![],
            };
            let b = c.nonzero("b", &rhs_shape);
            let swap = kind != "div" && c.rng.gen_bool(0.3);
            let kind = kind.to_string();
            builder = Box::new(move |g, s, w| {
                let (mut x, mut y) = (g.param(s, a), g.param(s, b));
                if swap {
                    std::mem::swap(&mut x, &mut y);
                }
                let out = match kind.as_str() {
                    "add" => g.add(x, y)?,
                    "sub" => g.sub(x, y)?,
                    "mul" => g.mul(x, y)?,
                    _ => g.div(x, y)?,
                };
                contract(g, out, w)
            });
            out_shape = vec![r, d];
        }
        "scale" => {
            let n = c.dim(1, 8);
            let a = c.param("a", &[n], -2.0, 2.0);
            let k = c.rng.gen_range(-3.0..3.0);
            builder = Box::new(move |g, s, w| {
                let out = g.scale(g.param(s, a), k)?;
                contract(g, out, w)
            });
            out_shape = vec![n];
        }
        "matmul" => {
            let (m, k, n) = (c.dim(1, 5), c.dim(1, 5), c.dim(1, 5));
            let a = c.param("a", &[m, k], -1.0, 1.0);
            let b = c.param("b", &[k, n], -1.0, 1.0);
            builder = Box::new(move |g, s, w| {
                let out = g.matmul(g.param(s, a), g.param(s, b))?;
                contract(g, out, w)
            });
            out_shape = vec![m, n];
        }
        "conv1d" => {
            let depthwise = c.rng.gen_bool(0.3);
            let cin = c.dim(1, 4);
            let (cout, groups) = if depthwise { (cin, cin) } else { (c.dim(1, 4), 1) };
            let k = c.dim(1, 4);
            let attrs = Conv1dAttrs {
                stride: c.dim(1, 3),
                padding: c.dim(0, 2),
                dilation: c.dim(1, 2),
                groups,
            };
            let span = attrs.dilation * (k - 1) + 1;
            let len = span + c.dim(0, 8);
            let x = c.param("x", &[cin, len], -1.0, 1.0);
            let wk = c.param("kernel", &[cout, cin / groups, k], -1.0, 1.0);
            let bias = c.rng.gen_bool(0.5).then(|| c.param("bias", &[cout], -1.0, 1.0));
            let out_len = (len + 2 * attrs.padding - span) / attrs.stride + 1;
            builder = Box::new(move |g, s, w| {
                let out = g.conv1d(g.param(s, x), g.param(s, wk), bias.map(|b| g.param(s, b)), attrs)?;
                contract(g, out, w)
            });
            out_shape = vec![cout, out_len];
        }
        "conv_transpose1d" => {
            let (cin, cout, k, stride, len) = (c.dim(1, 3), c.dim(1, 3), c.dim(1, 5), c.dim(1, 4), c.dim(1, 6));
            let x = c.param("x", &[cin, len], -1.0, 1.0);
            let wk = c.param("kernel", &[cin, cout, k], -1.0, 1.0);
            builder = Box::new(move |g, s, w| {
                let out = g.conv_transpose1d(g.param(s, x), g.param(s, wk), stride)?;
                contract(g, out, w)
            });
            out_shape = vec![cout, (len - 1) * stride + k];
        }
        "layer_norm" => {
            let (r, d) = (c.dim(1, 4), c.dim(2, 6));
            let x = c.param("x", &[r, d], -2.0, 2.0);
            let gamma = c.param("scale", &[d], 0.5, 1.5);
            let beta = c.param("shift", &[d], -0.5, 0.5);
            builder = Box::new(move |g, s, w| {
                let out = g.layer_norm(g.param(s, x), g.param(s, gamma), g.param(s, beta))?;
                contract(g, out, w)
            });
            out_shape = vec![r, d];
        }
        "softmax" | "log_softmax" => {
            let shape = vec![c.dim(1, 3), c.dim(1, 4), c.dim(1, 3)];
            let axis = c.dim(0, 2);
            let x = c.param("x", &shape, -2.0, 2.0);
            let log = kind == "log_softmax";
            builder = Box::new(move |g, s, w| {
                let xv = g.param(s, x);
                let out = if log {
                    g.log_softmax(xv, axis)?
                } else {
                    g.softmax(xv, axis)?
                };
                contract(g, out, w)
            });
            out_shape = shape;
        }
        "sigmoid" | "relu" | "log" => {
            let shape = vec![c.dim(1, 4), c.dim(1, 4)];
            let x = if kind == "log" {
                c.param("x", &shape, 0.2, 3.0)
            } else {
                c.nonzero("x", &shape)
            };
            let kind = kind.to_string();
            builder = Box::new(move |g, s, w| {
                let xv = g.param(s, x);
                let out = match kind.as_str() {
                    "sigmoid" => g.sigmoid(xv)?,
                    "relu" => g.relu(xv)?,
                    _ => g.log(xv)?,
                };
                contract(g, out, w)
            });
            out_shape = shape;
        }
        "prelu" => {
            let (r, d) = (c.dim(1, 4), c.dim(1, 4));
            let x = c.nonzero("x", &[r, d]);
            let slope_shape = if c.rng.gen_bool(0.5) { vec![1] } else { vec![d] };
            let a = c.param("slope", &slope_shape, 0.05, 0.5);
            builder = Box::new(move |g, s, w| {
                let out = g.prelu(g.param(s, x), g.param(s, a))?;
                contract(g, out, w)
            });
            out_shape = vec![r, d];
        }
        "concat" => {
            let axis = c.dim(0, 1);
            let n = c.dim(2, 3);
            let other = c.dim(1, 3);
            let mut ids = Vec::new();
            let mut total = 0;
            for i in 0..n {
                let len = c.dim(1, 3);
                total += len;
                let shape = if axis == 0 { vec![len, other] } else { vec![other, len] };
                ids.push(c.param(&format!("x{i}"), &shape, -1.0, 1.0));
            }
            builder = Box::new(move |g, s, w| {
                let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let out = g.concat(&xs, axis)?;
                contract(g, out, w)
            });
            out_shape = if axis == 0 {
                vec![total, other]
            } else {
                vec![other, total]
            };
        }
        "slice" => {
            let shape = vec![c.dim(1, 5), c.dim(1, 5)];
            let axis = c.dim(0, 1);
            let start = c.dim(0, shape[axis] - 1);
            let end = c.dim(start + 1, shape[axis]);
            let x = c.param("x", &shape, -1.0, 1.0);
            builder = Box::new(move |g, s, w| {
                let out = g.slice(g.param(s, x), axis, start, end)?;
                contract(g, out, w)
            });
            let mut sh = shape.clone();
            sh[axis] = end - start;
            out_shape = sh;
        }
        "reshape" | "transpose" => {
            let (r, d) = (c.dim(1, 5), c.dim(1, 5));
            let x = c.param("x", &[r, d], -1.0, 1.0);
            let t = kind == "transpose";
            builder = Box::new(move |g, s, w| {
                let xv = g.param(s, x);
                let out = if t { g.transpose(xv)? } else { g.reshape(xv, &[d, r])? };
                contract(g, out, w)
            });
            out_shape = vec![d, r];
        }
        "sum" | "mean" => {
            let shape = vec![c.dim(1, 4), c.dim(1, 4)];
            let x = c.param("x", &shape, -1.0, 1.0);
            let mean = kind == "mean";
            builder = Box::new(move |g, s, w| {
                let xv = g.param(s, x);
                let out = if mean { g.mean(xv)? } else { g.sum(xv)? };
                contract(g, out, w)
            });
            out_shape = vec![];
        }
        "upsample_repeat" => {
            let (r, d, f) = (c.dim(1, 4), c.dim(1, 3), c.dim(1, 3));
            let x = c.param("x", &[r, d], -1.0, 1.0);
            builder = Box::new(move |g, s, w| {
                let out = g.upsample_repeat(g.param(s, x), f)?;
                contract(g, out, w)
            });
            out_shape = vec![r * f, d];
        }
        "gather_rows" | "embedding" => {
            let (r, d, n) = (c.dim(1, 5), c.dim(1, 4), c.dim(1, 6));
            let idx: Vec<usize> = (0..n).map(|_| c.rng.gen_range(0..r)).collect();
            let x = c.param("table", &[r, d], -1.0, 1.0);
            let emb = kind == "embedding";
            builder = Box::new(move |g, s, w| {
                let xv = g.param(s, x);
                let out = if emb {
                    g.embedding(xv, idx.clone())?
                } else {
                    g.gather_rows(xv, idx.clone())?
                };
                contract(g, out, w)
            });
            out_shape = vec![n, d];
        }
        "attention" => {
            let causal = c.rng.gen_bool(0.5);
            let tq = c.dim(1, 5);
            let tk = if causal { tq } else { c.dim(1, 5) };
            let (d, dv) = (c.dim(1, 4), c.dim(1, 4));
            let q = c.param("query", &[tq, d], -1.0, 1.0);
            let k = c.param("key", &[tk, d], -1.0, 1.0);
            let v = c.param("value", &[tk, dv], -1.0, 1.0);
            builder = Box::new(move |g, s, w| {
                let out = g.attention(g.param(s, q), g.param(s, k), g.param(s, v), causal)?;
                contract(g, out, w)
            });
            out_shape = vec![tq, dv];
        }
        "bce_with_logits" => {
            let shape = vec![c.dim(1, 5), c.dim(1, 3)];
            let z = c.param("logits", &shape, -3.0, 3.0);
            let y = Tensor::new(
                shape.clone(),
                (0..numel(&shape)).map(|_| f64::from(c.rng.gen_range(0..2u8))).collect(),
            )
            .expect("sized");
            builder = Box::new(move |g, s, w| {
                let yv = g.constant(y.clone());
                let out = g.bce_with_logits(g.param(s, z), yv)?;
                contract(g, out, w)
            });
            out_shape = shape;
        }
        "ctc" => {
            let vocab = c.dim(2, 4);
            let ulen = c.dim(0, 3);
            let target: Vec<usize> = (0..ulen).map(|_| c.rng.gen_range(1..vocab)).collect();
            let frames = crate::ops::ctc_min_frames(&target).max(1) + c.dim(0, 3);
            let z = c.param("logits", &[frames, vocab], -2.0, 2.0);
            builder = Box::new(move |g, s, w| {
                let lp = g.log_softmax(g.param(s, z), 1)?;
                let out = g.ctc(lp, &target, 0)?;
                contract(g, out, w)
            });
            out_shape = vec![];
        }
        other => panic!("no gradient case for `{other}`"),
    }
    let w = c.weights(&out_shape);
    (c.store, Box::new(move |g, s| builder(g, s, &w)))
}

/// Runs a finite-difference check of primitive `kind` on a shape drawn from `seed`.
pub fn check_primitive(kind: &str, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (mut store, builder) = build_case(kind, seed);
    grad_check(&mut store, None, builder, cfg)
}
