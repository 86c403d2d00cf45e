use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::{self, BackwardCtx, Conv1dAttrs, Primitive, Saved};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fault injection for mutation tests of the gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales every conv1d kernel gradient by 1.5.
    CorruptConv1dWeightGrad,
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    saved: Saved,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
    fault: Option<Fault>,
}

/// Records one forward pass. Values are immutable once recorded; a single
/// call to [`Graph::backward`] consumes the graph.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Fault) {
        self.inner.borrow_mut().fault = Some(fault);
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var(inner.nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad: false,
            param: None,
        })
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf for a trainable parameter. Repeated calls return the same leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.inner.borrow().params.get(&id) {
            return v;
        }
        let v = self.push(Node {
            value: store.get(id).value.clone(),
            prim: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad: true,
            param: Some(id),
        });
        self.inner.borrow_mut().params.insert(id, v);
        v
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Records `prim` applied to `inputs`.
    pub fn apply(&self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let (value, saved, requires_grad) = {
            let inner = self.inner.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &inner.nodes[v.0].value).collect();
            let (value, saved) = ops::forward(&prim, &vals)?;
            let requires_grad = inputs.iter().any(|v| inner.nodes[v.0].requires_grad);
            (value, saved, requires_grad)
        };
        Ok(self.push(Node {
            value,
            prim: Some(prim),
            inputs: inputs.to_vec(),
            saved: if requires_grad { saved } else { Saved::None },
            requires_grad,
            param: None,
        }))
    }

    /// Reverse-mode pass from a one-element `loss`; gradients are accumulated
    /// into every reachable parameter of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let shape = inner.nodes[loss.0].value.shape().to_vec();
        if inner.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        inner.consumed = true;
        let corrupt = inner.fault == Some(Fault::CorruptConv1dWeightGrad);
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if let Some(id) = node.param {
                store.accumulate_grad(id, &gout);
                continue;
            }
            let Some(prim) = &node.prim else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
            let input_grads = ops::backward(
                prim,
                BackwardCtx {
                    inputs: &inputs,
                    out: &node.value,
                    saved: &node.saved,
                    gout: &gout,
                    need: &need,
                    corrupt_conv_weight: corrupt,
                },
            );
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // Convenience wrappers, one per primitive.

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv1d(&self, x: Var, w: Var, bias: Option<Var>, attrs: Conv1dAttrs) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Primitive::Conv1d(attrs), &[x, w, b]),
            None => self.apply(Primitive::Conv1d(attrs), &[x, w]),
        }
    }

    pub fn conv_transpose1d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::ConvTranspose1d { stride }, &[x, w])
    }

    pub fn layer_norm(&self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps: 1e-5 }, &[x, scale, shift])
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn prelu(&self, x: Var, slope: Var) -> Result<Var> {
        self.apply(Primitive::Prelu, &[x, slope])
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn upsample_repeat(&self, x: Var, factor: usize) -> Result<Var> {
        self.apply(Primitive::UpsampleRepeat { factor }, &[x])
    }

    pub fn gather_rows(&self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows(rows), &[x])
    }

    pub fn embedding(&self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Embedding(ids), &[table])
    }

    pub fn attention(&self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        self.apply(Primitive::Attention { causal }, &[q, k, v])
    }

    pub fn bce_with_logits(&self, logits: Var, targets: Var) -> Result<Var> {
        self.apply(Primitive::BceWithLogits, &[logits, targets])
    }

    pub fn ctc(&self, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
        self.apply(
            Primitive::Ctc {
                target: target.to_vec(),
                blank,
            },
            &[log_probs],
        )
    }

    /// Inner product of two equal-shape tensors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, Precision};
    use rand::SeedableRng;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(Precision::F64);
        let ids = values
            .iter()
            .map(|(n, t)| {
                let id = store.add(*n, t.shape(), Init::Zeros, &mut rng).unwrap();
                store.get_mut(id).value = t.clone();
                id
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (mut store, ids) = store_with(&[("x", Tensor::from_vec(vec![1.0, -2.0, 3.0]))]);
        let g = Graph::new();
        let x = g.param(&store, ids[0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(ids[0]).grad.as_deref(), Some(&[2.0, -4.0, 6.0][..]));
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let z = vec![0.3, -1.2, 2.0];
        let (mut store, ids) = store_with(&[("z", Tensor::from_vec(z.clone()))]);
        let g = Graph::new();
        let zv = g.param(&store, ids[0]);
        let lp = g.log_softmax(zv, 0).unwrap();
        let picked = g.gather_rows(lp, vec![2]).unwrap();
        let nll = g.scale(picked, -1.0).unwrap();
        let loss = g.sum(nll).unwrap();
        g.backward(loss, &mut store).unwrap();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let grad = store.get(ids[0]).grad.clone().unwrap();
        for (i, gi) in grad.iter().enumerate() {
            let expect = e[i] / s - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn second_backward_is_rejected() {
        let (mut store, ids) = store_with(&[("x", Tensor::scalar(2.0))]);
        let g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.backward(y, &mut store), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (mut store, ids) = store_with(&[("x", Tensor::from_vec(vec![1.0, 2.0]))]);
        let g = Graph::new();
        let x = g.param(&store, ids[0]);
        assert_eq!(g.backward(x, &mut store), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let (mut store, ids) = store_with(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(1.0))]);
        let g = Graph::new();
        let a = g.param(&store, ids[0]);
        let _b = g.param(&store, ids[1]);
        let y = g.mul(a, a).unwrap();
        g.backward(y, &mut store).unwrap();
        assert!(store.get(ids[1]).grad.is_none());
        assert_eq!(store.get(ids[0]).grad.as_deref(), Some(&[2.0][..]));
    }

    #[test]
    fn nan_inputs_propagate() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![f64::NAN, 1.0]));
        let y = g.sigmoid(x).unwrap();
        assert!(g.value(y).data()[0].is_nan());
    }
}
