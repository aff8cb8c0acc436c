//! Two executors for the same model code: [`Eval`] computes values and drops
//! temporaries as soon as they go out of scope, [`Tape`] records every node
//! so that [`Tape::backward`] can replay it in reverse.

use crate::error::{Error, Result};

use super::ops;
use super::{ConvLayer, NormLayer, ParamStore, Real, Tensor5};

/// Instance-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// The layer vocabulary the architectures are written against.
pub trait Exec<T: Real> {
    type Value;

    fn conv(&mut self, p: &ParamStore<T>, layer: &ConvLayer, x: &Self::Value) -> Result<Self::Value>;
    fn norm(&mut self, p: &ParamStore<T>, layer: &NormLayer, x: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn maxpool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn upsample(&mut self, x: &Self::Value) -> Self::Value;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn shape(&self, x: &Self::Value) -> [usize; 5];
}

fn check_finite<T: Real>(t: &Tensor5<T>, what: &str) {
    debug_assert!(t.all_finite(), "non-finite values after {what}");
}

/// Forward-only execution.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl<T: Real> Exec<T> for Eval {
    type Value = Tensor5<T>;

    fn conv(&mut self, p: &ParamStore<T>, l: &ConvLayer, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let y = ops::conv3d_forward(x, p.value(l.weight), p.value(l.bias), l.c_out, l.k)?;
        check_finite(&y, "conv3d");
        Ok(y)
    }

    fn norm(&mut self, p: &ParamStore<T>, l: &NormLayer, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let (y, _) = ops::instance_norm_forward(x, p.value(l.gamma), p.value(l.beta), NORM_EPS)?;
        check_finite(&y, "instance_norm");
        Ok(y)
    }

    fn relu(&mut self, x: &Tensor5<T>) -> Tensor5<T> {
        ops::relu_forward(x)
    }

    fn maxpool(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(ops::maxpool_forward(x)?.0)
    }

    fn upsample(&mut self, x: &Tensor5<T>) -> Tensor5<T> {
        ops::upsample_forward(x)
    }

    fn concat(&mut self, a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
        ops::concat_forward(a, b)
    }

    fn add(&mut self, a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
        ops::add_forward(a, b)
    }

    fn shape(&self, x: &Tensor5<T>) -> [usize; 5] {
        x.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input { requires_grad: bool },
    Conv { x: NodeId, layer: ConvLayer },
    Norm { x: NodeId, layer: NormLayer, cache: ops::NormCache<T> },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Upsample { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Softmax { x: NodeId },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor5<T>,
    needs_grad: bool,
}

/// Recording executor. Nodes are appended in forward order, which is a
/// topological order; backward visits them in exact reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients with respect to tape inputs that requested them.
#[derive(Debug)]
pub struct InputGrads<T> {
    grads: Vec<(NodeId, Tensor5<T>)>,
}

impl<T: Real> InputGrads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor5<T>> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor5<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor5<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Input { requires_grad }, value, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor5<T> {
        &self.nodes[id.0].value
    }

    /// Hash of every ReLU activity mask and max-pool selection on the tape.
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the network function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu { .. } => {
                    i.hash(&mut h);
                    for v in n.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = ops::softmax_forward(self.value(x));
        let needs = self.needs(x);
        self.push(Op::Softmax { x }, y, needs)
    }

    /// Back-propagates `seed` (dL/d`output`) through the recorded graph,
    /// accumulating parameter gradients into `params`. Node values are released
    /// as soon as their own backward step has run.
    pub fn backward(mut self, params: &mut ParamStore<T>, output: NodeId, seed: Tensor5<T>) -> Result<InputGrads<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "seed {:?} vs output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor5<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut inputs = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        inputs.push((NodeId(i), g));
                    }
                }
                Op::Conv { x, layer } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = self.nodes[x.0].needs_grad.then(|| Tensor5::zeros(xv.shape()));
                    let mut dw = vec![T::zero(); params.value(layer.weight).len()];
                    let mut db = vec![T::zero(); layer.c_out];
                    ops::conv3d_backward(xv, params.value(layer.weight), layer.c_out, layer.k, &g, dx.as_mut(), &mut dw, &mut db)?;
                    add_into(params.grad_mut(layer.weight), &dw);
                    add_into(params.grad_mut(layer.bias), &db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Norm { x, layer, cache } => {
                    let mut dx = self.nodes[x.0].needs_grad.then(|| Tensor5::zeros(g.shape()));
                    let mut dgamma = vec![T::zero(); layer.channels];
                    let mut dbeta = vec![T::zero(); layer.channels];
                    ops::instance_norm_backward(&g, cache, params.value(layer.gamma), dx.as_mut(), &mut dgamma, &mut dbeta);
                    add_into(params.grad_mut(layer.gamma), &dgamma);
                    add_into(params.grad_mut(layer.beta), &dbeta);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor5::zeros(g.shape());
                        ops::relu_backward(&node.value, &g, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor5::zeros(self.nodes[x.0].value.shape());
                        ops::maxpool_backward(&g, argmax, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Upsample { x } => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor5::zeros(self.nodes[x.0].value.shape());
                        ops::upsample_backward(&g, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[a.0].value.c();
                    let mut da = self.nodes[a.0].needs_grad.then(|| Tensor5::zeros(self.nodes[a.0].value.shape()));
                    let mut db = self.nodes[b.0].needs_grad.then(|| Tensor5::zeros(self.nodes[b.0].value.shape()));
                    ops::concat_backward(&g, da.as_mut(), db.as_mut(), ca);
                    if let Some(da) = da {
                        accumulate(&mut grads, *a, da);
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add { a, b } => {
                    let (na, nb) = (self.nodes[a.0].needs_grad, self.nodes[b.0].needs_grad);
                    match (na, nb) {
                        (true, true) => {
                            accumulate(&mut grads, *a, g.clone());
                            accumulate(&mut grads, *b, g);
                        }
                        (true, false) => accumulate(&mut grads, *a, g),
                        (false, true) => accumulate(&mut grads, *b, g),
                        (false, false) => {}
                    }
                }
                Op::Softmax { x } => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor5::zeros(g.shape());
                        ops::softmax_backward(&node.value, &g, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                }
            }
            self.nodes[i].value = Tensor5::zeros([0; 5]);
        }
        params.mark_grads_populated();
        Ok(InputGrads { grads: inputs })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor5<T>>], id: NodeId, g: Tensor5<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

impl<T: Real> Exec<T> for Tape<T> {
    type Value = NodeId;

    fn conv(&mut self, p: &ParamStore<T>, layer: &ConvLayer, x: &NodeId) -> Result<NodeId> {
        let y = Eval.conv(p, layer, self.value(*x))?;
        Ok(self.push(Op::Conv { x: *x, layer: *layer }, y, true))
    }

    fn norm(&mut self, p: &ParamStore<T>, layer: &NormLayer, x: &NodeId) -> Result<NodeId> {
        let (y, cache) = ops::instance_norm_forward(self.value(*x), p.value(layer.gamma), p.value(layer.beta), NORM_EPS)?;
        check_finite(&y, "instance_norm");
        Ok(self.push(Op::Norm { x: *x, layer: *layer, cache }, y, true))
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = ops::relu_forward(self.value(*x));
        let needs = self.needs(*x);
        self.push(Op::Relu { x: *x }, y, needs)
    }

    fn maxpool(&mut self, x: &NodeId) -> Result<NodeId> {
        let (y, argmax) = ops::maxpool_forward(self.value(*x))?;
        let needs = self.needs(*x);
        Ok(self.push(Op::MaxPool { x: *x, argmax }, y, needs))
    }

    fn upsample(&mut self, x: &NodeId) -> NodeId {
        let y = ops::upsample_forward(self.value(*x));
        let needs = self.needs(*x);
        self.push(Op::Upsample { x: *x }, y, needs)
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = ops::concat_forward(self.value(*a), self.value(*b))?;
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(Op::Concat { a: *a, b: *b }, y, needs))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = ops::add_forward(self.value(*a), self.value(*b))?;
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(Op::Add { a: *a, b: *b }, y, needs))
    }

    fn shape(&self, x: &NodeId) -> [usize; 5] {
        self.value(*x).shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn gradients_accumulate_across_backward_passes_and_reset() {
        let mut r = rng::stream(5, &[]);
        let mut p = ParamStore::<f64>::new();
        let conv = ConvLayer::new(&mut p, "c", 1, 2, 3, &mut r);
        let x = Tensor5::from_vec([1, 1, 2, 2, 2], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();

        let run = |p: &mut ParamStore<f64>| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone(), false);
            let y = tape.conv(p, &conv, &xi).unwrap();
            let seed = Tensor5::full(tape.value(y).shape(), 1.0);
            tape.backward(p, y, seed).unwrap();
        };
        run(&mut p);
        let once = p.get(conv.weight).grad.clone();
        assert!(p.grads_populated());
        run(&mut p);
        for (a, b) in p.get(conv.weight).grad.iter().zip(&once) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        p.zero_grad();
        assert!(p.iter().all(|q| q.grad.iter().all(|&g| g == 0.0)));
        assert!(!p.grads_populated());
    }
}
